//! Stage-wise continual training for the adapter method, its ablations and
//! the full-fine-tuning baselines.
//!
//! Stage 0 trains the core and `q_0` on modality 0 and freezes them. That
//! pretrained state is shared by every method. Stage `m >= 1` trains on
//! modality `m` only and is followed by an evaluation sweep over every
//! dataset of modalities `0..=m`, filling row `m` of the score matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ana::{AdapterStack, AnaConfig, PathOptions};
use crate::backbone::{BackboneConfig, Binder, FrozenCore, QueryBank};
use crate::bench::{self, Benchmark, ModalityData};
use crate::metrics::{DatasetInfo, ModalityInfo, ScoreMatrix};
use crate::tensor::{derive_seed, seeded_rng, AdamW, AdamWConfig, SeededRng, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pathweave,
    /// Uni-adapters only; no cross paths, no gate.
    ContinualAdapter,
    PathweaveNoGating,
    PathweaveNoInAdapter,
    ContinualFt,
    WiseFt,
    L2regWe,
    /// Frozen core, no adapters: only the new query bank is trained.
    FrozenControl,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Pathweave,
        Method::ContinualAdapter,
        Method::PathweaveNoGating,
        Method::PathweaveNoInAdapter,
        Method::ContinualFt,
        Method::WiseFt,
        Method::L2regWe,
        Method::FrozenControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pathweave => "pathweave",
            Method::ContinualAdapter => "continual_adapter",
            Method::PathweaveNoGating => "pathweave_no_gating",
            Method::PathweaveNoInAdapter => "pathweave_no_in_adapter",
            Method::ContinualFt => "continual_ft",
            Method::WiseFt => "wise_ft",
            Method::L2regWe => "l2reg_we",
            Method::FrozenControl => "frozen_control",
        }
    }

    /// Adapter-path methods, for which history is frozen by construction.
    pub fn path_options(self) -> Option<PathOptions> {
        let full = PathOptions::default();
        match self {
            Method::Pathweave => Some(full),
            Method::ContinualAdapter => Some(PathOptions { cross_paths: false, use_in_adapter: false, use_gating: false }),
            Method::PathweaveNoGating => Some(PathOptions { use_gating: false, ..full }),
            Method::PathweaveNoInAdapter => Some(PathOptions { use_in_adapter: false, ..full }),
            _ => None,
        }
    }

    pub fn trains_core(self) -> bool {
        matches!(self, Method::ContinualFt | Method::WiseFt | Method::L2regWe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    /// Interpolation weight on the current weights for weight-space ensembling.
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    /// Strength of the L2 pull toward the stage-start weights.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
}

fn default_alpha() -> f32 {
    0.8
}

fn default_lambda() -> f32 {
    0.01
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self { method, alpha: default_alpha(), lambda: default_lambda() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then one cosine from the peak down to half the peak.
    #[default]
    WarmupCosine,
    /// Linear warmup, then cosine cycles of one inner epoch each, with the
    /// cycle peak halved at every restart.
    WarmupCosineRestarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_iters: usize,
    pub warmup_floor: f64,
    pub schedule: Schedule,
    /// Defaults to `iterations / 10`.
    pub inner_epoch_iters: Option<usize>,
    /// Loss is logged every `log_every` steps (and at the last step).
    pub log_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            peak_lr: 3e-3,
            warmup_iters: 100,
            warmup_floor: 1e-8,
            schedule: Schedule::WarmupCosine,
            inner_epoch_iters: None,
            log_every: 10,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl StageTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations < 2 || self.batch_size == 0 || self.log_every == 0 {
            return bad("iterations must be >= 2; batch_size and log_every positive");
        }
        if self.warmup_iters >= self.iterations {
            return bad("warmup_iters must be < iterations");
        }
        if !(self.peak_lr > 0.0) || !(self.warmup_floor > 0.0) || self.warmup_floor > self.peak_lr {
            return bad("need 0 < warmup_floor <= peak_lr");
        }
        if self.inner_epoch_iters == Some(0) {
            return bad("inner_epoch_iters must be positive");
        }
        Ok(())
    }

    pub fn inner_epoch(&self) -> usize {
        self.inner_epoch_iters.unwrap_or(self.iterations / 10).max(1)
    }
}

/// Learning rate at `step` (0-based); the last step is `iterations − 1`.
pub fn lr_at(cfg: &StageTrainConfig, step: usize) -> f64 {
    let (w, peak, floor) = (cfg.warmup_iters, cfg.peak_lr, cfg.warmup_floor);
    if step < w {
        return floor + (peak - floor) * step as f64 / w as f64;
    }
    let last = cfg.iterations - 1;
    match cfg.schedule {
        Schedule::WarmupCosine => {
            let span = (last - w).max(1) as f64;
            let p = ((step - w) as f64 / span).min(1.0);
            peak * (0.5 + 0.25 * (1.0 + (PI * p).cos()))
        }
        Schedule::WarmupCosineRestarts => {
            let len = cfg.inner_epoch();
            let k = (step - w) / len;
            let t = ((step - w) % len) as f64 / len as f64;
            peak * 0.5f64.powi(k as i32) * 0.5 * (1.0 + (PI * t).cos())
        }
    }
}

/// `θ ← α·θ_current + (1−α)·θ_anchor`, elementwise.
pub fn wise_ft_ensemble(current: &mut Tensor, anchor: &Tensor, alpha: f32) -> Result<()> {
    if current.shape() != anchor.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "wise_ft_ensemble",
            lhs: current.shape().to_vec(),
            rhs: anchor.shape().to_vec(),
        }
        .into());
    }
    let a = anchor.data();
    current.update(|c| {
        for (x, &y) in c.iter_mut().zip(a) {
            *x = alpha * *x + (1.0 - alpha) * y;
        }
    })?;
    Ok(())
}

/// `λ·Σ‖θ − θ_anchor‖²` on the tape.
pub fn l2_anchor_penalty<'t>(pairs: &[(Var<'t>, &Tensor)], lambda: f32) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for (v, anchor) in pairs {
        let a = v.tape().constant(anchor);
        let d = v.sub(&a)?;
        let sq = d.mul(&d)?.sum()?;
        total = Some(match total {
            Some(t) => t.add(&sq)?,
            None => sq,
        });
    }
    total.map(|t| t.scale(lambda)).transpose().map_err(Into::into)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: usize,
    pub method: String,
    pub entries: Vec<LogEntry>,
    /// Eval-split scores of the trained modality's datasets after the stage.
    pub eval_scores: Vec<f64>,
}

impl TrainLog {
    /// JSON-lines rendering, one `{step, loss, lr}` object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let mut v = serde_json::to_value(e)?;
            v["stage"] = self.stage.into();
            v["method"] = self.method.clone().into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.entries.last().map(|e| e.loss)
    }
}

/// What the generic loop needs from a model under training.
trait Trainee {
    fn trainable_names(&self) -> Vec<String>;
    fn loss<'t>(&self, b: &Binder<'t>, feats: Var<'t>, labels: &[usize]) -> Result<Var<'t>>;
    fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>>;
    fn after_step(&mut self, _step: usize) -> Result<()> {
        Ok(())
    }
}

fn diverged(stage: usize, step: usize, loss: f32) -> Error {
    Error::Diverged { stage, step, loss }
}

fn train_loop(
    trainee: &mut dyn Trainee,
    md: &ModalityData,
    stage: usize,
    method: &str,
    cfg: &StageTrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    cfg.validate()?;
    let names = trainee.trainable_names();
    let allowed: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut entries = Vec::new();
    for step in 0..cfg.iterations {
        let lr = lr_at(cfg, step);
        let (x, y) = bench::sample_batch(md, cfg.batch_size, rng)?;
        let (loss_value, grads) = {
            let tape = Tape::new();
            let b = Binder::with_trainable(&tape, names.iter().cloned());
            let feats = tape.constant_owned(x);
            let loss = match trainee.loss(&b, feats, &y) {
                Ok(l) => l,
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(stage, step, f32::NAN)),
                Err(e) => return Err(e),
            };
            let lv = loss.item()?;
            if !lv.is_finite() {
                return Err(diverged(stage, step, lv));
            }
            let g = tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in b.trainable_vars() {
                if !allowed.contains(name.as_str()) {
                    return Err(Error::Contract(format!("gradient reached non-trainable tensor {name}")));
                }
                let gv = g.get(var).ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
                grads.insert(name, gv.to_vec());
            }
            (lv, grads)
        };
        let mut params = trainee.params_mut()?;
        for (name, t) in params.iter_mut() {
            match grads.get(name.as_str()) {
                Some(g) => t.accumulate_grad(g)?,
                None => return Err(Error::Contract(format!("trainable tensor {name} unused by the forward pass"))),
            }
        }
        if params.len() != grads.len() {
            return Err(Error::Contract("trainable registry and bound tensors disagree".into()));
        }
        opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), lr as f32)?;
        drop(params);
        trainee.after_step(step)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            log::debug!("stage {stage} {method} step {step} loss {loss_value:.4} lr {lr:.3e}");
            entries.push(LogEntry { step, loss: loss_value, lr });
        }
    }
    Ok(TrainLog { stage, method: method.to_string(), entries, eval_scores: Vec::new() })
}

struct FullModel<'a> {
    core: &'a mut FrozenCore,
    query: &'a mut QueryBank,
}

impl Trainee for FullModel<'_> {
    fn trainable_names(&self) -> Vec<String> {
        let mut n = self.core.param_names();
        n.push(self.query.param_name());
        n
    }
    fn loss<'t>(&self, b: &Binder<'t>, feats: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.core.forward(b, self.query, feats, None)?.cross_entropy(labels)?)
    }
    fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        let mut p: Vec<_> = self.core.params_mut()?.collect();
        p.push((self.query.param_name(), &mut self.query.tokens));
        Ok(p)
    }
}

/// The frozen starting point every method shares.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub core: FrozenCore,
    pub query0: QueryBank,
    pub log: TrainLog,
}

/// Trains core + `q_0` on modality 0 and freezes both.
pub fn pretrain(mut core: FrozenCore, mut query: QueryBank, bench: &Benchmark, cfg: &StageTrainConfig) -> Result<Pretrained> {
    if core.is_frozen() {
        return Err(Error::Contract("pretraining needs an unfrozen core".into()));
    }
    let md = bench.modality(0)?;
    let mut rng = seeded_rng(derive_seed(core.pretrain_seed(), "batches.0"));
    let mut log = {
        let mut model = FullModel { core: &mut core, query: &mut query };
        train_loop(&mut model, md, 0, "pretrain", cfg, &mut rng)?
    };
    core.freeze();
    query.freeze();
    log.eval_scores = md
        .datasets
        .iter()
        .map(|d| bench::evaluate_plain(&core, &query, d))
        .collect::<Result<_>>()?;
    log::info!("pretrained modality 0: scores {:?}", log.eval_scores);
    Ok(Pretrained { core, query0: query, log })
}

/// Everything a sequence run needs besides the benchmark and method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub ana: AnaConfig,
    pub pretrain: StageTrainConfig,
    pub stage: StageTrainConfig,
    /// Eval rows per modality kept as the fixed probe batch.
    pub probe_rows: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            seed: 1,
            backbone: BackboneConfig::default(),
            ana: AnaConfig::default(),
            pretrain: StageTrainConfig::default(),
            stage: StageTrainConfig::default(),
            probe_rows: 16,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ana.validate()?;
        self.pretrain.validate()?;
        self.stage.validate()?;
        if self.probe_rows == 0 {
            return Err(Error::Config("probe_rows must be positive".into()));
        }
        Ok(())
    }

    fn check_bench(&self, bench: &Benchmark) -> Result<()> {
        if bench.spec.d_enc != self.backbone.d_enc || bench.spec.n_classes != self.backbone.n_classes {
            return Err(Error::Config(format!(
                "benchmark (d_enc {}, classes {}) does not fit backbone (d_enc {}, classes {})",
                bench.spec.d_enc, bench.spec.n_classes, self.backbone.d_enc, self.backbone.n_classes
            )));
        }
        Ok(())
    }
}

/// Builds and pretrains the shared stage-0 state for `plan.seed`.
pub fn pretrain_for(bench: &Benchmark, plan: &TrainPlan) -> Result<Pretrained> {
    plan.validate()?;
    plan.check_bench(bench)?;
    let core = FrozenCore::new(plan.backbone.clone(), derive_seed(plan.seed, "core"))?;
    let q0 = QueryBank::new(0, &plan.backbone, derive_seed(plan.seed, "query.0"))?;
    pretrain(core, q0, bench, &plan.pretrain)
}

/// Model state after some stage, in whichever form the method uses.
#[derive(Clone, Debug)]
pub enum ModelState {
    /// Frozen core plus a growing adapter stack.
    Paths { core: FrozenCore, stack: AdapterStack },
    /// One set of core weights plus one query bank per modality.
    Plain { core: FrozenCore, queries: Vec<QueryBank> },
}

impl ModelState {
    pub fn core(&self) -> &FrozenCore {
        match self {
            ModelState::Paths { core, .. } | ModelState::Plain { core, .. } => core,
        }
    }

    /// Number of modalities this state can serve.
    pub fn n_modalities(&self) -> usize {
        match self {
            ModelState::Paths { stack, .. } => stack.current() + 1,
            ModelState::Plain { queries, .. } => queries.len(),
        }
    }

    /// Logits `[B, C]` for modality `i` (path-switched where applicable).
    pub fn logits(&self, i: usize, feats: &Tensor) -> Result<Tensor> {
        match self {
            ModelState::Paths { core, stack } => stack.switch_path(i)?.logits(core, feats),
            ModelState::Plain { core, queries } => {
                let q = queries.get(i).ok_or(Error::UnknownModality(i))?;
                core.logits(q, feats, None)
            }
        }
    }

    pub fn evaluate(&self, i: usize, ds: &bench::Dataset) -> Result<f64> {
        bench::evaluate_with(ds, |x| self.logits(i, x))
    }
}

/// Full record of one method's run on one benchmark.
#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub method: MethodConfig,
    pub scores: ScoreMatrix,
    pub logs: Vec<TrainLog>,
    /// `probes[i]`: logits on modality `i`'s probe batch at the end of stage `i`.
    pub probes: Vec<Tensor>,
    pub state: ModelState,
}

/// Fixed probe batch of modality `i`: the first rows of its first dataset's eval split.
pub fn probe_batch(bench: &Benchmark, i: usize, rows: usize) -> Result<Tensor> {
    let ds = bench.dataset(i, 0)?;
    let idx: Vec<usize> = (0..rows.min(ds.eval.len())).collect();
    Ok(ds.eval.gather(&idx)?.0)
}

pub fn score_layout(bench: &Benchmark) -> Vec<ModalityInfo> {
    bench
        .modalities
        .iter()
        .map(|md| ModalityInfo {
            name: format!("modality{}", md.spec.modality),
            datasets: md.datasets.iter().map(|d| DatasetInfo { name: d.name.clone(), domain: d.domain }).collect(),
        })
        .collect()
}

fn fill_row(scores: &mut ScoreMatrix, bench: &Benchmark, state: &ModelState) -> Result<usize> {
    let m = scores.push_stage()?;
    for i in 0..=m {
        for (n, ds) in bench.modality(i)?.datasets.iter().enumerate() {
            ds.verify_eval()?;
            scores.set(m, i, n, state.evaluate(i, ds)?)?;
        }
    }
    Ok(m)
}

struct PathTrainee<'a> {
    core: &'a FrozenCore,
    stack: &'a mut AdapterStack,
    m: usize,
}

impl Trainee for PathTrainee<'_> {
    fn trainable_names(&self) -> Vec<String> {
        self.stack.path(self.m).map(|p| p.trainable_names()).unwrap_or_default()
    }
    fn loss<'t>(&self, b: &Binder<'t>, feats: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.stack.switch_path(self.m)?.forward(b, self.core, feats)?.cross_entropy(labels)?)
    }
    fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        self.stack.path_mut(self.m)?.named_tensors_mut()
    }
}

struct QueryTrainee<'a> {
    core: &'a FrozenCore,
    query: &'a mut QueryBank,
}

impl Trainee for QueryTrainee<'_> {
    fn trainable_names(&self) -> Vec<String> {
        vec![self.query.param_name()]
    }
    fn loss<'t>(&self, b: &Binder<'t>, feats: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.core.forward(b, self.query, feats, None)?.cross_entropy(labels)?)
    }
    fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        Ok(vec![(self.query.param_name(), &mut self.query.tokens)])
    }
}

/// Full fine-tuning with optional L2 pull and periodic weight-space ensembling.
struct BaselineTrainee<'a> {
    core: &'a mut FrozenCore,
    query: &'a mut QueryBank,
    anchor: BTreeMap<String, Tensor>,
    lambda: f32,
    ensemble_alpha: Option<f32>,
    inner_epoch: usize,
}

impl Trainee for BaselineTrainee<'_> {
    fn trainable_names(&self) -> Vec<String> {
        let mut n = self.core.param_names();
        n.push(self.query.param_name());
        n
    }
    fn loss<'t>(&self, b: &Binder<'t>, feats: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let task = self.core.forward(b, self.query, feats, None)?.cross_entropy(labels)?;
        if self.lambda == 0.0 {
            return Ok(task);
        }
        let pairs: Vec<(Var<'t>, &Tensor)> = self
            .core
            .params()
            .map(|(name, t)| (b.bind(&name, t), &self.anchor[&name]))
            .collect();
        match l2_anchor_penalty(&pairs, self.lambda)? {
            Some(p) => Ok(task.add(&p)?),
            None => Ok(task),
        }
    }
    fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        let mut p: Vec<_> = self.core.params_mut()?.collect();
        p.push((self.query.param_name(), &mut self.query.tokens));
        Ok(p)
    }
    fn after_step(&mut self, step: usize) -> Result<()> {
        if let Some(alpha) = self.ensemble_alpha {
            if (step + 1) % self.inner_epoch == 0 {
                for (name, t) in self.core.params_mut()? {
                    wise_ft_ensemble(t, &self.anchor[&name], alpha)?;
                }
            }
        }
        Ok(())
    }
}

/// Trains stage `m >= 1` of `method` in place and returns its log.
pub fn train_stage(
    state: &mut ModelState,
    bench: &Benchmark,
    m: usize,
    plan: &TrainPlan,
    method: &MethodConfig,
) -> Result<TrainLog> {
    method.validate()?;
    if m == 0 {
        return Err(Error::Contract("stage 0 is pretraining; use pretrain".into()));
    }
    let md = bench.modality(m)?;
    let mut rng = seeded_rng(derive_seed(plan.seed, &format!("batches.{m}")));
    let name = method.method.as_str();
    let cfg = &plan.stage;
    match (state, method.method.path_options()) {
        (ModelState::Paths { core, stack }, Some(options)) => {
            core.verify_frozen()?;
            stack.verify_frozen()?;
            let expand_seed = derive_seed(plan.seed, "expand");
            stack.expand_modality(m, options, expand_seed)?;
            let log = {
                let mut t = PathTrainee { core, stack, m };
                train_loop(&mut t, md, m, name, cfg, &mut rng)?
            };
            stack.freeze_path(m)?;
            core.verify_frozen()?;
            stack.verify_frozen()?;
            Ok(log)
        }
        (ModelState::Plain { core, queries }, None) => {
            if queries.len() != m {
                return Err(Error::Contract(format!("expected {m} query banks before stage {m}, found {}", queries.len())));
            }
            let mut q = QueryBank::warm_start(m, &queries[0]);
            let log = if method.method == Method::FrozenControl {
                core.verify_frozen()?;
                let mut t = QueryTrainee { core, query: &mut q };
                let log = train_loop(&mut t, md, m, name, cfg, &mut rng)?;
                core.verify_frozen()?;
                log
            } else {
                let anchor: BTreeMap<String, Tensor> = core.params().map(|(n, t)| (n, t.clone())).collect();
                let (lambda, ensemble_alpha) = match method.method {
                    Method::ContinualFt => (0.0, None),
                    Method::WiseFt => (0.0, Some(method.alpha)),
                    Method::L2regWe => (method.lambda, Some(method.alpha)),
                    _ => unreachable!("plain-state method"),
                };
                let mut t = BaselineTrainee {
                    core,
                    query: &mut q,
                    anchor,
                    lambda,
                    ensemble_alpha,
                    inner_epoch: cfg.inner_epoch(),
                };
                train_loop(&mut t, md, m, name, cfg, &mut rng)?
            };
            q.freeze();
            queries.push(q);
            Ok(log)
        }
        _ => Err(Error::Contract(format!("model state does not fit method {name}"))),
    }
}

/// Initial state of `method` on top of the shared pretrained model.
pub fn initial_state(pre: &Pretrained, plan: &TrainPlan, method: Method) -> Result<ModelState> {
    Ok(if method.path_options().is_some() {
        ModelState::Paths {
            core: pre.core.clone(),
            stack: AdapterStack::new(plan.backbone.clone(), plan.ana.clone(), pre.query0.clone())?,
        }
    } else if method.trains_core() {
        ModelState::Plain { core: pre.core.thawed(), queries: vec![pre.query0.clone()] }
    } else {
        ModelState::Plain { core: pre.core.clone(), queries: vec![pre.query0.clone()] }
    })
}

/// Runs stages `1..M` from a shared pretrained state. `on_stage` sees the
/// state and scores after every stage (including stage 0), e.g. to checkpoint.
pub fn run_sequence_from(
    bench: &Benchmark,
    pre: &Pretrained,
    plan: &TrainPlan,
    method: MethodConfig,
    on_stage: &mut dyn FnMut(usize, &ModelState, &ScoreMatrix) -> Result<()>,
) -> Result<SequenceOutcome> {
    plan.validate()?;
    plan.check_bench(bench)?;
    method.validate()?;
    let mut state = initial_state(pre, plan, method.method)?;
    let mut scores = ScoreMatrix::new(score_layout(bench));
    let mut probes = Vec::new();
    let mut logs = vec![pre.log.clone()];

    fill_row(&mut scores, bench, &state)?;
    probes.push(state.logits(0, &probe_batch(bench, 0, plan.probe_rows)?)?);
    on_stage(0, &state, &scores)?;

    for m in 1..bench.modalities.len() {
        let mut log = train_stage(&mut state, bench, m, plan, &method)?;
        fill_row(&mut scores, bench, &state)?;
        log.eval_scores = scores.scores[m][m].iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        log::info!("{} stage {m}: scores {:?}", method.method, log.eval_scores);
        probes.push(state.logits(m, &probe_batch(bench, m, plan.probe_rows)?)?);
        logs.push(log);
        on_stage(m, &state, &scores)?;
    }
    Ok(SequenceOutcome { method, scores, logs, probes, state })
}

/// Pretrains, then runs the whole modality sequence for one method.
pub fn run_sequence(bench: &Benchmark, plan: &TrainPlan, method: MethodConfig) -> Result<SequenceOutcome> {
    let pre = pretrain_for(bench, plan)?;
    run_sequence_from(bench, &pre, plan, method, &mut |_, _, _| Ok(()))
}
