//! The shared, frozen-after-pretraining interface.
//!
//! A [`ModalityEncoder`] turns a raw sample into a feature sequence. The
//! [`FrozenCore`] is a small query transformer: learnable query tokens pass
//! through pre-norm self-attention, cross-attention onto the encoder
//! features, and an FFN, then a classification head reads the mean-pooled
//! query states. Each modality owns its [`QueryBank`].
//!
//! Sublayer outputs are the adapter sites. At a site, the host computation
//! `Q(x)` is either the output projection of an attention block (input `x`
//! is the concatenated heads) or the whole FFN (input `x` is the normed
//! residual stream). Either way `x` has width `d_model`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{init_with_rng, seeded_rng, Init, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    SelfAttnOut,
    CrossAttnOut,
    FfnOut,
}

impl SiteKind {
    pub const ALL: [SiteKind; 3] = [SiteKind::SelfAttnOut, SiteKind::CrossAttnOut, SiteKind::FfnOut];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::SelfAttnOut => "self_attn_out",
            SiteKind::CrossAttnOut => "cross_attn_out",
            SiteKind::FfnOut => "ffn_out",
        }
    }
}

/// One adapter site: a sublayer kind in a given layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Query tokens per modality bank. The last token plays the role of the
    /// modality instruction embedding.
    pub n_queries: usize,
    pub d_enc: usize,
    pub n_classes: usize,
    pub ffn_mult: usize,
    /// Sublayer kinds that host adapters, replicated in every layer.
    pub adapter_sites: Vec<SiteKind>,
    pub ln_eps: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            n_queries: 4,
            d_enc: 32,
            n_classes: 8,
            ffn_mult: 2,
            adapter_sites: SiteKind::ALL.to_vec(),
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.n_queries == 0 || self.d_enc == 0 || self.ffn_mult == 0 {
            return bad("n_queries, d_enc and ffn_mult must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.adapter_sites.is_empty() {
            return bad("adapter_sites must be non-empty");
        }
        let unique: BTreeSet<_> = self.adapter_sites.iter().collect();
        if unique.len() != self.adapter_sites.len() {
            return bad("adapter_sites contains duplicates");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }

    /// Every adapter site, ordered by layer then sublayer.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut kinds = self.adapter_sites.clone();
        kinds.sort();
        (0..self.n_layers)
            .flat_map(|layer| kinds.iter().map(move |&kind| SiteId { layer, kind }))
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Sin,
    Softsign,
    Gelu,
    LeakyRelu,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 5] = [
        Nonlinearity::Tanh,
        Nonlinearity::Sin,
        Nonlinearity::Softsign,
        Nonlinearity::Gelu,
        Nonlinearity::LeakyRelu,
    ];

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sin => x.sin(),
            Nonlinearity::Softsign => x / (1.0 + x.abs()),
            Nonlinearity::Gelu => crate::tensor::gelu(x),
            Nonlinearity::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
        }
    }
}

/// Frozen random featurizer: `feats = φ(raw · W)` reshaped to `[T, d_enc]`.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    modality: usize,
    seq_len: usize,
    d_enc: usize,
    nonlinearity: Nonlinearity,
    seed: u64,
    weights: Tensor,
}

impl ModalityEncoder {
    /// `W ~ N(0, gain^2 / d_raw)`, shape `[d_raw, seq_len * d_enc]`, no bias.
    pub fn new(
        modality: usize,
        d_raw: usize,
        seq_len: usize,
        d_enc: usize,
        nonlinearity: Nonlinearity,
        gain: f32,
        seed: u64,
    ) -> Result<Self> {
        let std = gain / (d_raw as f32).sqrt();
        let weights = init_with_rng(
            &[d_raw, seq_len * d_enc],
            Init::Normal { std },
            &mut seeded_rng(seed),
        )?;
        Ok(Self { modality, seq_len, d_enc, nonlinearity, seed, weights })
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn d_raw(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    fn encode_into(&self, raw: &[f32], out: &mut Vec<f32>) -> Result<()> {
        if raw.len() != self.d_raw() {
            return Err(crate::TensorError::ShapeMismatch {
                op: "encode",
                lhs: vec![raw.len()],
                rhs: vec![self.d_raw()],
            }
            .into());
        }
        let width = self.seq_len * self.d_enc;
        let w = self.weights.data();
        let start = out.len();
        out.resize(start + width, 0.0);
        let dst = &mut out[start..];
        for (i, &r) in raw.iter().enumerate() {
            let row = &w[i * width..(i + 1) * width];
            for (d, &wv) in dst.iter_mut().zip(row) {
                *d += r * wv;
            }
        }
        dst.iter_mut().for_each(|v| *v = self.nonlinearity.apply(*v));
        Ok(())
    }

    /// Features `[T, d_enc]` for one raw vector of length `d_raw`.
    pub fn encode(&self, raw: &Tensor) -> Result<Tensor> {
        let mut out = Vec::new();
        self.encode_into(raw.data(), &mut out)?;
        Ok(Tensor::new(&[self.seq_len, self.d_enc], out)?)
    }

    /// Features `[B, T, d_enc]` for a batch of raw vectors.
    pub fn encode_batch(&self, raws: &[&[f32]]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(raws.len() * self.seq_len * self.d_enc);
        for raw in raws {
            self.encode_into(raw, &mut out)?;
        }
        Ok(Tensor::new(&[raws.len(), self.seq_len, self.d_enc], out)?)
    }
}

/// Learnable query tokens `[n_queries, d_model]` owned by one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    pub modality: usize,
    pub tokens: Tensor,
    pub trainable: bool,
}

impl QueryBank {
    pub fn new(modality: usize, config: &BackboneConfig, seed: u64) -> Result<Self> {
        let tokens = init_with_rng(
            &[config.n_queries, config.d_model],
            Init::Normal { std: 1.0 },
            &mut seeded_rng(seed),
        )?;
        Ok(Self { modality, tokens, trainable: true })
    }

    /// A trainable copy of `other` for a new modality.
    pub fn warm_start(modality: usize, other: &QueryBank) -> Self {
        Self { modality, tokens: other.tokens.clone(), trainable: true }
    }

    pub fn param_name(&self) -> String {
        format!("query.{}", self.modality)
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
    }
}

/// Maps named tensors onto a tape, marking the trainable ones as gradient
/// leaves. Each name is bound at most once per tape.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: BTreeSet<String>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Binder<'t> {
    /// Nothing trainable: every tensor enters as a constant.
    pub fn inference(tape: &'t Tape) -> Self {
        Self::with_trainable(tape, std::iter::empty::<String>())
    }

    pub fn with_trainable<I, S>(tape: &'t Tape, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tape,
            trainable: names.into_iter().map(Into::into).collect(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn bind(&self, name: &str, t: &Tensor) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let v = if self.trainable.contains(name) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Trainable tensors that were actually used by the forward pass.
    pub fn trainable_vars(&self) -> Vec<(String, Var<'t>)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.trainable.contains(*k))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// Hook through which adapter paths attach to the backbone's sites.
pub trait SiteAdapter {
    fn sites(&self) -> Vec<SiteId>;

    /// Returns the site output given the site input `x` and the frozen host
    /// output `host = Q(x)`.
    fn apply<'t>(&self, b: &Binder<'t>, site: SiteId, x: Var<'t>, host: Var<'t>) -> Result<Var<'t>>;
}

/// Query-transformer weights plus the classification head.
#[derive(Clone, Debug)]
pub struct FrozenCore {
    config: BackboneConfig,
    params: BTreeMap<String, Tensor>,
    pretrain_seed: u64,
    frozen_hash: Option<String>,
}

impl FrozenCore {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let d = config.d_model;
        let e = config.d_enc;
        let f = d * config.ffn_mult;
        let mut params = BTreeMap::new();
        let mut lin = |name: String, fan_in: usize, fan_out: usize, rng: &mut _| -> Result<()> {
            let std = 1.0 / (fan_in as f32).sqrt();
            let w = init_with_rng(&[fan_in, fan_out], Init::Normal { std }, rng)?;
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out])?);
            Ok(())
        };
        for l in 0..config.n_layers {
            for (blk, kv_in) in [("self", d), ("cross", e)] {
                lin(format!("l{l}.{blk}.q"), d, d, &mut rng)?;
                lin(format!("l{l}.{blk}.k"), kv_in, d, &mut rng)?;
                lin(format!("l{l}.{blk}.v"), kv_in, d, &mut rng)?;
                lin(format!("l{l}.{blk}.o"), d, d, &mut rng)?;
            }
            lin(format!("l{l}.ffn.up"), d, f, &mut rng)?;
            lin(format!("l{l}.ffn.down"), f, d, &mut rng)?;
        }
        lin("head".into(), d, config.n_classes, &mut rng)?;
        let mut norms = Vec::new();
        for l in 0..config.n_layers {
            for n in 1..=3 {
                norms.push(format!("l{l}.ln{n}"));
            }
        }
        norms.push("ln_f".into());
        for n in norms {
            params.insert(format!("{n}.g"), Tensor::full(&[d], 1.0)?);
            params.insert(format!("{n}.b"), Tensor::zeros(&[d])?);
        }
        Ok(Self { config, params, pretrain_seed: seed, frozen_hash: None })
    }

    /// Rebuilds a core from stored tensors (checkpoint load).
    pub fn from_params(config: BackboneConfig, pretrain_seed: u64, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::new(config.clone(), pretrain_seed)?;
        for (name, t) in &template.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "core tensor {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing core tensor {name}"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint("unexpected extra core tensors".into()));
        }
        Ok(Self { config, params, pretrain_seed, frozen_hash: None })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn pretrain_seed(&self) -> u64 {
        self.pretrain_seed
    }

    /// Tensor names, prefixed with `core.` as they appear in binders and checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().map(|k| format!("core.{k}")).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.params.iter().map(|(k, v)| (format!("core.{k}"), v))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name.strip_prefix("core.").unwrap_or(name))
    }

    /// Mutable access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<impl Iterator<Item = (String, &mut Tensor)>> {
        if self.frozen_hash.is_some() {
            return Err(Error::Contract("frozen core cannot be mutated".into()));
        }
        Ok(self.params.iter_mut().map(|(k, v)| (format!("core.{k}"), v)))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over `(name, tensor hash)` pairs in name order.
    pub fn weight_hash(&self) -> String {
        hash_named(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.weight_hash());
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    /// A mutable copy with the freeze record dropped (for full fine-tuning baselines).
    pub fn thawed(&self) -> FrozenCore {
        Self { frozen_hash: None, ..self.clone() }
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    /// Re-hashes the weights and compares against the hash recorded at freeze time.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            Some(h) if *h == self.weight_hash() => Ok(()),
            Some(_) => Err(Error::FrozenTampered("core".into())),
            None => Err(Error::Contract("core has not been frozen".into())),
        }
    }

    fn p<'t>(&self, b: &Binder<'t>, name: &str) -> Result<Var<'t>> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("core has no tensor {name}")))?;
        Ok(b.bind(&format!("core.{name}"), t))
    }

    fn linear<'t>(&self, b: &Binder<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.p(b, &format!("{name}.w"))?;
        let bias = self.p(b, &format!("{name}.b"))?;
        Ok(x.matmul(&w)?.add(&bias)?)
    }

    fn norm<'t>(&self, b: &Binder<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let g = self.p(b, &format!("{name}.g"))?;
        let bias = self.p(b, &format!("{name}.b"))?;
        Ok(x.layer_norm(&g, &bias, self.config.ln_eps)?)
    }

    /// Multi-head attention of `x [B,Q,d]` over `kv [B,T,*]`, returning the
    /// concatenated heads `[B,Q,d]` (before the output projection). No mask.
    fn attention<'t>(&self, b: &Binder<'t>, blk: &str, x: Var<'t>, kv: Var<'t>) -> Result<Var<'t>> {
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let xs = x.shape();
        let ks = kv.shape();
        let (bsz, nq, nk) = (xs[0], xs[1], ks[1]);
        let split = |v: Var<'t>, n: usize| -> Result<Var<'t>> {
            Ok(v.reshape(&[bsz, n, h, dh])?.permute(&[0, 2, 1, 3])?)
        };
        let q = split(self.linear(b, &format!("{blk}.q"), x)?, nq)?;
        let k = split(self.linear(b, &format!("{blk}.k"), kv)?, nk)?;
        let v = split(self.linear(b, &format!("{blk}.v"), kv)?, nk)?;
        let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dh as f32).sqrt())?;
        let attn = scores.softmax(3)?;
        let out = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?;
        Ok(out.reshape(&[bsz, nq, self.config.d_model])?)
    }

    /// Logits `[B, C]` for features `[B, T, d_enc]`.
    ///
    /// With `adapters = None` every site is the plain host computation.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t>,
        queries: &QueryBank,
        feats: Var<'t>,
        adapters: Option<&dyn SiteAdapter>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        if let Some(a) = adapters {
            let expected: Vec<String> = cfg.sites().iter().map(ToString::to_string).collect();
            let mut got: Vec<String> = a.sites().iter().map(ToString::to_string).collect();
            got.sort();
            let mut exp_sorted = expected.clone();
            exp_sorted.sort();
            if got != exp_sorted {
                return Err(Error::SiteMismatch { expected, got });
            }
        }
        let fs = feats.shape();
        if fs.len() != 3 || fs[2] != cfg.d_enc {
            return Err(crate::TensorError::ShapeMismatch {
                op: "forward(feats)",
                lhs: fs,
                rhs: vec![0, 0, cfg.d_enc],
            }
            .into());
        }
        if queries.tokens.shape() != [cfg.n_queries, cfg.d_model] {
            return Err(crate::TensorError::ShapeMismatch {
                op: "forward(queries)",
                lhs: queries.tokens.shape().to_vec(),
                rhs: vec![cfg.n_queries, cfg.d_model],
            }
            .into());
        }
        let bsz = fs[0];
        let site_out = |layer: usize, kind: SiteKind, x: Var<'t>, host: Var<'t>| -> Result<Var<'t>> {
            match adapters {
                Some(a) if cfg.adapter_sites.contains(&kind) => a.apply(b, SiteId { layer, kind }, x, host),
                _ => Ok(host),
            }
        };

        let q = b.bind(&queries.param_name(), &queries.tokens);
        let mut h = q.broadcast_leading(&[bsz])?;
        for l in 0..cfg.n_layers {
            let a = self.norm(b, &format!("l{l}.ln1"), h)?;
            let heads = self.attention(b, &format!("l{l}.self"), a, a)?;
            let host = self.linear(b, &format!("l{l}.self.o"), heads)?;
            h = h.add(&site_out(l, SiteKind::SelfAttnOut, heads, host)?)?;

            let a = self.norm(b, &format!("l{l}.ln2"), h)?;
            let heads = self.attention(b, &format!("l{l}.cross"), a, feats)?;
            let host = self.linear(b, &format!("l{l}.cross.o"), heads)?;
            h = h.add(&site_out(l, SiteKind::CrossAttnOut, heads, host)?)?;

            let a = self.norm(b, &format!("l{l}.ln3"), h)?;
            let up = self.linear(b, &format!("l{l}.ffn.up"), a)?.gelu()?;
            let host = self.linear(b, &format!("l{l}.ffn.down"), up)?;
            h = h.add(&site_out(l, SiteKind::FfnOut, a, host)?)?;
        }
        let z = self.norm(b, "ln_f", h)?;
        let pooled = z.mean_axis(1)?;
        self.linear(b, "head", pooled)
    }

    /// Forward without gradients, returning plain logits `[B, C]`.
    pub fn logits(&self, queries: &QueryBank, feats: &Tensor, adapters: Option<&dyn SiteAdapter>) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Binder::inference(&tape);
        let f = tape.constant(feats);
        Ok(self.forward(&b, queries, f, adapters)?.to_tensor())
    }

    /// Single-sample convenience: features `[T, d_enc]` to logits `[C]`.
    pub fn logits_one(&self, queries: &QueryBank, feats: &Tensor, adapters: Option<&dyn SiteAdapter>) -> Result<Tensor> {
        let s = feats.shape();
        if s.len() != 2 {
            return Err(crate::TensorError::ShapeMismatch { op: "logits_one", lhs: s.to_vec(), rhs: vec![0, self.config.d_enc] }.into());
        }
        let batched = feats.reshape(&[1, s[0], s[1]])?;
        Ok(self.logits(queries, &batched, adapters)?.reshape(&[self.config.n_classes])?)
    }
}

pub(crate) fn hash_named<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update(t.content_hash());
    }
    hex::encode(h.finalize())
}

/// Trains the core and the modality-0 query bank on modality 0, then freezes both.
pub fn pretrain_stage0(
    core: FrozenCore,
    query: QueryBank,
    bench: &crate::bench::Benchmark,
    cfg: &crate::trainer::StageTrainConfig,
) -> Result<crate::trainer::Pretrained> {
    crate::trainer::pretrain(core, query, bench, cfg)
}
