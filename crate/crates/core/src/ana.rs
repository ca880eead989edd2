//! Adapter-in-adapter paths.
//!
//! Modality 0 is served by the bare frozen core. Every later modality `m`
//! owns a [`ModalityPath`]: at each site a low-rank [`UniAdapter`], one
//! [`InAdapter`] per earlier adapted modality `1..m` (a square map spliced
//! into that modality's frozen adapter), and a [`GatingModule`] that mixes
//! the `m` resulting paths per token. Once trained, a path is frozen and
//! only ever read again.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{hash_named, Binder, BackboneConfig, FrozenCore, QueryBank, SiteAdapter, SiteId};
use crate::tensor::{derive_seed, init_with_rng, seeded_rng, Init, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InAdapterInit {
    #[default]
    Identity,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnaConfig {
    pub rank: usize,
    /// Std of the down-projection init; the up-projection starts at zero.
    pub down_std: f32,
    pub in_adapter_init: InAdapterInit,
}

impl Default for AnaConfig {
    fn default() -> Self {
        Self { rank: 4, down_std: 0.02, in_adapter_init: InAdapterInit::Identity }
    }
}

impl AnaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.down_std >= 0.0 && self.down_std.is_finite()) {
            return Err(Error::Config("down_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which parts of a path are built. The full method enables everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathOptions {
    /// Route through earlier modalities' adapters at all.
    pub cross_paths: bool,
    /// Splice a trainable in-adapter into each earlier adapter; when off the
    /// frozen adapter is reused verbatim.
    pub use_in_adapter: bool,
    /// Mix paths with a softmax gate; when off every path has weight 1.
    pub use_gating: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self { cross_paths: true, use_in_adapter: true, use_gating: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniAdapter {
    pub modality: usize,
    pub site: SiteId,
    /// `[d_model, r]`
    pub down: Tensor,
    /// `[r, d_model]`
    pub up: Tensor,
    pub frozen: bool,
}

impl UniAdapter {
    pub fn new(modality: usize, site: SiteId, down: Tensor, up: Tensor) -> Result<Self> {
        let (sd, su) = (down.shape(), up.shape());
        if sd.len() != 2 || su.len() != 2 || sd[1] != su[0] || sd[0] != su[1] {
            return Err(crate::TensorError::ShapeMismatch { op: "UniAdapter", lhs: sd.to_vec(), rhs: su.to_vec() }.into());
        }
        Ok(Self { modality, site, down, up, frozen: false })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    fn name(&self, part: &str) -> String {
        format!("path.{}.{}.{part}", self.modality, self.site)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InAdapter {
    pub owner: usize,
    pub target: usize,
    pub site: SiteId,
    /// `[r, r]`, no bias.
    pub weight: Tensor,
}

impl InAdapter {
    fn name(&self) -> String {
        format!("path.{}.{}.in.{}", self.owner, self.site, self.target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingModule {
    pub modality: usize,
    pub site: SiteId,
    /// `[d_model, n_paths]`; column `k < m-1` weights the cross path into
    /// modality `k+1`, the last column weights the uni path.
    pub weight: Tensor,
}

impl GatingModule {
    pub fn n_paths(&self) -> usize {
        self.weight.shape()[1]
    }

    fn name(&self) -> String {
        format!("path.{}.{}.gate", self.modality, self.site)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitePath {
    pub uni: UniAdapter,
    pub ins: Vec<InAdapter>,
    pub gate: Option<GatingModule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPath {
    pub modality: usize,
    pub options: PathOptions,
    pub sites: BTreeMap<SiteId, SitePath>,
    pub query: QueryBank,
    frozen_hash: Option<String>,
}

impl ModalityPath {
    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    /// Names of earlier modalities this path routes through.
    pub fn cross_targets(&self) -> Vec<usize> {
        if self.options.cross_paths {
            (1..self.modality).collect()
        } else {
            Vec::new()
        }
    }

    /// Every tensor of the path (including its query bank), name-ordered.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for sp in self.sites.values() {
            out.push((sp.uni.name("down"), &sp.uni.down));
            out.push((sp.uni.name("up"), &sp.uni.up));
            for ia in &sp.ins {
                out.push((ia.name(), &ia.weight));
            }
            if let Some(g) = &sp.gate {
                out.push((g.name(), &g.weight));
            }
        }
        out.push((self.query.param_name(), &self.query.tokens));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable view for the optimizer; refused once frozen.
    pub fn named_tensors_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        if self.is_frozen() {
            return Err(Error::Contract(format!("path {} is frozen", self.modality)));
        }
        let mut out = Vec::new();
        for sp in self.sites.values_mut() {
            let (dn, un) = (sp.uni.name("down"), sp.uni.name("up"));
            out.push((dn, &mut sp.uni.down));
            out.push((un, &mut sp.uni.up));
            for ia in &mut sp.ins {
                out.push((ia.name(), &mut ia.weight));
            }
            if let Some(g) = &mut sp.gate {
                out.push((g.name(), &mut g.weight));
            }
        }
        out.push((self.query.param_name(), &mut self.query.tokens));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn weight_hash(&self) -> String {
        let named = self.named_tensors();
        hash_named(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            Some(h) if *h == self.weight_hash() => Ok(()),
            Some(_) => Err(Error::FrozenTampered(format!("path {}", self.modality))),
            None => Err(Error::Contract(format!("path {} has not been frozen", self.modality))),
        }
    }

    fn freeze(&mut self) {
        for sp in self.sites.values_mut() {
            sp.uni.frozen = true;
        }
        self.query.freeze();
        self.frozen_hash = Some(self.weight_hash());
    }
}

/// `A(x) = F_u(F_d(x))` on the tape.
pub fn uni_forward<'t>(b: &Binder<'t>, a: &UniAdapter, x: Var<'t>) -> Result<Var<'t>> {
    let down = b.bind(&a.name("down"), &a.down);
    let up = b.bind(&a.name("up"), &a.up);
    Ok(x.matmul(&down)?.matmul(&up)?)
}

/// `F_u^i(W_in(F_d^i(x)))`: the frozen adapter `target` re-routed through `in_ad`.
pub fn cross_forward<'t>(b: &Binder<'t>, in_ad: &InAdapter, target: &UniAdapter, x: Var<'t>) -> Result<Var<'t>> {
    if !target.frozen {
        return Err(Error::Contract(format!(
            "in-adapter {} targets unfrozen adapter of modality {}",
            in_ad.name(),
            target.modality
        )));
    }
    if in_ad.weight.shape() != [target.rank(), target.rank()] {
        return Err(crate::TensorError::ShapeMismatch {
            op: "cross_forward",
            lhs: in_ad.weight.shape().to_vec(),
            rhs: vec![target.rank(), target.rank()],
        }
        .into());
    }
    let down = b.bind(&target.name("down"), &target.down);
    let up = b.bind(&target.name("up"), &target.up);
    let w = b.bind(&in_ad.name(), &in_ad.weight);
    Ok(x.matmul(&down)?.matmul(&w)?.matmul(&up)?)
}

/// Per-token softmax over the path logits `x · W_g`, shape `[..., n_paths]`.
pub fn gate_weights<'t>(b: &Binder<'t>, g: &GatingModule, x: Var<'t>) -> Result<Var<'t>> {
    let w = b.bind(&g.name(), &g.weight);
    let logits = x.matmul(&w)?;
    let axis = logits.shape().len() - 1;
    Ok(logits.softmax(axis)?)
}

/// Site output `Q(x) + Σ_k w_k ⊙ P_k(x)` over the cross paths and the uni path.
///
/// `history[k]` must be the path of modality `k + 1`.
pub fn site_forward<'t>(
    b: &Binder<'t>,
    site: SiteId,
    x: Var<'t>,
    host: Var<'t>,
    path: &ModalityPath,
    history: &[ModalityPath],
) -> Result<Var<'t>> {
    let sp = path.sites.get(&site).ok_or_else(|| Error::SiteMismatch {
        expected: path.sites.keys().map(ToString::to_string).collect(),
        got: vec![site.to_string()],
    })?;
    let mut contributions = Vec::new();
    for target in path.cross_targets() {
        let frozen = history
            .get(target - 1)
            .and_then(|p| p.sites.get(&site))
            .ok_or(Error::UnknownModality(target))?;
        let c = if path.options.use_in_adapter {
            let ia = sp
                .ins
                .iter()
                .find(|ia| ia.target == target)
                .ok_or_else(|| Error::Contract(format!("path {} lacks in-adapter into {target}", path.modality)))?;
            cross_forward(b, ia, &frozen.uni, x)?
        } else {
            if !frozen.uni.frozen {
                return Err(Error::Contract(format!("adapter of modality {target} is not frozen")));
            }
            uni_forward(b, &frozen.uni, x)?
        };
        contributions.push(c);
    }
    contributions.push(uni_forward(b, &sp.uni, x)?);

    let mut out = host;
    match &sp.gate {
        Some(g) => {
            if g.n_paths() != contributions.len() {
                return Err(Error::Contract(format!(
                    "gate of path {} has {} columns for {} paths",
                    path.modality,
                    g.n_paths(),
                    contributions.len()
                )));
            }
            let w = gate_weights(b, g, x)?;
            for (k, c) in contributions.iter().enumerate() {
                out = out.add(&c.row_scale(&w.select_last(k)?)?)?;
            }
        }
        None => {
            for c in &contributions {
                out = out.add(c)?;
            }
        }
    }
    Ok(out)
}

/// The exact inference setup of one modality: its query bank plus, for
/// `m >= 1`, its own path and the frozen adapters that path routes through.
#[derive(Clone, Copy, Debug)]
pub struct InferenceConfig<'a> {
    pub modality: usize,
    pub query: &'a QueryBank,
    path: Option<&'a ModalityPath>,
    history: &'a [ModalityPath],
}

impl<'a> InferenceConfig<'a> {
    pub fn path(&self) -> Option<&'a ModalityPath> {
        self.path
    }

    /// Paths visible to this configuration (earlier modalities only).
    pub fn history(&self) -> &'a [ModalityPath] {
        self.history
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, core: &FrozenCore, feats: Var<'t>) -> Result<Var<'t>> {
        let adapters: Option<&dyn SiteAdapter> = if self.path.is_some() { Some(self) } else { None };
        core.forward(b, self.query, feats, adapters)
    }

    /// Logits `[B, C]` for features `[B, T, d_enc]`.
    pub fn logits(&self, core: &FrozenCore, feats: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Binder::inference(&tape);
        let f = tape.constant(feats);
        Ok(self.forward(&b, core, f)?.to_tensor())
    }
}

impl SiteAdapter for InferenceConfig<'_> {
    fn sites(&self) -> Vec<SiteId> {
        self.path.map(|p| p.sites.keys().copied().collect()).unwrap_or_default()
    }

    fn apply<'t>(&self, b: &Binder<'t>, site: SiteId, x: Var<'t>, host: Var<'t>) -> Result<Var<'t>> {
        match self.path {
            Some(p) => site_forward(b, site, x, host, p, self.history),
            None => Ok(host),
        }
    }
}

/// All modality paths grown so far, plus the modality-0 query bank.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub backbone: BackboneConfig,
    pub ana: AnaConfig,
    pub query0: QueryBank,
    /// `paths[k]` belongs to modality `k + 1`.
    paths: Vec<ModalityPath>,
}

impl AdapterStack {
    pub fn new(backbone: BackboneConfig, ana: AnaConfig, query0: QueryBank) -> Result<Self> {
        backbone.validate()?;
        ana.validate()?;
        if query0.modality != 0 {
            return Err(Error::Contract("base query bank must belong to modality 0".into()));
        }
        Ok(Self { backbone, ana, query0, paths: Vec::new() })
    }

    pub fn paths(&self) -> &[ModalityPath] {
        &self.paths
    }

    pub fn path(&self, m: usize) -> Result<&ModalityPath> {
        m.checked_sub(1).and_then(|k| self.paths.get(k)).ok_or(Error::UnknownModality(m))
    }

    pub fn path_mut(&mut self, m: usize) -> Result<&mut ModalityPath> {
        m.checked_sub(1).and_then(|k| self.paths.get_mut(k)).ok_or(Error::UnknownModality(m))
    }

    /// Highest modality served (0 before any expansion).
    pub fn current(&self) -> usize {
        self.paths.len()
    }

    /// Grows the path for modality `m = current() + 1` with neutral init:
    /// `F_d ~ N(0, σ)`, `F_u = 0`, in-adapters identity (or zero), gate zero,
    /// and `q_m` copied from `q_0`.
    pub fn expand_modality(&mut self, m: usize, options: PathOptions, seed: u64) -> Result<&ModalityPath> {
        if m != self.paths.len() + 1 {
            return Err(Error::Contract(format!(
                "next modality to expand is {}, got {m}",
                self.paths.len() + 1
            )));
        }
        if let Some(p) = self.paths.iter().find(|p| !p.is_frozen()) {
            return Err(Error::Contract(format!("path {} must be frozen before expanding", p.modality)));
        }
        let d = self.backbone.d_model;
        let r = self.ana.rank;
        let mut rng = seeded_rng(derive_seed(seed, &format!("expand.{m}")));
        let mut sites = BTreeMap::new();
        let targets: Vec<usize> = if options.cross_paths { (1..m).collect() } else { Vec::new() };
        for site in self.backbone.sites() {
            let down = init_with_rng(&[d, r], Init::Normal { std: self.ana.down_std }, &mut rng)?;
            let up = Tensor::zeros(&[r, d])?;
            let uni = UniAdapter::new(m, site, down, up)?;
            let ins = if options.use_in_adapter {
                targets
                    .iter()
                    .map(|&target| {
                        let init = match self.ana.in_adapter_init {
                            InAdapterInit::Identity => Init::Identity,
                            InAdapterInit::Zeros => Init::Zeros,
                        };
                        Ok(InAdapter { owner: m, target, site, weight: init_with_rng(&[r, r], init, &mut rng)? })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let n_paths = targets.len() + 1;
            let gate = if options.use_gating {
                Some(GatingModule { modality: m, site, weight: Tensor::zeros(&[d, n_paths])? })
            } else {
                None
            };
            sites.insert(site, SitePath { uni, ins, gate });
        }
        let path = ModalityPath {
            modality: m,
            options,
            sites,
            query: QueryBank::warm_start(m, &self.query0),
            frozen_hash: None,
        };
        self.paths.push(path);
        Ok(self.paths.last().expect("just pushed"))
    }

    /// Marks every tensor of path `m` immutable and records its hash.
    pub fn freeze_path(&mut self, m: usize) -> Result<()> {
        self.path_mut(m)?.freeze();
        Ok(())
    }

    /// Inference configuration of modality `i`; later modalities' in-adapters
    /// are not reachable from it.
    pub fn switch_path(&self, i: usize) -> Result<InferenceConfig<'_>> {
        if i == 0 {
            return Ok(InferenceConfig { modality: 0, query: &self.query0, path: None, history: &[] });
        }
        let path = self.path(i)?;
        Ok(InferenceConfig { modality: i, query: &path.query, path: Some(path), history: &self.paths[..i - 1] })
    }

    /// Re-hashes every frozen path.
    pub fn verify_frozen(&self) -> Result<()> {
        self.paths.iter().filter(|p| p.is_frozen()).try_for_each(ModalityPath::verify_frozen)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![(self.query0.param_name(), &self.query0.tokens)];
        for p in &self.paths {
            out.extend(p.named_tensors());
        }
        out
    }

    /// Replaces path tensors by name (checkpoint load). Shapes must match.
    pub(crate) fn load_tensor(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let mut slot: Option<&mut Tensor> = None;
        if name == self.query0.param_name() {
            slot = Some(&mut self.query0.tokens);
        } else {
            for p in &mut self.paths {
                if p.frozen_hash.is_some() {
                    // loading happens before freezing is re-applied
                    return Err(Error::Contract("load_tensor on a frozen stack".into()));
                }
                if let Some((_, t)) = p.named_tensors_mut()?.into_iter().find(|(n, _)| n == name) {
                    slot = Some(t);
                    break;
                }
            }
        }
        let t = slot.ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if t.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.shape(),
                t.shape()
            )));
        }
        t.assign(value.data())?;
        Ok(())
    }

    /// Freezes paths `1..=m` in order without the expansion checks (checkpoint load).
    pub(crate) fn refreeze(&mut self, upto: usize) -> Result<()> {
        for m in 1..=upto {
            self.freeze_path(m)?;
        }
        Ok(())
    }

    /// Builds the path skeletons described by `options` (without freezing).
    pub(crate) fn skeleton(&mut self, options: &[PathOptions]) -> Result<()> {
        for (k, o) in options.iter().enumerate() {
            let m = k + 1;
            self.expand_modality(m, *o, 0)?;
            // expansion requires earlier paths frozen; mark temporarily
            if k + 1 < options.len() {
                self.path_mut(m)?.freeze();
            }
        }
        for p in &mut self.paths {
            p.frozen_hash = None;
            for sp in p.sites.values_mut() {
                sp.uni.frozen = false;
            }
            p.query.trainable = true;
        }
        Ok(())
    }
}

/// Closed-form trainable-parameter count for the path of modality `m >= 1`:
/// `P · (2dr + (m−1)r² + dm) + n_queries·d` with `P` sites.
pub fn trainable_param_count(config: &BackboneConfig, rank: usize, m: usize) -> usize {
    let p = config.sites().len();
    let d = config.d_model;
    p * (2 * d * rank + m.saturating_sub(1) * rank * rank + d * m) + config.n_queries * d
}
