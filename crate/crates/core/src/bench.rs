//! Seeded synthetic multi-modality benchmark.
//!
//! Each modality draws raw vectors `x ~ μ + s·z` (Gaussian or Student-t
//! `z`), labels them with `argmax(x · R)` for a fixed random readout `R`,
//! adds observation noise, and featurizes through its own frozen encoder.
//! In-domain datasets share the modality's distribution; out-of-domain
//! datasets keep the label rule but widen the input distribution. Every
//! split is generated once and never resampled.

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ana::InferenceConfig;
use crate::backbone::{FrozenCore, ModalityEncoder, Nonlinearity, QueryBank};
use crate::tensor::{derive_seed, seeded_rng, SeededRng, Tensor};
use crate::{Error, Result};

const MAX_GENERATION_PASSES: usize = 100;
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    OutOfDomain,
}

/// Benchmark-wide recipe; per-modality specs are derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_modalities: usize,
    pub n_classes: usize,
    pub d_raw: usize,
    pub d_enc: usize,
    /// Feature sequence length per modality; length must equal `n_modalities`.
    pub seq_lens: Vec<usize>,
    pub n_in_domain: usize,
    pub n_out_domain: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f32,
    /// Norm of the per-modality mean vector.
    pub mean_norm: f32,
    pub ood_cov_scale: f32,
    /// Modalities whose inputs are Student-t (ν = 5) rather than Gaussian.
    pub heavy_tailed: Vec<usize>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 20240,
            n_modalities: 5,
            n_classes: 8,
            d_raw: 32,
            d_enc: 32,
            seq_lens: vec![4, 6, 8, 10, 12],
            n_in_domain: 2,
            n_out_domain: 1,
            n_train: 4096,
            n_eval: 256,
            noise_std: 0.1,
            mean_norm: 0.5,
            ood_cov_scale: 2.0,
            heavy_tailed: vec![2, 4],
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_modalities < 2 {
            return bad("n_modalities must be >= 2".into());
        }
        if self.seq_lens.len() != self.n_modalities {
            return bad(format!("seq_lens has {} entries for {} modalities", self.seq_lens.len(), self.n_modalities));
        }
        if self.seq_lens.contains(&0) || self.d_raw == 0 || self.d_enc == 0 {
            return bad("dimensions must be positive".into());
        }
        let mut lens = self.seq_lens.clone();
        lens.sort_unstable();
        lens.dedup();
        if lens.len() != self.seq_lens.len() {
            return bad("modalities need distinct sequence lengths".into());
        }
        if self.n_classes < 2 || self.n_in_domain == 0 {
            return bad("need >= 2 classes and >= 1 in-domain dataset".into());
        }
        if self.n_train < self.n_classes || self.n_eval == 0 {
            return bad("n_train must cover every class and n_eval must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !(self.ood_cov_scale > 0.0) || !(self.mean_norm >= 0.0) {
            return bad("noise_std, mean_norm must be >= 0 and ood_cov_scale > 0".into());
        }
        Ok(())
    }

    pub fn modality_spec(&self, m: usize) -> SyntheticModalitySpec {
        let seed = derive_seed(self.seed, &format!("modality.{m}"));
        let mut datasets = Vec::new();
        for k in 0..self.n_in_domain {
            datasets.push(DatasetSpec {
                name: format!("m{m}_in{k}"),
                domain: Domain::InDomain,
                n_train: self.n_train,
                n_eval: self.n_eval,
                cov_scale: 1.0,
            });
        }
        for k in 0..self.n_out_domain {
            datasets.push(DatasetSpec {
                name: format!("m{m}_out{k}"),
                domain: Domain::OutOfDomain,
                n_train: 0,
                n_eval: self.n_eval,
                cov_scale: self.ood_cov_scale,
            });
        }
        SyntheticModalitySpec {
            modality: m,
            seed,
            d_raw: self.d_raw,
            d_enc: self.d_enc,
            seq_len: self.seq_lens[m],
            nonlinearity: Nonlinearity::ALL[m % Nonlinearity::ALL.len()],
            n_classes: self.n_classes,
            mean_norm: self.mean_norm,
            cov_scale: 1.0,
            heavy_tail: self.heavy_tailed.contains(&m),
            noise_std: self.noise_std,
            datasets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub domain: Domain,
    /// Zero for evaluation-only datasets.
    pub n_train: usize,
    pub n_eval: usize,
    /// Multiplier on the modality's input scale.
    pub cov_scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModalitySpec {
    pub modality: usize,
    pub seed: u64,
    pub d_raw: usize,
    pub d_enc: usize,
    pub seq_len: usize,
    pub nonlinearity: Nonlinearity,
    pub n_classes: usize,
    pub mean_norm: f32,
    pub cov_scale: f32,
    pub heavy_tail: bool,
    pub noise_std: f32,
    pub datasets: Vec<DatasetSpec>,
}

impl SyntheticModalitySpec {
    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.seed, "encoder")
    }

    pub fn readout_seed(&self) -> u64 {
        derive_seed(self.seed, "readout")
    }

    /// Mean vector `μ` (norm `mean_norm`) and readout `R` (`d_raw × C`).
    pub fn distribution(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut rng = seeded_rng(derive_seed(self.seed, "mean"));
        let mut mean: Vec<f32> = (0..self.d_raw).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        mean.iter_mut().for_each(|v| *v *= self.mean_norm / norm);
        let mut rng = seeded_rng(self.readout_seed());
        let readout = (0..self.d_raw * self.n_classes).map(|_| std_normal.sample(&mut rng)).collect();
        Ok((mean, readout))
    }
}

/// Label of a clean raw vector under readout `R` (`d_raw × C`, row-major).
pub fn label_of(x: &[f32], readout: &[f32], n_classes: usize) -> usize {
    let mut scores = vec![0.0f32; n_classes];
    for (i, &xi) in x.iter().enumerate() {
        for (c, s) in scores.iter_mut().enumerate() {
            *s += xi * readout[i * n_classes + c];
        }
    }
    let mut best = 0;
    for c in 1..n_classes {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    best
}

/// A materialized split: observed raw vectors, their features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub raw: Vec<f32>,
    pub feats: Vec<f32>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub d_raw: usize,
    pub d_enc: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn feat_width(&self) -> usize {
        self.seq_len * self.d_enc
    }

    pub fn raw_row(&self, i: usize) -> &[f32] {
        &self.raw[i * self.d_raw..(i + 1) * self.d_raw]
    }

    /// Features `[len(idx), T, d_enc]` for the given rows.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let w = self.feat_width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.len() {
                return Err(crate::TensorError::IndexOutOfRange { index: i, len: self.len() }.into());
            }
            data.extend_from_slice(&self.feats[i * w..(i + 1) * w]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(&[idx.len(), self.seq_len, self.d_enc], data)?, labels))
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        for v in &self.raw {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modality: usize,
    pub index: usize,
    pub name: String,
    pub domain: Domain,
    pub train: Split,
    pub eval: Split,
    eval_hash: String,
}

impl Dataset {
    pub fn eval_hash(&self) -> &str {
        &self.eval_hash
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.train.hash_into(&mut h);
        self.eval.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    /// Confirms the eval split still matches its generation-time hash.
    pub fn verify_eval(&self) -> Result<()> {
        if split_hash(&self.eval) == self.eval_hash {
            Ok(())
        } else {
            Err(Error::FrozenTampered(format!("eval split of {}", self.name)))
        }
    }
}

fn split_hash(s: &Split) -> String {
    let mut h = Sha256::new();
    s.hash_into(&mut h);
    hex::encode(h.finalize())
}

/// One modality's frozen encoder and its datasets.
#[derive(Clone, Debug)]
pub struct ModalityData {
    pub spec: SyntheticModalitySpec,
    pub encoder: ModalityEncoder,
    pub datasets: Vec<Dataset>,
}

impl ModalityData {
    pub fn in_domain(&self) -> impl Iterator<Item = &Dataset> {
        self.datasets.iter().filter(|d| d.domain == Domain::InDomain)
    }

    /// Total training rows across in-domain datasets.
    pub fn n_train(&self) -> usize {
        self.datasets.iter().map(|d| d.train.len()).sum()
    }
}

struct Sampler {
    mean: Vec<f32>,
    readout: Vec<f32>,
    scale: f32,
    heavy: bool,
    noise: f32,
    n_classes: usize,
}

impl Sampler {
    fn draw(&self, rng: &mut SeededRng) -> (Vec<f32>, usize) {
        let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let t = StudentT::new(5.0f32).expect("valid dof");
        let clean: Vec<f32> = self
            .mean
            .iter()
            .map(|&mu| {
                let z = if self.heavy { t.sample(rng) } else { std_normal.sample(rng) };
                mu + self.scale * z
            })
            .collect();
        let label = label_of(&clean, &self.readout, self.n_classes);
        let observed = clean.iter().map(|v| v + self.noise * std_normal.sample(rng)).collect();
        (observed, label)
    }
}

/// Draws `n` rows with exactly balanced labels (quota rejection sampling).
fn draw_balanced(sampler: &Sampler, n: usize, rng: &mut SeededRng) -> Result<(Vec<f32>, Vec<usize>)> {
    let c = sampler.n_classes;
    let quota: Vec<usize> = (0..c).map(|k| n / c + usize::from(k < n % c)).collect();
    let mut filled = vec![0usize; c];
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..MAX_GENERATION_PASSES {
        for _ in 0..n {
            let (x, y) = sampler.draw(rng);
            if filled[y] < quota[y] {
                filled[y] += 1;
                raw.extend(x);
                labels.push(y);
            }
        }
        if labels.len() == n {
            // shuffle so classes are interleaved
            let d = sampler.mean.len();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let raw_s = order.iter().flat_map(|&i| raw[i * d..(i + 1) * d].iter().copied()).collect();
            let lab_s = order.iter().map(|&i| labels[i]).collect();
            return Ok((raw_s, lab_s));
        }
    }
    Err(Error::Generation(format!(
        "could not balance {c} classes over {n} rows in {MAX_GENERATION_PASSES} passes (filled {filled:?})"
    )))
}

/// Materializes the encoder and every dataset of one modality.
pub fn generate_modality(spec: &SyntheticModalitySpec) -> Result<ModalityData> {
    let encoder = ModalityEncoder::new(
        spec.modality,
        spec.d_raw,
        spec.seq_len,
        spec.d_enc,
        spec.nonlinearity,
        1.0,
        spec.encoder_seed(),
    )?;
    let (mean, readout) = spec.distribution()?;
    let mut datasets = Vec::new();
    for (index, ds) in spec.datasets.iter().enumerate() {
        let sampler = Sampler {
            mean: mean.clone(),
            readout: readout.clone(),
            scale: spec.cov_scale * ds.cov_scale,
            heavy: spec.heavy_tail,
            noise: spec.noise_std,
            n_classes: spec.n_classes,
        };
        let mut rng = seeded_rng(derive_seed(spec.seed, &format!("dataset.{index}")));
        let mut make = |n: usize| -> Result<Split> {
            let (raw, labels) = if n == 0 { (Vec::new(), Vec::new()) } else { draw_balanced(&sampler, n, &mut rng)? };
            let rows: Vec<&[f32]> = raw.chunks(spec.d_raw).collect();
            let feats = if rows.is_empty() { Vec::new() } else { encoder.encode_batch(&rows)?.into_data() };
            Ok(Split { raw, feats, labels, seq_len: spec.seq_len, d_raw: spec.d_raw, d_enc: spec.d_enc })
        };
        let train = make(ds.n_train)?;
        let eval = make(ds.n_eval)?;
        let eval_hash = split_hash(&eval);
        datasets.push(Dataset {
            modality: spec.modality,
            index,
            name: ds.name.clone(),
            domain: ds.domain,
            train,
            eval,
            eval_hash,
        });
    }
    Ok(ModalityData { spec: spec.clone(), encoder, datasets })
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub modalities: Vec<ModalityData>,
}

impl Benchmark {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let modalities = (0..spec.n_modalities)
            .map(|m| generate_modality(&spec.modality_spec(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), modalities })
    }

    pub fn modality(&self, m: usize) -> Result<&ModalityData> {
        self.modalities.get(m).ok_or(Error::UnknownModality(m))
    }

    pub fn dataset(&self, m: usize, n: usize) -> Result<&Dataset> {
        self.modality(m)?
            .datasets
            .get(n)
            .ok_or(Error::UnknownDataset { modality: m, dataset: n.to_string() })
    }

    /// Seeds and hashes of everything generated, for the manifest file.
    pub fn manifest(&self) -> serde_json::Value {
        let modalities: Vec<_> = self
            .modalities
            .iter()
            .map(|md| {
                serde_json::json!({
                    "spec": md.spec,
                    "encoder_hash": md.encoder.weights().hash_hex(),
                    "datasets": md.datasets.iter().map(|d| serde_json::json!({
                        "name": d.name,
                        "domain": d.domain,
                        "n_train": d.train.len(),
                        "n_eval": d.eval.len(),
                        "content_hash": d.content_hash(),
                        "eval_hash": d.eval_hash(),
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({ "spec": self.spec, "modalities": modalities })
    }
}

/// With-replacement batch from the pooled in-domain training rows of a modality.
pub fn sample_batch(md: &ModalityData, batch_size: usize, rng: &mut SeededRng) -> Result<(Tensor, Vec<usize>)> {
    let total = md.n_train();
    if total == 0 {
        return Err(Error::Contract(format!("modality {} has no training rows", md.spec.modality)));
    }
    let mut feats = Vec::new();
    let mut labels = Vec::with_capacity(batch_size);
    let (t, e) = (md.spec.seq_len, md.spec.d_enc);
    for _ in 0..batch_size {
        let mut r = rng.random_range(0..total);
        for d in &md.datasets {
            if r < d.train.len() {
                feats.extend_from_slice(&d.train.feats[r * t * e..(r + 1) * t * e]);
                labels.push(d.train.labels[r]);
                break;
            }
            r -= d.train.len();
        }
    }
    Ok((Tensor::new(&[batch_size, t, e], feats)?, labels))
}

/// Percentage of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(crate::TensorError::ShapeMismatch { op: "accuracy", lhs: s.to_vec(), rhs: vec![labels.len()] }.into());
    }
    Ok(100.0 * correct(logits, labels) as f64 / labels.len() as f64)
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count()
}

/// Accuracy ×100 over the frozen eval split for any logits function.
pub fn evaluate_with<F>(ds: &Dataset, mut logits: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = ds.eval.len();
    if n == 0 {
        return Err(Error::Contract(format!("dataset {} has an empty eval split", ds.name)));
    }
    let mut hits = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.eval.gather(chunk)?;
        hits += correct(&logits(&x)?, &y);
    }
    Ok(100.0 * hits as f64 / n as f64)
}

/// Score of a path-switched configuration on a dataset.
pub fn evaluate(core: &FrozenCore, config: &InferenceConfig<'_>, ds: &Dataset) -> Result<f64> {
    if config.modality != ds.modality {
        return Err(Error::Contract(format!(
            "configuration for modality {} evaluated on dataset of modality {}",
            config.modality, ds.modality
        )));
    }
    evaluate_with(ds, |x| config.logits(core, x))
}

/// Score of a plain core + query bank (no adapters) on a dataset.
pub fn evaluate_plain(core: &FrozenCore, query: &QueryBank, ds: &Dataset) -> Result<f64> {
    evaluate_with(ds, |x| core.logits(query, x, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec { n_train: 64, n_eval: 32, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Benchmark::generate(&small()).unwrap();
        let b = Benchmark::generate(&small()).unwrap();
        for (ma, mb) in a.modalities.iter().zip(&b.modalities) {
            for (da, db) in ma.datasets.iter().zip(&mb.datasets) {
                assert_eq!(da.content_hash(), db.content_hash());
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        let b = Benchmark::generate(&small()).unwrap();
        for md in &b.modalities {
            for d in &md.datasets {
                let mut counts = vec![0; 8];
                d.eval.labels.iter().for_each(|&l| counts[l] += 1);
                assert!(counts.iter().all(|&c| c == 4), "{counts:?}");
            }
        }
    }

    #[test]
    fn ood_datasets_have_no_train_rows() {
        let b = Benchmark::generate(&small()).unwrap();
        let md = &b.modalities[1];
        assert_eq!(md.datasets.len(), 3);
        assert_eq!(md.datasets[2].domain, Domain::OutOfDomain);
        assert!(md.datasets[2].train.is_empty());
        assert_eq!(md.n_train(), 128);
    }

    #[test]
    fn spec_validation() {
        assert!(BenchmarkSpec { seq_lens: vec![4, 4, 8, 10, 12], ..small() }.validate().is_err());
        assert!(BenchmarkSpec { seq_lens: vec![4, 6], ..small() }.validate().is_err());
    }

    #[test]
    fn perfect_memorization_scores_100() {
        let b = Benchmark::generate(&BenchmarkSpec { n_eval: 1, ..small() }).unwrap();
        let ds = b.dataset(0, 0).unwrap();
        let y = ds.eval.labels[0];
        let score = evaluate_with(ds, |_| {
            let mut row = vec![0.0; 8];
            row[y] = 1.0;
            Ok(Tensor::new(&[1, 8], row)?)
        })
        .unwrap();
        assert_eq!(score, 100.0);
    }
}
