//! Forgetting and transfer metrics over a stage × modality × dataset score grid.
//!
//! Stage `m` trains modality `m`; modality 0 is the pretrained one. Writing
//! `S[m][i][n]` for the score of dataset `n` of modality `i` after stage `m`
//! (defined for `i <= m`), and `M` for the last stage index:
//!
//! * drop `D(m,i,n) = max_{i<=j<m} S[j][i][n] − S[m][i][n]`
//! * `F_m = (1/m) Σ_{i<m} mean_n D(m,i,n)`
//! * `F̂_i^n = (1/(M−i)) Σ_{m=i+1..=M} D(m,i,n)`
//! * `T_m = mean_n S[m][m][n]`, `T̂_i^n = S[i][i][n]`
//!
//! Drops are not clamped, so backward transfer shows up as negative forgetting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bench::Domain;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub name: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityInfo {
    pub name: String,
    pub datasets: Vec<DatasetInfo>,
}

/// `scores[m][i][n]`, with `scores[m]` holding modalities `0..=m`. A `null`
/// entry is a hole and makes any metric that needs it fail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMatrix {
    pub modalities: Vec<ModalityInfo>,
    pub scores: Vec<Vec<Vec<Option<f64>>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainFilter {
    #[default]
    All,
    InDomain,
    OutOfDomain,
}

impl DomainFilter {
    pub fn matches(self, d: Domain) -> bool {
        match self {
            DomainFilter::All => true,
            DomainFilter::InDomain => d == Domain::InDomain,
            DomainFilter::OutOfDomain => d == Domain::OutOfDomain,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainFilter::All => "all",
            DomainFilter::InDomain => "in_domain",
            DomainFilter::OutOfDomain => "out_of_domain",
        }
    }
}

impl std::str::FromStr for DomainFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "in" | "in_domain" => Ok(Self::InDomain),
            "out" | "out_of_domain" => Ok(Self::OutOfDomain),
            other => Err(Error::Config(format!("unknown domain filter {other:?}"))),
        }
    }
}

impl ScoreMatrix {
    /// An empty matrix (no stages evaluated yet).
    pub fn new(modalities: Vec<ModalityInfo>) -> Self {
        Self { modalities, scores: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() > self.modalities.len() {
            return Err(Error::Config(format!(
                "{} stages for {} modalities",
                self.scores.len(),
                self.modalities.len()
            )));
        }
        for (m, row) in self.scores.iter().enumerate() {
            if row.len() != m + 1 {
                return Err(Error::Config(format!("stage {m} lists {} modalities, expected {}", row.len(), m + 1)));
            }
            for (i, cells) in row.iter().enumerate() {
                let n_i = self.modalities[i].datasets.len();
                if cells.len() != n_i {
                    return Err(Error::Config(format!(
                        "stage {m} modality {i} has {} scores for {n_i} datasets",
                        cells.len()
                    )));
                }
                if cells.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("non-finite score at stage {m}, modality {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.scores.len()
    }

    /// Index of the last evaluated stage (`M`).
    pub fn last_stage(&self) -> Result<usize> {
        self.scores.len().checked_sub(1).ok_or_else(|| Error::Contract("score matrix has no stages".into()))
    }

    /// Appends an all-holes row for the next stage and returns its index.
    pub fn push_stage(&mut self) -> Result<usize> {
        let m = self.scores.len();
        if m >= self.modalities.len() {
            return Err(Error::Contract("every modality already has a stage".into()));
        }
        let row = (0..=m).map(|i| vec![None; self.modalities[i].datasets.len()]).collect();
        self.scores.push(row);
        Ok(m)
    }

    pub fn set(&mut self, m: usize, i: usize, n: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Contract(format!("non-finite score for stage {m}, modality {i}, dataset {n}")));
        }
        let cell = self
            .scores
            .get_mut(m)
            .and_then(|r| r.get_mut(i))
            .and_then(|c| c.get_mut(n))
            .ok_or(Error::IncompleteMatrix { stage: m, modality: i, dataset: n })?;
        *cell = Some(v);
        Ok(())
    }

    pub fn get(&self, m: usize, i: usize, n: usize) -> Result<f64> {
        self.scores
            .get(m)
            .and_then(|r| r.get(i))
            .and_then(|c| c.get(n))
            .copied()
            .flatten()
            .ok_or(Error::IncompleteMatrix { stage: m, modality: i, dataset: n })
    }

    fn datasets(&self, i: usize, filter: DomainFilter) -> Result<Vec<usize>> {
        let md = self.modalities.get(i).ok_or(Error::UnknownModality(i))?;
        Ok(md.datasets.iter().enumerate().filter(|(_, d)| filter.matches(d.domain)).map(|(n, _)| n).collect())
    }

    /// Finds `(modality, dataset)` by dataset name.
    pub fn locate(&self, name: &str) -> Option<(usize, usize)> {
        self.modalities
            .iter()
            .enumerate()
            .find_map(|(i, md)| md.datasets.iter().position(|d| d.name == name).map(|n| (i, n)))
    }

    fn drop_at(&self, m: usize, i: usize, n: usize) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for j in i..m {
            best = best.max(self.get(j, i, n)?);
        }
        Ok(best - self.get(m, i, n)?)
    }

    /// `F_m`; modalities with no dataset passing the filter are left out of the average.
    pub fn forgetting_after_stage(&self, m: usize, filter: DomainFilter) -> Result<f64> {
        if m == 0 || m >= self.n_stages() {
            return Err(Error::Contract(format!("forgetting needs 1 <= m < {}, got {m}", self.n_stages())));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..m {
            let ds = self.datasets(i, filter)?;
            if ds.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for &n in &ds {
                s += self.drop_at(m, i, n)?;
            }
            total += s / ds.len() as f64;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(format!("no {} datasets before stage {m}", filter.as_str())));
        }
        Ok(total / count as f64)
    }

    /// `F̂_i^n` over stages `i+1..=M`.
    pub fn dataset_forgetting(&self, i: usize, n: usize) -> Result<f64> {
        let last = self.last_stage()?;
        if i >= last {
            return Err(Error::Contract(format!("dataset forgetting needs i < {last}, got {i}")));
        }
        let mut s = 0.0;
        for m in i + 1..=last {
            s += self.drop_at(m, i, n)?;
        }
        Ok(s / (last - i) as f64)
    }

    /// `T_m`: mean score of the filtered datasets of modality `m` right after stage `m`.
    pub fn transfer_after_stage(&self, m: usize, filter: DomainFilter) -> Result<f64> {
        if m >= self.n_stages() {
            return Err(Error::IncompleteMatrix { stage: m, modality: m, dataset: 0 });
        }
        let ds = self.datasets(m, filter)?;
        if ds.is_empty() {
            return Err(Error::Contract(format!("modality {m} has no {} datasets", filter.as_str())));
        }
        let mut s = 0.0;
        for &n in &ds {
            s += self.get(m, m, n)?;
        }
        Ok(s / ds.len() as f64)
    }

    /// `T̂_i^n = S[i][i][n]`.
    pub fn dataset_transfer(&self, i: usize, n: usize) -> Result<f64> {
        self.get(i, i, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub transfer: f64,
    /// Absent at stage 0.
    pub forgetting: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub modality: usize,
    pub dataset: String,
    pub domain: Domain,
    pub transfer_hat: f64,
    /// Absent for the last stage's modality.
    pub forgetting_hat: Option<f64>,
}

/// Every metric derivable from one score matrix under one domain filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub filter: DomainFilter,
    pub stages: Vec<StageMetrics>,
    pub datasets: Vec<DatasetMetrics>,
    /// Mean `T̂` over filtered datasets of modalities `1..=M`.
    pub transfer_hat_avg: Option<f64>,
    /// Mean `F̂` over filtered datasets of modalities `0..M`.
    pub forgetting_hat_avg: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn compute(label: &str, s: &ScoreMatrix, filter: DomainFilter) -> Result<Self> {
        let last = s.last_stage()?;
        let mut stages = Vec::new();
        for m in 0..=last {
            if s.datasets(m, filter)?.is_empty() {
                continue;
            }
            let forgetting = if m == 0 { None } else { Some(s.forgetting_after_stage(m, filter)?) };
            stages.push(StageMetrics { stage: m, transfer: s.transfer_after_stage(m, filter)?, forgetting });
        }
        let mut datasets = Vec::new();
        let (mut t_hat, mut f_hat) = (Vec::new(), Vec::new());
        for i in 0..=last {
            for n in s.datasets(i, filter)? {
                let info = &s.modalities[i].datasets[n];
                let transfer_hat = s.dataset_transfer(i, n)?;
                let forgetting_hat = if i < last { Some(s.dataset_forgetting(i, n)?) } else { None };
                if i >= 1 {
                    t_hat.push(transfer_hat);
                }
                f_hat.extend(forgetting_hat);
                datasets.push(DatasetMetrics {
                    modality: i,
                    dataset: info.name.clone(),
                    domain: info.domain,
                    transfer_hat,
                    forgetting_hat,
                });
            }
        }
        Ok(Self {
            label: label.to_string(),
            filter,
            stages,
            datasets,
            transfer_hat_avg: mean(&t_hat),
            forgetting_hat_avg: mean(&f_hat),
        })
    }

    pub fn stage(&self, m: usize) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == m)
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetMetrics> {
        self.datasets.iter().find(|d| d.dataset == name)
    }

    /// Mean `T_m` over the given stages (skipping any not in the report).
    pub fn mean_transfer(&self, stages: std::ops::RangeInclusive<usize>) -> Option<f64> {
        let v: Vec<f64> = self.stages.iter().filter(|s| stages.contains(&s.stage)).map(|s| s.transfer).collect();
        mean(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// One report as a stage table followed by a per-dataset table.
pub fn render_report(r: &MetricReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "## {} ({})\n", r.label, r.filter.as_str());
            let _ = writeln!(out, "| stage | T | F |\n|---:|---:|---:|");
            for s in &r.stages {
                let _ = writeln!(out, "| {} | {:.2} | {} |", s.stage, s.transfer, fmt_opt(s.forgetting));
            }
            let _ = writeln!(out, "\n| modality | dataset | domain | T̂ | F̂ |\n|---:|---|---|---:|---:|");
            for d in &r.datasets {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:.2} | {} |",
                    d.modality,
                    d.dataset,
                    domain_str(d.domain),
                    d.transfer_hat,
                    fmt_opt(d.forgetting_hat)
                );
            }
            let _ = writeln!(
                out,
                "| | average | | {} | {} |",
                fmt_opt(r.transfer_hat_avg),
                fmt_opt(r.forgetting_hat_avg)
            );
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "label,filter,kind,modality,name,domain,T,F");
            for s in &r.stages {
                let _ = writeln!(
                    out,
                    "{},{},stage,{},,,{:.4},{}",
                    r.label,
                    r.filter.as_str(),
                    s.stage,
                    s.transfer,
                    s.forgetting.map(|v| format!("{v:.4}")).unwrap_or_default()
                );
            }
            for d in &r.datasets {
                let _ = writeln!(
                    out,
                    "{},{},dataset,{},{},{},{:.4},{}",
                    r.label,
                    r.filter.as_str(),
                    d.modality,
                    d.dataset,
                    domain_str(d.domain),
                    d.transfer_hat,
                    d.forgetting_hat.map(|v| format!("{v:.4}")).unwrap_or_default()
                );
            }
        }
    }
    out
}

/// Side-by-side stage metrics of several reports, one row per report.
pub fn render_comparison(reports: &[MetricReport], format: ReportFormat) -> String {
    let max_stage = reports.iter().flat_map(|r| r.stages.iter().map(|s| s.stage)).max().unwrap_or(0);
    let stages: Vec<usize> = (1..=max_stage).collect();
    let cell = |r: &MetricReport, m: usize, t: bool| -> Option<f64> {
        r.stage(m).and_then(|s| if t { Some(s.transfer) } else { s.forgetting })
    };
    let mut out = String::new();
    let mut header = vec!["method".to_string(), "filter".to_string()];
    for &m in &stages {
        header.push(format!("T{m}"));
        header.push(format!("F{m}"));
    }
    header.push("T̂ avg".into());
    header.push("F̂ avg".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone(), r.filter.as_str().to_string()];
            for &m in &stages {
                row.push(fmt_opt(cell(r, m, true)));
                row.push(fmt_opt(cell(r, m, false)));
            }
            row.push(fmt_opt(r.transfer_hat_avg));
            row.push(fmt_opt(r.forgetting_hat_avg));
            row
        })
        .collect();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for row in rows {
                let _ = writeln!(out, "| {} |", row.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", header.join(","));
            for row in rows {
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
    }
    out
}

fn domain_str(d: Domain) -> &'static str {
    match d {
        Domain::InDomain => "in",
        Domain::OutOfDomain => "out",
    }
}

// ---------------------------------------------------------------------------
// Published-table reproduction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMatrix {
    pub method: String,
    pub matrix: ScoreMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFixture {
    pub methods: Vec<NamedMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellMetric {
    T,
    F,
    #[serde(rename = "T_hat")]
    THat,
    #[serde(rename = "F_hat")]
    FHat,
    #[serde(rename = "T_hat_avg")]
    THatAvg,
    #[serde(rename = "F_hat_avg")]
    FHatAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedCell {
    pub group: String,
    pub method: String,
    pub metric: CellMetric,
    #[serde(default)]
    pub stage: Option<usize>,
    #[serde(default)]
    pub dataset: Option<String>,
    pub domain: Domain,
    pub value: f64,
    /// Headline cells that must reproduce regardless of the rest.
    #[serde(default)]
    pub anchor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedFixture {
    pub tolerance: f64,
    pub cells: Vec<PublishedCell>,
}

const RAW_FIXTURE: &str = include_str!("../fixtures/raw_scores.json");
const PUBLISHED_FIXTURE: &str = include_str!("../fixtures/published_cells.json");

/// The shipped raw score grids and the published metric cells derived from them.
pub fn bundled_fixture() -> Result<(RawFixture, PublishedFixture)> {
    let raw: RawFixture = serde_json::from_str(RAW_FIXTURE)?;
    for nm in &raw.methods {
        nm.matrix.validate()?;
    }
    Ok((raw, serde_json::from_str(PUBLISHED_FIXTURE)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellCheck {
    pub cell: PublishedCell,
    pub computed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureOutcome {
    pub tolerance: f64,
    pub checks: Vec<CellCheck>,
}

impl FixtureOutcome {
    pub fn anchors(&self) -> impl Iterator<Item = &CellCheck> {
        self.checks.iter().filter(|c| c.cell.anchor)
    }

    pub fn anchors_pass(&self) -> bool {
        self.anchors().all(|c| c.pass)
    }

    pub fn mismatches(&self) -> Vec<&CellCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn filter_of(d: Domain) -> DomainFilter {
    match d {
        Domain::InDomain => DomainFilter::InDomain,
        Domain::OutOfDomain => DomainFilter::OutOfDomain,
    }
}

/// Recomputes one published cell from its method's raw matrix.
pub fn compute_cell(s: &ScoreMatrix, cell: &PublishedCell) -> Result<f64> {
    let need_stage = || cell.stage.ok_or_else(|| Error::Config(format!("cell {cell:?} needs a stage")));
    let need_dataset = || {
        let name = cell.dataset.as_deref().ok_or_else(|| Error::Config(format!("cell {cell:?} needs a dataset")))?;
        s.locate(name).ok_or_else(|| Error::Config(format!("unknown dataset {name:?}")))
    };
    let f = filter_of(cell.domain);
    match cell.metric {
        CellMetric::T => s.transfer_after_stage(need_stage()?, f),
        CellMetric::F => s.forgetting_after_stage(need_stage()?, f),
        CellMetric::THat => {
            let (i, n) = need_dataset()?;
            s.dataset_transfer(i, n)
        }
        CellMetric::FHat => {
            let (i, n) = need_dataset()?;
            s.dataset_forgetting(i, n)
        }
        CellMetric::THatAvg => MetricReport::compute("", s, f)?
            .transfer_hat_avg
            .ok_or_else(|| Error::Contract("no datasets for T̂ average".into())),
        CellMetric::FHatAvg => MetricReport::compute("", s, f)?
            .forgetting_hat_avg
            .ok_or_else(|| Error::Contract("no datasets for F̂ average".into())),
    }
}

/// Checks every published cell against its recomputation within the fixture tolerance.
pub fn verify_fixture(raw: &RawFixture, published: &PublishedFixture) -> Result<FixtureOutcome> {
    // allow for the binary representation of 2-decimal values
    let slack = 1e-9;
    let mut checks = Vec::with_capacity(published.cells.len());
    for cell in &published.cells {
        let nm = raw
            .methods
            .iter()
            .find(|m| m.method == cell.method)
            .ok_or_else(|| Error::Config(format!("no raw scores for method {:?}", cell.method)))?;
        let computed = compute_cell(&nm.matrix, cell)?;
        let pass = (computed - cell.value).abs() <= published.tolerance + slack;
        checks.push(CellCheck { cell: cell.clone(), computed, pass });
    }
    Ok(FixtureOutcome { tolerance: published.tolerance, checks })
}
