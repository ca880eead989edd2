//! Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always
//! printed; exits non-zero when any hard criterion fails. Takes several
//! minutes on one core: the training criteria use the default benchmark and
//! default training budget over three seeds.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pathweave_core::ana::{trainable_param_count, AdapterStack};
use pathweave_core::checkpoint::StageCheckpoint;
use pathweave_core::metrics;
use pathweave_core::trainer::{self, probe_batch, Pretrained, SequenceOutcome};
use pathweave_core::{
    AnaConfig, BackboneConfig, Benchmark, DomainFilter, ExperimentConfig, Method, MethodConfig, PathOptions,
    QueryBank, ScoreMatrix, SiteKind, TrainPlan,
};

const FIXTURE_BUDGET: Duration = Duration::from_secs(1);
const ZERO_FORGETTING_BUDGET: Duration = Duration::from_secs(600);
const SEEDS: [u64; 3] = [1, 2, 3];
const MIN_FT_FORGETTING: f64 = 5.0;
const MIN_TRANSFER_MARGIN: f64 = 10.0;
const ABLATION_SLACK: f64 = 1.0;
const ABLATION_MIN_SEEDS: usize = 2;
const EXPECTED_ANCHORS: usize = 6;

struct Verdict {
    pass: bool,
    /// Soft criteria are reported but never fail the run.
    hard: bool,
    detail: String,
}

fn hard(pass: bool, detail: String) -> Verdict {
    Verdict { pass, hard: true, detail }
}

/// Everything trained for one seed on the default benchmark.
struct SeedRuns {
    seed: u64,
    pathweave: SequenceOutcome,
    pathweave_elapsed: Duration,
    continual_ft: ScoreMatrix,
    frozen: ScoreMatrix,
    no_gating: ScoreMatrix,
    no_in_adapter: ScoreMatrix,
}

fn run_method(bench: &Benchmark, pre: &Pretrained, plan: &TrainPlan, method: Method) -> SequenceOutcome {
    trainer::run_sequence_from(bench, pre, plan, MethodConfig::new(method), &mut |_, _, _| Ok(()))
        .unwrap_or_else(|e| panic!("{method} (seed {}): {e}", plan.seed))
}

fn train_seed(bench: &Benchmark, seed: u64) -> SeedRuns {
    let plan = TrainPlan { seed, ..Default::default() };
    let t = Instant::now();
    let pre = trainer::pretrain_for(bench, &plan).expect("pretraining");
    let pathweave = run_method(bench, &pre, &plan, Method::Pathweave);
    let pathweave_elapsed = t.elapsed();
    let runs = SeedRuns {
        seed,
        pathweave,
        pathweave_elapsed,
        continual_ft: run_method(bench, &pre, &plan, Method::ContinualFt).scores,
        frozen: run_method(bench, &pre, &plan, Method::FrozenControl).scores,
        no_gating: run_method(bench, &pre, &plan, Method::PathweaveNoGating).scores,
        no_in_adapter: run_method(bench, &pre, &plan, Method::PathweaveNoInAdapter).scores,
    };
    eprintln!("  trained seed {seed} in {:.0?}", t.elapsed());
    runs
}

fn transfer(s: &ScoreMatrix, m: usize) -> f64 {
    s.transfer_after_stage(m, DomainFilter::All).expect("complete score matrix")
}

fn criterion_fixture() -> Verdict {
    let t = Instant::now();
    let (raw, published) = metrics::bundled_fixture().expect("bundled fixture parses");
    let outcome = metrics::verify_fixture(&raw, &published).expect("fixture cells computable");
    let elapsed = t.elapsed();
    let anchors: Vec<_> = outcome.anchors().collect();
    let anchors_ok = anchors.len() == EXPECTED_ANCHORS && anchors.iter().all(|c| c.pass);
    let bad = outcome.mismatches().len();
    hard(
        anchors_ok && bad == 0 && elapsed < FIXTURE_BUDGET,
        format!(
            "anchors {}/{} within ±{}; all cells {}/{} within ±{}; {:.0?} (< {:?})",
            anchors.iter().filter(|c| c.pass).count(),
            EXPECTED_ANCHORS,
            outcome.tolerance,
            outcome.checks.len() - bad,
            outcome.checks.len(),
            outcome.tolerance,
            elapsed,
            FIXTURE_BUDGET,
        ),
    )
}

fn criterion_zero_forgetting(bench: &Benchmark, r: &SeedRuns) -> Verdict {
    let out = &r.pathweave;
    let plan = TrainPlan { seed: r.seed, ..Default::default() };
    let mut exact = true;
    for m in 1..out.scores.n_stages() {
        for f in [DomainFilter::All, DomainFilter::InDomain, DomainFilter::OutOfDomain] {
            exact &= out.scores.forgetting_after_stage(m, f).expect("F_m") == 0.0;
        }
    }
    let mut identical = 0;
    for (i, probe) in out.probes.iter().enumerate() {
        let feats = probe_batch(bench, i, plan.probe_rows).expect("probe batch");
        if out.state.logits(i, &feats).expect("switched logits").bit_eq(probe) {
            identical += 1;
        }
    }
    hard(
        exact && identical == out.probes.len() && r.pathweave_elapsed < ZERO_FORGETTING_BUDGET,
        format!(
            "{} modalities: F_m == 0.0 for every stage and filter: {exact}; probe logits bit-identical {identical}/{}; {:.0?} (< {:?})",
            bench.modalities.len(),
            out.probes.len(),
            r.pathweave_elapsed,
            ZERO_FORGETTING_BUDGET
        ),
    )
}

fn criterion_separation(runs: &[SeedRuns]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let last = r.pathweave.scores.n_stages() - 1;
        let ft = r.continual_ft.forgetting_after_stage(last, DomainFilter::All).expect("F_M");
        let pw = r.pathweave.scores.forgetting_after_stage(last, DomainFilter::All).expect("F_M");
        pass &= ft >= MIN_FT_FORGETTING && pw == 0.0;
        parts.push(format!("seed {}: continual_ft F_{last} {ft:.2}, pathweave F_{last} {pw}", r.seed));
    }
    hard(pass, format!("{} (need ≥ {MIN_FT_FORGETTING} and == 0)", parts.join("; ")))
}

fn criterion_plasticity(runs: &[SeedRuns]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        // stage 0 is the shared pretrained model, identical for both
        let margins: Vec<f64> =
            (1..r.pathweave.scores.n_stages()).map(|m| transfer(&r.pathweave.scores, m) - transfer(&r.frozen, m)).collect();
        pass &= margins.iter().all(|d| *d >= MIN_TRANSFER_MARGIN);
        let fmt: Vec<String> = margins.iter().map(|d| format!("{d:+.1}")).collect();
        parts.push(format!("seed {}: T_1..T_M margin [{}]", r.seed, fmt.join(", ")));
    }
    hard(pass, format!("{} (need ≥ {MIN_TRANSFER_MARGIN})", parts.join("; ")))
}

fn criterion_ablation(runs: &[SeedRuns]) -> Verdict {
    let mean = |s: &ScoreMatrix| (2..=4).map(|m| transfer(s, m)).sum::<f64>() / 3.0;
    let mut holds = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (full, ng, ni) = (mean(&r.pathweave.scores), mean(&r.no_gating), mean(&r.no_in_adapter));
        let ok = full >= ng - ABLATION_SLACK && full >= ni - ABLATION_SLACK;
        holds += ok as usize;
        parts.push(format!("seed {}: full {full:.1} / no_gating {ng:.1} / no_in_adapter {ni:.1} {}", r.seed, if ok { "ok" } else { "reversed" }));
    }
    Verdict {
        pass: holds >= ABLATION_MIN_SEEDS,
        hard: false,
        detail: format!("trend in {holds}/{} seeds (expected ≥ {ABLATION_MIN_SEEDS}); {}", runs.len(), parts.join("; ")),
    }
}

fn criterion_gradients() -> Verdict {
    let mut failed = Vec::new();
    for (name, check) in gradcheck::ALL {
        if catch_unwind(*check).is_err() {
            failed.push(*name);
        }
    }
    hard(
        failed.is_empty(),
        format!(
            "{}/{} suites pass, {} instances each, relative error < {:e}{}",
            gradcheck::ALL.len() - failed.len(),
            gradcheck::ALL.len(),
            gradcheck::INSTANCES,
            gradcheck::REL_TOL,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_param_accounting() -> Verdict {
    let site_sets: [(Vec<SiteKind>, usize); 3] =
        [(vec![SiteKind::FfnOut], 1), (SiteKind::ALL.to_vec(), 1), (SiteKind::ALL.to_vec(), 3)];
    let (mut cases, mut bad) = (0, Vec::new());
    for d in [8, 16] {
        for r in [2, 4] {
            for (kinds, layers) in &site_sets {
                let bc = BackboneConfig {
                    d_model: d,
                    n_heads: 2,
                    n_layers: *layers,
                    n_queries: 1,
                    d_enc: 4,
                    n_classes: 3,
                    adapter_sites: kinds.clone(),
                    ..Default::default()
                };
                let p = bc.sites().len();
                let q0 = QueryBank::new(0, &bc, 3).expect("query bank");
                let mut stack = AdapterStack::new(bc.clone(), AnaConfig { rank: r, ..Default::default() }, q0).expect("stack");
                let mut prev = None;
                for m in 1..=5 {
                    stack.expand_modality(m, PathOptions::default(), 1).expect("expand");
                    let registry: usize = stack.path(m).expect("path").named_tensors().iter().map(|(_, t)| t.len()).sum();
                    let formula = trainable_param_count(&bc, r, m);
                    let slope_ok = prev.is_none_or(|prev| registry - prev == p * (r * r + d));
                    if registry != formula || !slope_ok {
                        bad.push(format!("d={d} r={r} P={p} m={m}: registry {registry}, formula {formula}"));
                    }
                    prev = Some(registry);
                    stack.freeze_path(m).expect("freeze");
                    cases += 1;
                }
            }
        }
    }
    hard(bad.is_empty(), format!("{}/{cases} grid points exact with slope P·(r²+d){}", cases - bad.len(), if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }))
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pathweave")).args(args).output().expect("spawn pathweave");
    assert!(out.status.success(), "pathweave {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn criterion_determinism(tmp: &Path) -> Verdict {
    let mut cfg = ExperimentConfig::default();
    for s in [&mut cfg.plan.pretrain, &mut cfg.plan.stage] {
        s.iterations = 150;
        s.warmup_iters = 10;
    }
    cfg.methods = vec![MethodConfig::new(Method::Pathweave), MethodConfig::new(Method::WiseFt)];
    let cfg_path = tmp.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json().expect("config json")).expect("write config");
    let cfg_s = cfg_path.to_str().expect("utf-8 path");

    let (a, b) = (tmp.join("a"), tmp.join("b"));
    for dir in [&a, &b] {
        cli(&["run", "--config", cfg_s, "--out", dir.to_str().expect("utf-8 path")]);
    }
    let mut same_scores = 0;
    let mut round_trips = 0;
    let mut total = 0;
    for mc in &cfg.methods {
        let m = mc.method;
        let sa = std::fs::read(pathweave_cli::scores_path(&a, m)).expect("scores a");
        let sb = std::fs::read(pathweave_cli::scores_path(&b, m)).expect("scores b");
        same_scores += (sa == sb) as usize;
        let scores = ScoreMatrix::from_json(std::str::from_utf8(&sa).expect("utf-8")).expect("score matrix");

        for stage in 0..scores.n_stages() {
            total += 1;
            let path = pathweave_cli::checkpoint_path(&a, m, stage);
            let bytes = std::fs::read(&path).expect("checkpoint bytes");
            let ck = StageCheckpoint::load(&path, Some(&cfg.config_hash()), false).expect("load checkpoint");
            let state = ck.to_state().expect("restore");
            let again = StageCheckpoint::from_state(stage, m, &cfg.config_hash(), &state, &cfg.plan.ana, None)
                .and_then(|c| c.encode())
                .expect("re-encode");
            let same_file = ck.encode().expect("encode") == bytes && again == bytes;
            let b_bytes = std::fs::read(pathweave_cli::checkpoint_path(&b, m, stage)).expect("checkpoint b");
            // the restored state scores exactly what the run recorded
            let out = cli(&["eval", "--config", &format!("{}", a.join("config.json").display()), "--checkpoint", path.to_str().expect("utf-8 path"), "--modality", &stage.to_string()]);
            let evals: Vec<f64> = String::from_utf8_lossy(&out.stdout)
                .lines()
                .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("json line")["score"].as_f64().expect("score"))
                .collect();
            let recorded: Vec<f64> =
                (0..evals.len()).map(|n| scores.get(stage, stage, n).expect("recorded score")).collect();
            if same_file && b_bytes == bytes && evals == recorded && !evals.is_empty() {
                round_trips += 1;
            }
        }
    }
    hard(
        same_scores == cfg.methods.len() && round_trips == total,
        format!(
            "byte-equal score files {same_scores}/{}; checkpoints byte-identical across runs and round-trip exactly {round_trips}/{total}",
            cfg.methods.len()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        hard(false, format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let started = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();

    verdicts.push((1, "metric fixture reproduction", guarded(criterion_fixture)));

    let bench = Benchmark::generate(&pathweave_core::bench::BenchmarkSpec::default()).expect("default benchmark");
    let runs = catch_unwind(AssertUnwindSafe(|| SEEDS.iter().map(|&s| train_seed(&bench, s)).collect::<Vec<_>>()));
    match &runs {
        Ok(runs) => {
            verdicts.push((2, "zero-forgetting invariant", guarded(|| criterion_zero_forgetting(&bench, &runs[0]))));
            verdicts.push((3, "forgetting separation", guarded(|| criterion_separation(runs))));
            verdicts.push((4, "transfer plasticity", guarded(|| criterion_plasticity(runs))));
            verdicts.push((5, "ablation direction (trend)", guarded(|| criterion_ablation(runs))));
        }
        Err(_) => {
            for (k, name) in [(2, "zero-forgetting invariant"), (3, "forgetting separation"), (4, "transfer plasticity")] {
                verdicts.push((k, name, hard(false, "training failed".into())));
            }
            verdicts.push((5, "ablation direction (trend)", Verdict { pass: false, hard: false, detail: "training failed".into() }));
        }
    }

    verdicts.push((6, "gradient suite", guarded(criterion_gradients)));
    verdicts.push((7, "parameter accounting", guarded(criterion_param_accounting)));
    let tmp = tempfile::tempdir().expect("tempdir");
    verdicts.push((8, "determinism & persistence", guarded(|| criterion_determinism(tmp.path()))));

    println!();
    let mut failed_hard = 0;
    for (k, name, v) in &verdicts {
        let tag = match (v.pass, v.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        failed_hard += (!v.pass && v.hard) as usize;
        println!("criterion {k} [{tag}] {name}: {}", v.detail);
    }
    println!("acceptance: {} of {} criteria pass ({:.0?})", verdicts.iter().filter(|(_, _, v)| v.pass).count(), verdicts.len(), started.elapsed());
    if failed_hard > 0 {
        std::process::exit(1);
    }
}
