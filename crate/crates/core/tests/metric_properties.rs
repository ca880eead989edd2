//! Metric properties over random score matrices, checked against a
//! brute-force scan written directly over the dense score array.

use pathweave_core::metrics::{DatasetInfo, ModalityInfo};
use pathweave_core::{Domain, DomainFilter, MetricReport, ScoreMatrix};
use proptest::prelude::*;

const EPS: f64 = 1e-9;

/// Domain tags per modality (every modality keeps at least one dataset) and
/// the dense `scores[m][i][n]`.
fn matrix() -> impl Strategy<Value = ScoreMatrix> {
    (2usize..=5)
        .prop_flat_map(|stages| prop::collection::vec(prop::collection::vec(any::<bool>(), 1..=3), stages))
        .prop_flat_map(|tags| {
            let stages = tags.len();
            let cells: usize = (0..stages).map(|m| (0..=m).map(|i| tags[i].len()).sum::<usize>()).sum();
            (Just(tags), prop::collection::vec(-50.0f64..150.0, cells))
        })
        .prop_map(|(tags, values)| build(&tags, &values))
}

fn build(tags: &[Vec<bool>], values: &[f64]) -> ScoreMatrix {
    let modalities = tags
        .iter()
        .enumerate()
        .map(|(i, ds)| ModalityInfo {
            name: format!("mod{i}"),
            datasets: ds
                .iter()
                .enumerate()
                .map(|(n, in_dom)| DatasetInfo {
                    name: format!("d{i}_{n}"),
                    domain: if *in_dom { Domain::InDomain } else { Domain::OutOfDomain },
                })
                .collect(),
        })
        .collect();
    let mut s = ScoreMatrix::new(modalities);
    let mut it = values.iter();
    for m in 0..tags.len() {
        s.push_stage().unwrap();
        for i in 0..=m {
            for n in 0..tags[i].len() {
                s.set(m, i, n, *it.next().unwrap()).unwrap();
            }
        }
    }
    s
}

fn raw(s: &ScoreMatrix, m: usize, i: usize, n: usize) -> f64 {
    s.scores[m][i][n].expect("dense test matrix")
}

fn keep(s: &ScoreMatrix, i: usize, n: usize, f: DomainFilter) -> bool {
    let d = s.modalities[i].datasets[n].domain;
    match f {
        DomainFilter::All => true,
        DomainFilter::InDomain => d == Domain::InDomain,
        DomainFilter::OutOfDomain => d == Domain::OutOfDomain,
    }
}

/// Best earlier score of (i, n) strictly before stage m, minus the score at m.
fn brute_drop(s: &ScoreMatrix, m: usize, i: usize, n: usize) -> f64 {
    let mut best = None::<f64>;
    for j in 0..m {
        if j >= i {
            let v = raw(s, j, i, n);
            best = Some(match best {
                Some(b) if b >= v => b,
                _ => v,
            });
        }
    }
    best.unwrap() - raw(s, m, i, n)
}

fn brute_forgetting(s: &ScoreMatrix, m: usize, f: DomainFilter) -> Option<f64> {
    let mut per_modality = Vec::new();
    for i in 0..m {
        let drops: Vec<f64> =
            (0..s.modalities[i].datasets.len()).filter(|&n| keep(s, i, n, f)).map(|n| brute_drop(s, m, i, n)).collect();
        if !drops.is_empty() {
            per_modality.push(drops.iter().sum::<f64>() / drops.len() as f64);
        }
    }
    (!per_modality.is_empty()).then(|| per_modality.iter().sum::<f64>() / per_modality.len() as f64)
}

fn brute_transfer(s: &ScoreMatrix, m: usize, f: DomainFilter) -> Option<f64> {
    let v: Vec<f64> = (0..s.modalities[m].datasets.len()).filter(|&n| keep(s, m, n, f)).map(|n| raw(s, m, m, n)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn brute_dataset_forgetting(s: &ScoreMatrix, i: usize, n: usize) -> f64 {
    let last = s.scores.len() - 1;
    let terms: Vec<f64> = (i + 1..=last).map(|m| brute_drop(s, m, i, n)).collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EPS * (1.0 + a.abs().max(b.abs()))
}

fn filters() -> [DomainFilter; 3] {
    [DomainFilter::All, DomainFilter::InDomain, DomainFilter::OutOfDomain]
}

fn shifted(s: &ScoreMatrix, c: f64) -> ScoreMatrix {
    let mut t = s.clone();
    for stage in &mut t.scores {
        for row in stage {
            for v in row.iter_mut().flatten() {
                *v += c;
            }
        }
    }
    t
}

proptest! {
    #[test]
    fn forgetting_matches_brute_force(s in matrix()) {
        for f in filters() {
            for m in 1..s.n_stages() {
                match (s.forgetting_after_stage(m, f), brute_forgetting(&s, m, f)) {
                    (Ok(a), Some(b)) => prop_assert!(close(a, b), "F_{m} {f:?}: {a} vs {b}"),
                    (Err(_), None) => {}
                    (a, b) => prop_assert!(false, "F_{m} {f:?}: {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn transfer_matches_brute_force(s in matrix()) {
        for f in filters() {
            for m in 0..s.n_stages() {
                match (s.transfer_after_stage(m, f), brute_transfer(&s, m, f)) {
                    (Ok(a), Some(b)) => prop_assert!(close(a, b)),
                    (Err(_), None) => {}
                    (a, b) => prop_assert!(false, "T_{m} {f:?}: {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn dataset_metrics_match_brute_force(s in matrix()) {
        let last = s.n_stages() - 1;
        for i in 0..=last {
            for n in 0..s.modalities[i].datasets.len() {
                prop_assert_eq!(s.dataset_transfer(i, n).unwrap(), raw(&s, i, i, n));
                if i < last {
                    let a = s.dataset_forgetting(i, n).unwrap();
                    prop_assert!(close(a, brute_dataset_forgetting(&s, i, n)));
                } else {
                    prop_assert!(s.dataset_forgetting(i, n).is_err());
                }
            }
        }
    }

    #[test]
    fn shift_equivariance(s in matrix(), c in -100.0f64..100.0) {
        let t = shifted(&s, c);
        for f in filters() {
            let (a, b) = match (MetricReport::compute("a", &s, f), MetricReport::compute("b", &t, f)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(_), Err(_)) => continue,
                other => return Err(TestCaseError::fail(format!("{other:?}"))),
            };
            for (x, y) in a.stages.iter().zip(&b.stages) {
                prop_assert!((y.transfer - x.transfer - c).abs() < 1e-9);
                if let (Some(fx), Some(fy)) = (x.forgetting, y.forgetting) {
                    prop_assert!((fx - fy).abs() < 1e-9);
                }
            }
            for (x, y) in a.datasets.iter().zip(&b.datasets) {
                prop_assert!((y.transfer_hat - x.transfer_hat - c).abs() < 1e-9);
                if let (Some(fx), Some(fy)) = (x.forgetting_hat, y.forgetting_hat) {
                    prop_assert!((fx - fy).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_history_has_no_forgetting(s in matrix()) {
        let mut t = s.clone();
        for m in 0..t.scores.len() {
            for i in 0..=m {
                for n in 0..t.scores[m][i].len() {
                    t.scores[m][i][n] = s.scores[i][i][n];
                }
            }
        }
        for m in 1..t.n_stages() {
            prop_assert_eq!(t.forgetting_after_stage(m, DomainFilter::All).unwrap(), 0.0);
        }
    }

    #[test]
    fn strictly_rising_scores_give_negative_dataset_forgetting(s in matrix()) {
        let mut t = s.clone();
        for m in 0..t.scores.len() {
            for i in 0..=m {
                for n in 0..t.scores[m][i].len() {
                    t.scores[m][i][n] = Some(10.0 * m as f64 + n as f64);
                }
            }
        }
        let last = t.n_stages() - 1;
        for i in 0..last {
            prop_assert!(t.dataset_forgetting(i, 0).unwrap() < 0.0);
        }
    }

    #[test]
    fn json_round_trip(s in matrix()) {
        let back = ScoreMatrix::from_json(&s.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}

#[test]
fn zero_matrix_gives_zero_metrics() {
    let tags = vec![vec![true, false], vec![true], vec![false, true, true]];
    let cells: usize = (0..3).map(|m| (0..=m).map(|i| tags[i].len()).sum::<usize>()).sum();
    let s = build(&tags, &vec![0.0; cells]);
    let r = MetricReport::compute("zero", &s, DomainFilter::All).unwrap();
    assert!(r.stages.iter().all(|st| st.transfer == 0.0 && st.forgetting.unwrap_or(0.0) == 0.0));
    assert!(r.datasets.iter().all(|d| d.transfer_hat == 0.0 && d.forgetting_hat.unwrap_or(0.0) == 0.0));
    assert_eq!(r.transfer_hat_avg, Some(0.0));
    assert_eq!(r.forgetting_hat_avg, Some(0.0));
}

#[test]
fn hand_computed_two_stage_example() {
    // image datasets fall 137.7→112.8 and 138.2→112.1 after one stage
    let tags = vec![vec![true, true], vec![true]];
    let s = build(&tags, &[137.7, 138.2, 112.8, 112.1, 60.0]);
    let f = s.forgetting_after_stage(1, DomainFilter::InDomain).unwrap();
    assert!((f - 25.5).abs() < 1e-9, "{f}");
    assert_eq!(s.transfer_after_stage(1, DomainFilter::All).unwrap(), 60.0);
}

#[test]
fn holes_name_the_missing_cell() {
    let tags = vec![vec![true], vec![true]];
    let mut s = build(&tags, &[1.0, 2.0, 3.0]);
    s.scores[1][0][0] = None;
    let err = s.forgetting_after_stage(1, DomainFilter::All).unwrap_err().to_string();
    assert!(err.contains("stage 1") || err.contains('1'), "{err}");
}
