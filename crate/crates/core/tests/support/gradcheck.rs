//! Central finite-difference checks for every differentiable tape op and for
//! the composed adapter site.
//!
//! Each instance draws random inputs, contracts the output with a random
//! weight tensor `R` (loss = Σ out ⊙ R) and compares the tape gradient with
//! `(L(x + h) − L(x − h)) / (2h)` evaluated by re-running the forward pass.
//! Losses are accumulated in `f64` and the step uses the `f32`-rounded
//! perturbed values, so the comparison is limited by the forward pass alone.

use pathweave_core::ana::{site_forward, AdapterStack, AnaConfig, PathOptions};
use pathweave_core::backbone::{BackboneConfig, Binder, QueryBank, SiteId, SiteKind};
use pathweave_core::tensor::{derive_seed, seeded_rng, SeededRng, Tape, Var};
use pathweave_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

const H: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

fn randn(rng: &mut SeededRng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_shaped(rng: &mut SeededRng, dims: &[(usize, usize)], scale: f32) -> Tensor {
    let shape: Vec<usize> = dims.iter().map(|&(lo, hi)| dim(rng, lo, hi)).collect();
    randn(rng, &shape, scale)
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// `build(tape, inputs, grad)` records the forward pass and returns the output
/// plus the vars standing for `inputs` (in order). When `grad` is false the
/// inputs may enter as constants.
fn fd_check<F>(label: &str, inputs: &[Tensor], rng: &mut SeededRng, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Tensor], bool) -> (Var<'t>, Vec<Var<'t>>),
{
    let tape = Tape::new();
    let (out, vars) = build(&tape, inputs, true);
    assert_eq!(vars.len(), inputs.len(), "{label}: build must return one var per input");
    let r = randn(rng, &out.shape(), 1.0);
    let rv = tape.constant(&r);
    let loss = out.mul(&rv).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |ts: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let (out, _) = build(&tape, ts, false);
        let o = out.to_tensor();
        o.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    };

    let (mut diff2, mut ana2, mut num2) = (0.0f64, 0.0f64, 0.0f64);
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f32> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].len()],
        };
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + H, x - H);
            plus[i].update(|d| d[j] = xp).unwrap();
            minus[i].update(|d| d[j] = xm).unwrap();
            let num = (eval(&plus) - eval(&minus)) / (xp as f64 - xm as f64);
            let a = analytic[j] as f64;
            diff2 += (a - num).powi(2);
            ana2 += a * a;
            num2 += num * num;
        }
    }
    let denom = ana2.sqrt().max(num2.sqrt());
    let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    assert!(rel < REL_TOL, "{label}: relative gradient error {rel:.3e} >= {REL_TOL:e}");
    assert!(denom > 0.0, "{label}: gradient vanished identically");
    rel
}

fn vars_of<'t>(tape: &'t Tape, ts: &[Tensor], grad: bool) -> Vec<Var<'t>> {
    ts.iter().map(|t| if grad { tape.param(t) } else { tape.constant(t) }).collect()
}

/// Runs `INSTANCES` random instances of an op check; `make` draws inputs and
/// returns them with the op applied to their vars.
fn sweep<M, F>(label: &str, make: M, op: F)
where
    M: Fn(&mut SeededRng) -> Vec<Tensor>,
    F: for<'t> Fn(&[Var<'t>], &mut SeededRng) -> Var<'t> + Copy,
{
    for k in 0..INSTANCES {
        let mut rng = seeded_rng(derive_seed(k, label));
        let inputs = make(&mut rng);
        // op-level randomness (axes, indices) must repeat across re-evaluations
        let op_seed = rng.random::<u64>();
        fd_check(&format!("{label}#{k}"), &inputs, &mut rng, |tape, ts, grad| {
            let vs = vars_of(tape, ts, grad);
            let mut op_rng = seeded_rng(op_seed);
            (op(&vs, &mut op_rng), vs)
        });
    }
}

pub fn matmul_plain_and_batched() {
    sweep(
        "matmul",
        |rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            vec![randn(rng, &[m, k], 1.0), randn(rng, &[k, n], 1.0)]
        },
        |v, _| v[0].matmul(&v[1]).unwrap(),
    );
    sweep(
        "matmul_batched",
        |rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            vec![randn(rng, &[b, m, k], 1.0), randn(rng, &[b, k, n], 1.0)]
        },
        |v, _| v[0].matmul(&v[1]).unwrap(),
    );
    sweep(
        "matmul_shared_rhs",
        |rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            vec![randn(rng, &[b, m, k], 1.0), randn(rng, &[k, n], 1.0)]
        },
        |v, _| v[0].matmul(&v[1]).unwrap(),
    );
}

pub fn elementwise_with_suffix_broadcast() {
    let make = |rng: &mut SeededRng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
        let rhs = if rng.random::<bool>() { vec![c] } else { vec![a, b, c] };
        vec![randn(rng, &[a, b, c], 1.0), randn(rng, &rhs, 1.0)]
    };
    sweep("add", make, |v, _| v[0].add(&v[1]).unwrap());
    sweep("sub", make, |v, _| v[0].sub(&v[1]).unwrap());
    sweep("mul", make, |v, _| v[0].mul(&v[1]).unwrap());
}

pub fn scale_and_row_scale() {
    sweep(
        "scale",
        |rng| vec![rand_shaped(rng, &[(1, 4), (1, 4)], 1.0)],
        |v, rng| v[0].scale(rng.random_range(-2.0..2.0)).unwrap(),
    );
    sweep(
        "row_scale",
        |rng| {
            let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            vec![randn(rng, &[a, b, c], 1.0), randn(rng, &[a, b], 1.0)]
        },
        |v, _| v[0].row_scale(&v[1]).unwrap(),
    );
}

pub fn shape_ops() {
    sweep(
        "select_last",
        |rng| vec![rand_shaped(rng, &[(1, 3), (1, 3), (2, 5)], 1.0)],
        |v, rng| {
            let last = *v[0].shape().last().unwrap();
            v[0].select_last(rng.random_range(0..last)).unwrap()
        },
    );
    sweep(
        "permute",
        |rng| vec![rand_shaped(rng, &[(1, 3), (1, 3), (1, 3)], 1.0)],
        |v, rng| {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[rng.random_range(0..perms.len())];
            // a nonlinearity so the loss is not linear in a permuted copy only
            v[0].permute(&p).unwrap().tanh().unwrap()
        },
    );
    sweep(
        "transpose",
        |rng| vec![rand_shaped(rng, &[(1, 4), (1, 4)], 1.0)],
        |v, _| v[0].transpose().unwrap().tanh().unwrap(),
    );
    sweep(
        "reshape",
        |rng| vec![rand_shaped(rng, &[(1, 3), (2, 2), (1, 3)], 1.0)],
        |v, _| {
            let s = v[0].shape();
            v[0].reshape(&[s[0] * 2, s[2]]).unwrap().tanh().unwrap()
        },
    );
    sweep(
        "broadcast_leading",
        |rng| vec![rand_shaped(rng, &[(1, 3), (1, 3)], 1.0)],
        |v, rng| v[0].broadcast_leading(&[rng.random_range(1..4)]).unwrap(),
    );
    sweep(
        "concat",
        |rng| {
            let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
            vec![randn(rng, &[a, b, 2], 1.0), randn(rng, &[a, b, 3], 1.0), randn(rng, &[a, b, 1], 1.0)]
        },
        |v, _| Var::concat(v, 2).unwrap(),
    );
    sweep(
        "concat_axis0",
        |rng| {
            let b = dim(rng, 1, 4);
            vec![randn(rng, &[2, b], 1.0), randn(rng, &[1, b], 1.0)]
        },
        |v, _| Var::concat(v, 0).unwrap(),
    );
}

pub fn reductions() {
    sweep(
        "mean_axis",
        |rng| vec![rand_shaped(rng, &[(1, 3), (1, 3), (1, 3)], 1.0)],
        |v, rng| v[0].mean_axis(rng.random_range(0..3)).unwrap(),
    );
    sweep("sum", |rng| vec![rand_shaped(rng, &[(1, 4), (1, 4)], 1.0)], |v, _| v[0].sum().unwrap());
    sweep(
        "cross_entropy",
        |rng| vec![rand_shaped(rng, &[(1, 5), (2, 6)], 1.5)],
        |v, rng| {
            let s = v[0].shape();
            let labels: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
            v[0].cross_entropy(&labels).unwrap()
        },
    );
}

pub fn nonlinearities_and_normalization() {
    sweep(
        "softmax",
        |rng| vec![rand_shaped(rng, &[(2, 3), (2, 4), (2, 5)], 1.5)],
        |v, rng| v[0].softmax(rng.random_range(0..3)).unwrap(),
    );
    sweep("softmax_vec8", |rng| vec![randn(rng, &[8], 1.5)], |v, _| v[0].softmax(0).unwrap());
    sweep(
        "layer_norm",
        |rng| {
            let d = dim(rng, 3, 8);
            vec![rand_shaped(rng, &[(1, 3), (1, 3), (d, d)], 1.0), randn(rng, &[d], 1.0), randn(rng, &[d], 1.0)]
        },
        |v, _| v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap(),
    );
    sweep("gelu", |rng| vec![rand_shaped(rng, &[(1, 4), (1, 4)], 2.0)], |v, _| v[0].gelu().unwrap());
    sweep("tanh", |rng| vec![rand_shaped(rng, &[(1, 4), (1, 4)], 1.5)], |v, _| v[0].tanh().unwrap());
}

/// Stack with paths `1..m` frozen at random values and path `m` trainable,
/// every tensor randomized so no gradient is trivially zero.
fn random_stack(rng: &mut SeededRng, d: usize, r: usize, m: usize, options: PathOptions) -> AdapterStack {
    let bc = BackboneConfig {
        d_model: d,
        n_heads: 1,
        n_layers: 1,
        n_queries: 2,
        d_enc: 4,
        n_classes: 3,
        adapter_sites: vec![SiteKind::FfnOut],
        ..Default::default()
    };
    let q0 = QueryBank::new(0, &bc, 7).unwrap();
    let mut stack = AdapterStack::new(bc, AnaConfig { rank: r, ..Default::default() }, q0).unwrap();
    for k in 1..=m {
        let opts = if k == m { options } else { PathOptions::default() };
        stack.expand_modality(k, opts, 11).unwrap();
        for (_, t) in stack.path_mut(k).unwrap().named_tensors_mut().unwrap() {
            let fresh = randn(rng, t.shape(), 0.5);
            t.assign(fresh.data()).unwrap();
        }
        if k < m {
            stack.freeze_path(k).unwrap();
        }
    }
    stack
}

pub fn site_forward_composed() {
    let site = SiteId { layer: 0, kind: SiteKind::FfnOut };
    let variants = [
        PathOptions::default(),
        PathOptions { use_gating: false, ..Default::default() },
        PathOptions { use_in_adapter: false, ..Default::default() },
    ];
    for k in 0..INSTANCES {
        let mut rng = seeded_rng(derive_seed(k, "site_forward"));
        let (d, r) = (dim(&mut rng, 3, 6), dim(&mut rng, 1, 3));
        let m = dim(&mut rng, 1, 4);
        let options = variants[k as usize % variants.len()];
        let stack = random_stack(&mut rng, d, r, m, options);
        let path = stack.path(m).unwrap().clone();
        let history = &stack.paths()[..m - 1];
        let names: Vec<String> =
            path.trainable_names().into_iter().filter(|n| !n.starts_with("query.")).collect();
        let (b, q) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3));
        let mut inputs = vec![randn(&mut rng, &[b, q, d], 1.0), randn(&mut rng, &[b, q, d], 1.0)];
        let by_name = path.named_tensors();
        for n in &names {
            inputs.push(by_name.iter().find(|(k, _)| k == n).unwrap().1.clone());
        }

        let rel = fd_check(&format!("site_forward#{k}"), &inputs, &mut rng, |tape, ts, grad| {
            let mut p = path.clone();
            for (name, t) in p.named_tensors_mut().unwrap() {
                if let Some(i) = names.iter().position(|n| *n == name) {
                    t.assign(ts[i + 2].data()).unwrap();
                }
            }
            let binder = if grad { Binder::with_trainable(tape, names.clone()) } else { Binder::inference(tape) };
            let x = if grad { tape.param(&ts[0]) } else { tape.constant(&ts[0]) };
            let host = if grad { tape.param(&ts[1]) } else { tape.constant(&ts[1]) };
            let out = site_forward(&binder, site, x, host, &p, history).unwrap();
            let mut vars = vec![x, host];
            if grad {
                let bound = binder.trainable_vars();
                assert_eq!(bound.len(), names.len(), "every trainable site tensor takes part");
                for n in &names {
                    vars.push(bound.iter().find(|(k, _)| k == n).unwrap().1);
                }
            } else {
                vars.extend(ts[2..].iter().map(|t| tape.constant(t)));
            }
            (out, vars)
        });
        assert!(rel.is_finite());
    }
}

pub fn site_forward_gradients_reach_every_component() {
    let site = SiteId { layer: 0, kind: SiteKind::FfnOut };
    let mut rng = seeded_rng(5);
    let stack = random_stack(&mut rng, 4, 2, 3, PathOptions::default());
    let path = stack.path(3).unwrap();
    let tape = Tape::new();
    let names: Vec<String> = path.trainable_names().into_iter().filter(|n| !n.starts_with("query.")).collect();
    let binder = Binder::with_trainable(&tape, names.clone());
    let x = tape.constant(&randn(&mut rng, &[2, 3, 4], 1.0));
    let out = site_forward(&binder, site, x, x, path, &stack.paths()[..2]).unwrap();
    let grads = tape.backward(out.tanh().unwrap().sum().unwrap()).unwrap();
    let bound = binder.trainable_vars();
    for suffix in ["down", "up", "in.1", "in.2", "gate"] {
        let (_, v) = bound.iter().find(|(n, _)| n.ends_with(suffix)).unwrap_or_else(|| panic!("{suffix} bound"));
        let g = grads.get(*v).unwrap();
        assert!(g.iter().any(|x| *x != 0.0), "{suffix} received a zero gradient");
    }
}

/// Every check in the suite, by name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("matmul_plain_and_batched", matmul_plain_and_batched),
    ("elementwise_with_suffix_broadcast", elementwise_with_suffix_broadcast),
    ("scale_and_row_scale", scale_and_row_scale),
    ("shape_ops", shape_ops),
    ("reductions", reductions),
    ("nonlinearities_and_normalization", nonlinearities_and_normalization),
    ("site_forward_composed", site_forward_composed),
    ("site_forward_gradients_reach_every_component", site_forward_gradients_reach_every_component),
];
