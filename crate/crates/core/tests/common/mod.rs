#![allow(dead_code)]

use ganext_core::generator_genext::GeneratorConfig;
use ganext_tensor::{no_grad, Param, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Random linear functional that reduces a tensor to a scalar.
pub fn project(y: &Var<f64>, seed: u64) -> Var<f64> {
    let w = Var::constant(rand_tensor(y.shape(), seed));
    y.mul(&w).sum()
}

/// Coordinates to probe; every coordinate for small tensors, an even stride
/// otherwise.
fn probe_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(ZERO_FLOOR)
}

pub const FD_STEP: f64 = 1e-6;
/// Gradients below this norm count as zero. Biases that feed straight into
/// an instance norm have an exactly zero gradient, and the difference
/// quotient then only sees rounding noise of order 1e-9.
const ZERO_FLOOR: f64 = 1e-4;
const PROBES: usize = 160;

/// Central finite differences against reverse-mode gradients with respect to
/// every input and every parameter. Returns the worst norm-wise relative
/// error over the tensors, plus the number of tensors whose gradient was
/// identically zero on both sides.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    params: &[&Param<f64>],
    f: impl Fn(&[Var<f64>]) -> Var<f64>,
) -> (f64, usize) {
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let grads = f(&leaves).backward();
    let consts = |xs: &[Tensor<f64>]| xs.iter().cloned().map(Var::constant).collect::<Vec<_>>();
    let eval = |xs: &[Tensor<f64>]| no_grad(|| f(&consts(xs)).item());
    let mut worst: f64 = 0.0;
    let mut zero = 0;
    let verbose = std::env::var_os("GRADCHECK_VERBOSE").is_some();
    let mut record = |what: &str, a: Vec<f64>, n: Vec<f64>| {
        if a.iter().chain(&n).all(|v| *v == 0.0) {
            zero += 1;
        }
        let e = rel_err(&a, &n);
        if verbose {
            eprintln!("  {what}: {e:e}");
        }
        worst = worst.max(e);
    };
    for (i, input) in inputs.iter().enumerate() {
        let full = grads
            .get(&leaves[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let idx = probe_indices(input.numel(), PROBES);
        let numeric = idx
            .iter()
            .map(|&j| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += FD_STEP;
                let up = eval(&xs);
                xs[i].data_mut()[j] -= 2.0 * FD_STEP;
                (up - eval(&xs)) / (2.0 * FD_STEP)
            })
            .collect();
        record(
            &format!("input {i}"),
            idx.iter().map(|&j| full.data()[j]).collect(),
            numeric,
        );
    }
    for p in params {
        let base = p.value();
        let full = grads
            .get(&p.var())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let idx = probe_indices(base.numel(), PROBES);
        let numeric = idx
            .iter()
            .map(|&j| {
                let mut t = base.clone();
                t.data_mut()[j] += FD_STEP;
                p.set_value(t.clone()).unwrap();
                let up = eval(inputs);
                t.data_mut()[j] -= 2.0 * FD_STEP;
                p.set_value(t).unwrap();
                let down = eval(inputs);
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        p.set_value(base).unwrap();
        record(
            p.name(),
            idx.iter().map(|&j| full.data()[j]).collect(),
            numeric,
        );
    }
    (worst, zero)
}

/// Reduced generator used by the smoke runs.
pub fn smoke_generator() -> GeneratorConfig {
    GeneratorConfig::tiny(8)
}

pub mod grad_cases;
pub mod smoke;
