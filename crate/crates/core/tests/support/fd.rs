//! Fourth-order central finite differences,
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. The wider step
//! keeps rounding noise near 1e-11 while truncation stays below it.

use masked_fusion::nn::Parameters;
use masked_fusion::rng::SplitMix64;
use masked_fusion::tensor::Tensor;

pub const STEP: f64 = 1e-4;
/// Floor of the relative-error denominator, so entries whose true
/// gradient is zero are judged on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct Check {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl Check {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.worst || self.worst_at.is_empty() {
            self.worst = e;
            self.worst_at = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
        }
    }

    pub fn merge(&mut self, other: Check) {
        self.checked += other.checked;
        if other.worst > self.worst || self.worst_at.is_empty() {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

fn stencil(f: impl Fn(f64) -> f64) -> f64 {
    (-f(2.0 * STEP) + 8.0 * f(STEP) - 8.0 * f(-STEP) + f(-2.0 * STEP)) / (12.0 * STEP)
}

fn nudged<P: Parameters<f64> + Clone>(p: &P, tensor: usize, entry: usize, delta: f64) -> P {
    let mut q = p.clone();
    let mut i = 0;
    q.visit_mut("", &mut |_, t| {
        if i == tensor {
            t.data_mut()[entry] += delta;
        }
        i += 1;
    });
    q
}

/// Compares `grads` with central differences of `loss` at up to
/// `per_tensor` random entries of every parameter tensor.
pub fn check_params<P, F>(
    p: &P,
    grads: &P,
    per_tensor: usize,
    rng: &mut SplitMix64,
    loss: F,
) -> Check
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> f64,
{
    let mut check = Check::default();
    let g = grads.named();
    for (ti, (key, t)) in p.named().into_iter().enumerate() {
        let n = t.len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.next_below(n as u64) as usize;
            let numeric = stencil(|d| loss(&nudged(p, ti, j, d)));
            check.record(g[ti].1.data()[j], numeric, || format!("{key}[{j}]"));
        }
    }
    check
}

/// Same for an input tensor.
pub fn check_input<F>(
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    count: usize,
    name: &str,
    rng: &mut SplitMix64,
    loss: F,
) -> Check
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut check = Check::default();
    for _ in 0..count.min(x.len()) {
        let j = rng.next_below(x.len() as u64) as usize;
        let numeric = stencil(|d| {
            let mut y = x.clone();
            y.data_mut()[j] += d;
            loss(&y)
        });
        check.record(grad.data()[j], numeric, || format!("{name}[{j}]"));
    }
    check
}
