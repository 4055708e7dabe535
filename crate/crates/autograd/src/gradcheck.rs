//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{FaultInjection, Tape, Var};
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Corrupts one op's backward rule in the analytic pass.
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_elements: None,
            floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `f` at `inputs`. Non-scalar outputs are contracted with a fixed
/// random weighting so every output element contributes.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights: Option<Tensor<f64>> = None;

    let mut eval = |xs: &[Tensor<f64>], rng: &mut ChaCha8Rng, want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::with_fault(opts.fault.clone());
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).is_scalar() {
            out
        } else {
            let shape = tape.value(out).shape().to_vec();
            let w = weights
                .get_or_insert_with(|| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)))
                .clone();
            let wv = tape.constant(w);
            let p = tape.mul(out, wv)?;
            tape.sum(p)?
        };
        let value = tape.value(loss).item()?;
        let grads = if want_grad {
            let g = tape.backward(loss)?;
            vars.iter()
                .zip(xs)
                .map(|(&v, x)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, &mut rng, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = input.data()[i];
            xs[which].data_mut()[i] = orig + opts.step;
            let (plus, _) = eval(&xs, &mut rng, false)?;
            xs[which].data_mut()[i] = orig - opts.step;
            let (minus, _) = eval(&xs, &mut rng, false)?;
            xs[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[which].data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, opts.floor));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}
