//! Structural similarity between an input image and its proxy: windowed
//! normalised cross-correlation, Parzen-window mutual information, heatmap
//! attention and the combined reflective loss.
//!
//! The two statistical losses are fused tape ops. Their forward and backward
//! passes run in `f64` whatever the tape precision.

use reflect_autograd::{Backward, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Clamp inside the MI logarithms.
pub const MI_LOG_EPS: f64 = 1e-10;

/// Attended images lie in `[0, 2]`; MI bins cover `[0, 1]`, so the MI term
/// sees them scaled by this factor.
pub const MI_INPUT_SCALE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// NCC + MI on the attended pair.
    Structural,
    /// Mean absolute difference on the attended pair (ablation).
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Side of the square NCC windows.
    pub window: usize,
    pub mi_bins: usize,
    pub parzen_sigma: f64,
    /// Added to `sigma_a * sigma_b` in the correlation denominator.
    pub eps: f64,
    pub loss: LossKind,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            window: 9,
            mi_bins: 32,
            parzen_sigma: 1.0 / 32.0,
            eps: 1e-5,
            loss: LossKind::Structural,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.mi_bins < 2 || !(self.parzen_sigma > 0.0) || !(self.eps > 0.0) {
            return shape_err(format!("invalid similarity config {self:?}"));
        }
        Ok(())
    }

    /// Number of windows tiling an image once padded to a multiple of the
    /// window size.
    pub fn window_count(&self, height: usize, width: usize) -> usize {
        height.div_ceil(self.window) * width.div_ceil(self.window)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    pub mu_a: f64,
    pub mu_b: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub cov: f64,
}

impl WindowStats {
    pub fn correlation(&self, eps: f64) -> f64 {
        self.cov / (self.sigma_a * self.sigma_b + eps)
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Splits a tensor's shape into (planes, height, width) over its last two
/// axes.
fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("image tensor needs rank >= 2, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

/// Statistics of every non-overlapping `n x n` window, plane by plane in
/// row-major window order. Extents must be multiples of `n`.
pub fn window_stats(a: &[f64], b: &[f64], shape: &[usize], n: usize) -> Result<Vec<WindowStats>> {
    let (np, h, w) = planes(shape)?;
    if h % n != 0 || w % n != 0 {
        return shape_err(format!("extent {h}x{w} not divisible by window {n}"));
    }
    let m = (n * n) as f64;
    let mut out = Vec::with_capacity(np * (h / n) * (w / n));
    for p in 0..np {
        let base = p * h * w;
        for wy in 0..h / n {
            for wx in 0..w / n {
                let at = |dy: usize, dx: usize| base + (wy * n + dy) * w + wx * n + dx;
                let (mut sa, mut sb) = (0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        sa += a[at(dy, dx)];
                        sb += b[at(dy, dx)];
                    }
                }
                let (mu_a, mu_b) = (sa / m, sb / m);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let (da, db) = (a[at(dy, dx)] - mu_a, b[at(dy, dx)] - mu_b);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                out.push(WindowStats {
                    mu_a,
                    mu_b,
                    sigma_a: (va / m).sqrt(),
                    sigma_b: (vb / m).sqrt(),
                    cov: cov / m,
                });
            }
        }
    }
    Ok(out)
}

struct NccRule {
    window: usize,
    eps: f64,
}

impl NccRule {
    /// d(mean CC)/d(a) for every pixel, with `b` the other operand.
    fn grad_wrt(&self, a: &[f64], b: &[f64], shape: &[usize], stats: &[WindowStats], swap: bool) -> Vec<f64> {
        let (np, h, w) = planes(shape).expect("checked in forward");
        let n = self.window;
        let m = (n * n) as f64;
        let count = stats.len() as f64;
        let mut out = vec![0.0; a.len()];
        let mut s = stats.iter();
        for p in 0..np {
            let base = p * h * w;
            for wy in 0..h / n {
                for wx in 0..w / n {
                    let st = s.next().expect("one stat per window");
                    let (mu_a, mu_b, sa, sb) = if swap {
                        (st.mu_b, st.mu_a, st.sigma_b, st.sigma_a)
                    } else {
                        (st.mu_a, st.mu_b, st.sigma_a, st.sigma_b)
                    };
                    let d = sa * sb + self.eps;
                    for dy in 0..n {
                        for dx in 0..n {
                            let i = base + (wy * n + dy) * w + wx * n + dx;
                            let mut g = (b[i] - mu_b) / (m * d);
                            if sa > 0.0 {
                                g -= st.cov * sb * (a[i] - mu_a) / (m * d * d * sa);
                            }
                            out[i] = g / count;
                        }
                    }
                }
            }
        }
        out
    }
}

impl<T: Real> Backward<T> for NccRule {
    fn name(&self) -> &'static str {
        "ncc_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let (a, b) = (to_f64(inputs[0]), to_f64(inputs[1]));
        let stats = window_stats(&a, &b, shape, self.window).expect("checked in forward");
        let up = grad.data()[0].to_f64_lossy();
        let wrap = |g: Vec<f64>| Tensor::new(shape.to_vec(), g.into_iter().map(|v| T::lit(-up * v)).collect()).expect("same shape");
        vec![
            needs[0].then(|| wrap(self.grad_wrt(&a, &b, shape, &stats, false))),
            needs[1].then(|| wrap(self.grad_wrt(&b, &a, shape, &stats, true))),
        ]
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!("{what}: shapes {:?} and {:?}", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// `1 - mean_w CC_w(a, b)` over non-overlapping windows. Extents must be
/// multiples of the window size; see [`reflective_loss`] for padding.
pub fn ncc_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &SimilarityConfig) -> Result<Var> {
    cfg.validate()?;
    same_shape(tape, a, b, "ncc_loss")?;
    let shape = tape.shape(a).to_vec();
    let stats = window_stats(&to_f64(tape.value(a)), &to_f64(tape.value(b)), &shape, cfg.window)?;
    let mean_cc = stats.iter().map(|s| s.correlation(cfg.eps)).sum::<f64>() / stats.len() as f64;
    let rule = NccRule {
        window: cfg.window,
        eps: cfg.eps,
    };
    Ok(tape.record(Tensor::scalar(T::lit(1.0 - mean_cc)), &[a, b], Box::new(rule))?)
}

/// Soft joint histogram of two equally sized images.
#[derive(Clone, Debug, PartialEq)]
pub struct ParzenDensity {
    pub bins: usize,
    /// `bins x bins`, row index from the first image.
    pub joint: Vec<f64>,
    pub marginal_a: Vec<f64>,
    pub marginal_b: Vec<f64>,
}

/// Per-pixel Gaussian bin memberships, normalised over bins; `len x bins`.
fn parzen_weights(x: &[f64], bins: usize, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut w = vec![0.0; x.len() * bins];
    for (p, &v) in x.iter().enumerate() {
        let row = &mut w[p * bins..(p + 1) * bins];
        let mut zmax = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let c = (j as f64 + 0.5) / bins as f64;
            *r = -(v - c) * (v - c) * inv;
            zmax = zmax.max(*r);
        }
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - zmax).exp();
            total += *r;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    w
}

/// `(1 / P) Wa^T Wb`.
fn joint_from_weights(wa: &[f64], wb: &[f64], pixels: usize, bins: usize) -> Vec<f64> {
    let mut joint = vec![0.0; bins * bins];
    f64::gemm(
        bins,
        pixels,
        bins,
        1.0 / pixels as f64,
        wa,
        (1, bins),
        wb,
        (bins, 1),
        0.0,
        &mut joint,
        (bins, 1),
    );
    joint
}

impl ParzenDensity {
    pub fn estimate(a: &[f64], b: &[f64], cfg: &SimilarityConfig) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return shape_err(format!("parzen density of {} and {} pixels", a.len(), b.len()));
        }
        let bins = cfg.mi_bins;
        let wa = parzen_weights(a, bins, cfg.parzen_sigma);
        let wb = parzen_weights(b, bins, cfg.parzen_sigma);
        Ok(Self::from_joint(bins, joint_from_weights(&wa, &wb, a.len(), bins)))
    }

    fn from_joint(bins: usize, joint: Vec<f64>) -> Self {
        let marginal_a = (0..bins).map(|j| joint[j * bins..(j + 1) * bins].iter().sum()).collect();
        let marginal_b = (0..bins).map(|k| (0..bins).map(|j| joint[j * bins + k]).sum()).collect();
        Self {
            bins,
            joint,
            marginal_a,
            marginal_b,
        }
    }

    /// `sum p(a,b) [ln p(a,b) - ln p(a) - ln p(b)]`, logs clamped at 1e-10.
    pub fn mutual_information(&self) -> f64 {
        let l = |x: f64| x.max(MI_LOG_EPS).ln();
        let mut mi = 0.0;
        for j in 0..self.bins {
            for k in 0..self.bins {
                let p = self.joint[j * self.bins + k];
                mi += p * (l(p) - l(self.marginal_a[j]) - l(self.marginal_b[k]));
            }
        }
        mi
    }

    /// d(MI)/d(joint), marginals taken as functions of the joint.
    fn joint_gradient(&self) -> Vec<f64> {
        let l = |x: f64| x.max(MI_LOG_EPS).ln();
        let ind = |x: f64| if x > MI_LOG_EPS { 1.0 } else { 0.0 };
        let mut g = vec![0.0; self.bins * self.bins];
        for j in 0..self.bins {
            let pa = self.marginal_a[j];
            for k in 0..self.bins {
                let pb = self.marginal_b[k];
                let p = self.joint[j * self.bins + k];
                g[j * self.bins + k] = l(p) + ind(p) - l(pa) - ind(pa) - l(pb) - ind(pb);
            }
        }
        g
    }
}

struct MiRule {
    cfg: SimilarityConfig,
}

/// Pulls d(MI)/d(weights) back through the per-pixel bin softmax.
fn weights_to_pixels(x: &[f64], w: &[f64], gw: &[f64], bins: usize, sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    x.iter()
        .enumerate()
        .map(|(p, &v)| {
            let (wr, gr) = (&w[p * bins..(p + 1) * bins], &gw[p * bins..(p + 1) * bins]);
            let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            (0..bins)
                .map(|j| {
                    let c = (j as f64 + 0.5) / bins as f64;
                    wr[j] * (gr[j] - dot) * (-(v - c) / s2)
                })
                .sum()
        })
        .collect()
}

impl<T: Real> Backward<T> for MiRule {
    fn name(&self) -> &'static str {
        "mi_parzen"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let bins = self.cfg.mi_bins;
        let sigma = self.cfg.parzen_sigma;
        let (a, b) = (to_f64(inputs[0]), to_f64(inputs[1]));
        let pixels = a.len();
        let wa = parzen_weights(&a, bins, sigma);
        let wb = parzen_weights(&b, bins, sigma);
        let density = ParzenDensity::from_joint(bins, joint_from_weights(&wa, &wb, pixels, bins));
        let gj = density.joint_gradient();
        let up = grad.data()[0].to_f64_lossy();
        let scale = up / pixels as f64;
        let shape = inputs[0].shape().to_vec();
        let wrap = |g: Vec<f64>| Tensor::new(shape.clone(), g.into_iter().map(T::lit).collect()).expect("same shape");
        // dMI/dWa = (1/P) Wb G^T, dMI/dWb = (1/P) Wa G.
        let ga = needs[0].then(|| {
            let mut gwa = vec![0.0; pixels * bins];
            f64::gemm(pixels, bins, bins, scale, &wb, (bins, 1), &gj, (1, bins), 0.0, &mut gwa, (bins, 1));
            wrap(weights_to_pixels(&a, &wa, &gwa, bins, sigma))
        });
        let gb = needs[1].then(|| {
            let mut gwb = vec![0.0; pixels * bins];
            f64::gemm(pixels, bins, bins, scale, &wa, (bins, 1), &gj, (bins, 1), 0.0, &mut gwb, (bins, 1));
            wrap(weights_to_pixels(&b, &wb, &gwb, bins, sigma))
        });
        vec![ga, gb]
    }
}

/// Parzen-window mutual information (nats) of two images with values in
/// `[0, 1]`.
pub fn mi_parzen<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &SimilarityConfig) -> Result<Var> {
    cfg.validate()?;
    same_shape(tape, a, b, "mi_parzen")?;
    let density = ParzenDensity::estimate(&to_f64(tape.value(a)), &to_f64(tape.value(b)), cfg)?;
    let mi = density.mutual_information();
    Ok(tape.record(Tensor::scalar(T::lit(mi)), &[a, b], Box::new(MiRule { cfg: *cfg }))?)
}

/// `-mi_parzen(a, b)`.
pub fn mi_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &SimilarityConfig) -> Result<Var> {
    let mi = mi_parzen(tape, a, b, cfg)?;
    Ok(tape.mul_scalar(mi, -T::one())?)
}

/// `(1 + heatmap / 255) * img`, differentiable in both operands.
pub fn apply_attention<T: Real>(tape: &mut Tape<T>, img: Var, heatmap: Var) -> Result<Var> {
    same_shape(tape, img, heatmap, "apply_attention")?;
    let h = tape.div_scalar(heatmap, T::lit(255.0))?;
    let f = tape.add_scalar(h, T::one())?;
    Ok(tape.mul(f, img)?)
}

/// Nodes of one reflective loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// `ncc_loss` on the attended pair (structural loss only).
    pub ncc: Option<Var>,
    /// `mi_loss` on the attended pair (structural loss only).
    pub mi: Option<Var>,
}

/// Similarity between input `a` and proxy `b` under heatmap attention.
///
/// Structural: `ncc_loss(A', B') + mi_loss(A'/2, B'/2)` with `A'`, `B'`
/// the attended images, edge-replicated to a multiple of the window size
/// for the NCC term. L1: `mean |A' - B'|`.
pub fn reflective_loss<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    heatmap: Var,
    cfg: &SimilarityConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    same_shape(tape, a, b, "reflective_loss")?;
    let a_hat = apply_attention(tape, a, heatmap)?;
    let b_hat = apply_attention(tape, b, heatmap)?;
    match cfg.loss {
        LossKind::Structural => {
            let pa = tape.pad_replicate_to_multiple(a_hat, cfg.window)?;
            let pb = tape.pad_replicate_to_multiple(b_hat, cfg.window)?;
            let ncc = ncc_loss(tape, pa, pb, cfg)?;
            let sa = tape.mul_scalar(a_hat, T::lit(MI_INPUT_SCALE))?;
            let sb = tape.mul_scalar(b_hat, T::lit(MI_INPUT_SCALE))?;
            let mi = mi_loss(tape, sa, sb, cfg)?;
            let total = tape.add(ncc, mi)?;
            Ok(LossTerms {
                total,
                ncc: Some(ncc),
                mi: Some(mi),
            })
        }
        LossKind::L1 => {
            let d = tape.sub(a_hat, b_hat)?;
            let d = tape.abs(d)?;
            let total = tape.mean(d)?;
            Ok(LossTerms {
                total,
                ncc: None,
                mi: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_count_rounds_up() {
        let cfg = SimilarityConfig::default();
        assert_eq!(cfg.window_count(18, 18), 4);
        assert_eq!(cfg.window_count(64, 64), 64);
    }

    #[test]
    fn indivisible_extent_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 10, 9]));
        let b = tape.constant(Tensor::zeros([1, 1, 10, 9]));
        assert!(ncc_loss(&mut tape, a, b, &SimilarityConfig::default()).is_err());
    }

    #[test]
    fn constant_windows_have_finite_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full([1, 1, 9, 9], 0.3));
        let b = tape.param(Tensor::full([1, 1, 9, 9], 0.7));
        let heat = tape.constant(Tensor::full([1, 1, 9, 9], 100.0));
        let cfg = SimilarityConfig::default();
        let loss = reflective_loss(&mut tape, a, b, heat, &cfg).unwrap();
        let g = tape.backward(loss.total).unwrap();
        assert!(g.get(a).unwrap().all_finite());
        assert!(g.get(b).unwrap().all_finite());
    }

    #[test]
    fn density_is_normalised() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).fract()).collect();
        let b: Vec<f64> = (0..100).map(|i| (i as f64 * 0.61).fract()).collect();
        let d = ParzenDensity::estimate(&a, &b, &SimilarityConfig::default()).unwrap();
        assert!((d.joint.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.joint.iter().all(|&p| p >= 0.0));
    }
}
