//! Encoder-decoder segmentor: image -> per-class probabilities -> intensity
//! heatmap `H(x) = sum_k p_k(x) g_k`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reflect_autograd::{checkpoint, Activation, Bound, ParamSet, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mask::LabelMask;
use crate::nn::{UNet, UNetConfig};

/// Probabilities below this are clamped inside the cross-entropy log.
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentorConfig {
    pub k_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub input_channels: usize,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        Self {
            k_classes: 3,
            base_channels: 16,
            depth: 3,
            input_channels: 1,
        }
    }
}

impl SegmentorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 || self.depth == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return shape_err(format!("invalid segmentor config {self:?}"));
        }
        Ok(())
    }
}

/// Heatmap intensity `g_k` of each class: strictly increasing, `g_0 = 0`,
/// `g_max = 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelIntensities(Vec<f64>);

impl LabelIntensities {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        let increasing = g.windows(2).all(|w| w[0] < w[1]);
        if g.len() < 2 || !increasing || g[0] != 0.0 || *g.last().unwrap() != 255.0 {
            return shape_err(format!("invalid label intensities {g:?}"));
        }
        Ok(Self(g))
    }

    /// `g_i = 255 i / (k - 1)`.
    pub fn evenly_spaced(k: usize) -> Result<Self> {
        if k < 2 {
            return shape_err(format!("need at least 2 classes, got {k}"));
        }
        Self::new((0..k).map(|i| 255.0 * i as f64 / (k - 1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The mask rendered at class intensities, `[1, 1, H, W]`.
    pub fn encode<T: Real>(&self, mask: &LabelMask) -> Tensor<T> {
        Tensor::from_fn([1, 1, mask.height(), mask.width()], |i| {
            T::lit(self.0[mask.data()[i] as usize])
        })
    }
}

/// Per-pixel class probabilities `[1, k, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T>(Tensor<T>);

impl<T: Real> ProbMap<T> {
    /// Validates rank, `k >= 2` and per-pixel normalisation.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let [b, k, h, w] = t.dims4()?;
        if b != 1 || k < 2 {
            return shape_err(format!("probability map shape {:?}", t.shape()));
        }
        let plane = h * w;
        let d = t.data();
        for p in 0..plane {
            let s: f64 = (0..k).map(|c| d[c * plane + p].to_f64_lossy()).sum();
            if (s - 1.0).abs() > 1e-4 || (0..k).any(|c| d[c * plane + p] < T::zero()) {
                return shape_err(format!("pixel {p} is not a distribution (sum {s})"));
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_mask<T: Real>(p: &ProbMap<T>) -> LabelMask {
    let k = p.classes();
    let (h, w) = p.extent();
    let plane = h * w;
    let d = p.tensor().data();
    let data = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, data).expect("extent from a valid map")
}

/// `sum_k p_k g_k` as a `[1, 1, H, W]` node, differentiable in `probs`.
pub fn heatmap_from_probs<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    g: &LabelIntensities,
) -> Result<Var> {
    let k = tape.value(probs).dims4()?[1];
    if k != g.len() {
        return shape_err(format!("{k} probability channels but {} intensities", g.len()));
    }
    let kernel = tape.constant(Tensor::from_fn([1, k, 1, 1], |i| T::lit(g.values()[i])));
    Ok(tape.conv2d(probs, kernel, None, 1, 0)?)
}

/// Mean over pixels of `-ln max(p_target, 1e-7)`.
pub fn cross_entropy_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &LabelMask) -> Result<Var> {
    let [b, k, h, w] = tape.value(probs).dims4()?;
    if b != 1 || (h, w) != (target.height(), target.width()) {
        return shape_err(format!(
            "probabilities {:?} vs target {}x{}",
            tape.shape(probs),
            target.height(),
            target.width()
        ));
    }
    target.check_classes(k)?;
    let plane = h * w;
    let onehot = Tensor::from_fn([1, k, h, w], |i| {
        if target.data()[i % plane] as usize == i / plane {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.constant(onehot);
    let logp = tape.log_clamped(probs, CE_EPS)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    Ok(tape.mul_scalar(total, T::lit(-1.0 / plane as f64))?)
}

#[derive(Clone, Debug)]
pub struct Segmentor<T: Real> {
    pub config: SegmentorConfig,
    pub params: ParamSet<T>,
    net: UNet,
}

impl<T: Real> Segmentor<T> {
    pub fn new(config: SegmentorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::new(
            UNetConfig {
                in_channels: config.input_channels,
                out_channels: config.k_classes,
                base_channels: config.base_channels,
                depth: config.depth,
            },
            Activation::Relu,
            "seg",
            &mut params,
            &mut rng,
        )?;
        Ok(Self { config, params, net })
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        self.net.check_extent(height, width)
    }

    /// Logits of the final 1x1 layer.
    pub fn logits(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Var> {
        self.net.forward(tape, bound, image)
    }

    /// Softmax probabilities `[1, k, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Var> {
        let logits = self.logits(tape, bound, image)?;
        Ok(tape.softmax_channels(logits)?)
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, image: &Tensor<T>) -> Result<ProbMap<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let p = self.forward(&mut tape, &bound, x)?;
        Ok(ProbMap(tape.value(p).clone()))
    }

    /// Zeroes the output layer so every pixel predicts `1/k` per class.
    pub fn zero_head(&mut self) {
        self.net.head.zero(&mut self.params);
    }

    pub fn cast<U: Real>(&self) -> Segmentor<U> {
        Segmentor {
            config: self.config,
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save(&self.params, path)?)
    }

    pub fn load(config: SegmentorConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        checkpoint::load_into(&mut model.params, path)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evenly_spaced_intensities() {
        assert_eq!(LabelIntensities::evenly_spaced(3).unwrap().values(), &[0.0, 127.5, 255.0]);
        assert_eq!(LabelIntensities::evenly_spaced(4).unwrap().values(), &[0.0, 85.0, 170.0, 255.0]);
        assert!(LabelIntensities::new(vec![0.0, 200.0, 100.0, 255.0]).is_err());
        assert!(LabelIntensities::new(vec![1.0, 255.0]).is_err());
        assert!(LabelIntensities::evenly_spaced(1).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut seg = Segmentor::<f32>::new(SegmentorConfig::default(), 3).unwrap();
        seg.zero_head();
        let img = Tensor::from_fn([1, 1, 16, 16], |i| (i % 7) as f32 / 7.0);
        let p = seg.predict(&img).unwrap();
        assert!(p.tensor().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(argmax_mask(&p).data().iter().all(|&c| c == 0));
    }

    #[test]
    fn heatmap_length_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::<f32>::full([1, 3, 2, 2], 1.0 / 3.0));
        let g = LabelIntensities::evenly_spaced(2).unwrap();
        assert!(heatmap_from_probs(&mut tape, p, &g).is_err());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::<f32>::full([1, 2, 1, 2], 0.5));
        let target = LabelMask::new(1, 2, vec![0, 2]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&mut tape, p, &target),
            Err(crate::Error::Data(_))
        ));
    }
}
