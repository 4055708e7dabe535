use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::{Real, Tensor};

struct SoftmaxChannels;

impl<T: Real> Backward<T> for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [b, k, h, w] = output.dims4().expect("rank 4");
        let plane = h * w;
        let (y, g) = (output.data(), grad.data());
        let mut out = Tensor::zeros(vec![b, k, h, w]);
        let o = out.data_mut();
        for i in 0..b {
            let base = i * k * plane;
            for p in 0..plane {
                let dot: T = (0..k).map(|c| y[base + c * plane + p] * g[base + c * plane + p]).sum();
                for c in 0..k {
                    let at = base + c * plane + p;
                    o[at] = y[at] * (g[at] - dot);
                }
            }
        }
        vec![Some(out)]
    }
}

impl<T: Real> Tape<T> {
    /// Per-pixel softmax across the channel axis of `[B, K, H, W]` logits.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [b, k, h, w] = self.value(x).dims4()?;
        if k < 2 {
            return shape_err(format!("softmax_channels needs at least 2 channels, got {k}"));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..b {
            let base = i * k * plane;
            for p in 0..plane {
                let max = (0..k)
                    .map(|c| src[base + c * plane + p])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for c in 0..k {
                    let e = (src[base + c * plane + p] - max).exp();
                    out[base + c * plane + p] = e;
                    total += e;
                }
                for c in 0..k {
                    out[base + c * plane + p] /= total;
                }
            }
        }
        let value = Tensor::new(vec![b, k, h, w], out)?;
        self.record(value, &[x], Box::new(SoftmaxChannels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_are_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([1, 3, 2, 2]));
        let p = tape.softmax_channels(x).unwrap();
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 1, 1], vec![1000.0f32, 0.0]).unwrap());
        let p = tape.softmax_channels(x).unwrap();
        let d = tape.value(p).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1] < 1e-6 && d[1] >= 0.0);
    }

    #[test]
    fn single_channel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([1, 1, 2, 2]));
        assert!(tape.softmax_channels(x).is_err());
    }
}
