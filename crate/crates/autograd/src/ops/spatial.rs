//! Resampling, concatenation, padding and reshaping of image tensors.

use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::{Real, Tensor};

struct Upsample2x;

impl<T: Real> Backward<T> for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [b, c, h, w] = inputs[0].dims4().expect("rank 4");
        let g = grad.data();
        let w2 = 2 * w;
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        for (p, o) in out.data_mut().chunks_mut(h * w).enumerate() {
            let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let top = 2 * y * w2 + 2 * x;
                    o[y * w + x] = gp[top] + gp[top + 1] + gp[top + w2] + gp[top + w2 + 1];
                }
            }
        }
        vec![Some(out)]
    }
}

struct AvgPool2x;

impl<T: Real> Backward<T> for AvgPool2x {
    fn name(&self) -> &'static str {
        "avg_pool2x"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [b, c, h, w] = inputs[0].dims4().expect("rank 4");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let g = grad.data();
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        for (p, o) in out.data_mut().chunks_mut(h * w).enumerate() {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for x in 0..w {
                    o[y * w + x] = gp[(y / 2) * wo + x / 2] * quarter;
                }
            }
        }
        vec![Some(out)]
    }
}

struct ConcatChannels {
    split: usize,
}

impl<T: Real> Backward<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [b, ca, h, w] = inputs[0].dims4().expect("rank 4");
        let cb = inputs[1].dims4().expect("rank 4")[1];
        debug_assert_eq!(ca, self.split);
        let plane = h * w;
        let g = grad.data();
        let mut ga = needs[0].then(|| Vec::with_capacity(b * ca * plane));
        let mut gb = needs[1].then(|| Vec::with_capacity(b * cb * plane));
        for i in 0..b {
            let base = i * (ca + cb) * plane;
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&g[base..base + ca * plane]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
            }
        }
        vec![
            ga.map(|d| Tensor::new(vec![b, ca, h, w], d).expect("shape")),
            gb.map(|d| Tensor::new(vec![b, cb, h, w], d).expect("shape")),
        ]
    }
}

struct PadReplicate {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
}

impl<T: Real> Backward<T> for PadReplicate {
    fn name(&self) -> &'static str {
        "pad_replicate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut out = Tensor::zeros(inputs[0].shape().to_vec());
        let g = grad.data();
        for (p, o) in out.data_mut().chunks_mut(self.h * self.w).enumerate() {
            let gp = &g[p * self.hp * self.wp..(p + 1) * self.hp * self.wp];
            for y in 0..self.hp {
                let sy = y.min(self.h - 1);
                for x in 0..self.wp {
                    o[sy * self.w + x.min(self.w - 1)] += gp[y * self.wp + x];
                }
            }
        }
        vec![Some(out)]
    }
}

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(
            grad.clone()
                .reshape(inputs[0].shape().to_vec())
                .expect("reshape adjoint"),
        )]
    }
}

impl<T: Real> Tape<T> {
    /// Nearest-neighbour upsampling doubling both spatial extents.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for (p, o) in out.chunks_mut(h2 * w2).enumerate() {
            let sp = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    o[y * w2 + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h2, w2], out)?;
        self.record(value, &[x], Box::new(Upsample2x))
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2x needs even extents, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for (p, o) in out.chunks_mut(ho * wo).enumerate() {
            let sp = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let t = 2 * y * w + 2 * x;
                    o[y * wo + x] = (sp[t] + sp[t + 1] + sp[t + w] + sp[t + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        self.record(value, &[x], Box::new(AvgPool2x))
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        self.record(value, &[a, b], Box::new(ConcatChannels { split: ca }))
    }

    /// Pads the bottom and right edges by replicating the last row/column
    /// until both extents are multiples of `multiple`.
    pub fn pad_replicate_to_multiple(&mut self, x: Var, multiple: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if multiple == 0 {
            return shape_err("pad multiple must be positive");
        }
        let hp = h.div_ceil(multiple) * multiple;
        let wp = w.div_ceil(multiple) * multiple;
        if (hp, wp) == (h, w) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * hp * wp];
        for (p, o) in out.chunks_mut(hp * wp).enumerate() {
            let sp = &src[p * h * w..(p + 1) * h * w];
            for y in 0..hp {
                let sy = y.min(h - 1);
                for x in 0..wp {
                    o[y * wp + x] = sp[sy * w + x.min(w - 1)];
                }
            }
        }
        let value = Tensor::new(vec![b, c, hp, wp], out)?;
        self.record(value, &[x], Box::new(PadReplicate { h, w, hp, wp }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.record(value, &[x], Box::new(Reshape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1, 1, 1, 1], 1.0f64));
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([1, 2, 3, 3], |i| i as f64));
        let y = tape.upsample_nearest2x(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0; 18]);
    }

    #[test]
    fn pool_averages_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 4], vec![1.0f64, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap());
        let y = tape.avg_pool2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 3.0]);
        let odd = tape.constant(Tensor::<f64>::zeros([1, 1, 3, 4]));
        assert!(tape.avg_pool2x(odd).is_err());
    }

    #[test]
    fn concat_then_split_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn([2, 2, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2, 2]);
        assert_eq!(&tape.value(c).data()[..6], &[0.0, 1.0, 2.0, 3.0, 100.0, 101.0]);
        assert_eq!(&tape.value(c).data()[12..16], &[4.0, 5.0, 6.0, 7.0]);
        let w = tape.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f64));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(&g.get(b).unwrap().data()[..4], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn replicate_padding() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([1, 1, 2, 2], |i| i as f64));
        let y = tape.pad_replicate_to_multiple(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0, 3.0, 3.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0, 2.0, 4.0]);
        // already aligned: no node recorded
        let n = tape.len();
        let z = tape.pad_replicate_to_multiple(y, 3).unwrap();
        assert_eq!((z, tape.len()), (y, n));
    }
}
