use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Maps each input element to its output slot when reducing `axes` away
/// (reduced axes are kept with extent 1).
fn output_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let mut out_strides = vec![0; shape.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        out_strides[i] = if axes.contains(&i) { 0 } else { stride };
        stride *= out_shape[i];
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

struct ReduceRule<T> {
    /// Output slot per input element; `None` for a full reduction.
    map: Option<Vec<usize>>,
    scale: T,
    kind: Reduction,
}

impl<T: Real> Backward<T> for ReduceRule<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let g = grad.data();
        let out = match &self.map {
            None => Tensor::full(x.shape().to_vec(), g[0] * self.scale),
            Some(map) => Tensor::from_fn(x.shape().to_vec(), |i| g[map[i]] * self.scale),
        };
        vec![Some(out)]
    }
}

impl<T: Real> Tape<T> {
    /// Full reduction to a one-element tensor.
    pub fn reduce_all(&mut self, kind: Reduction, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel();
        let scale = match kind {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::lit(n as f64),
        };
        let out = Tensor::scalar(t.sum() * scale);
        self.record(out, &[x], Box::new(ReduceRule { map: None, scale, kind }))
    }

    /// Reduction over `axes`, which are kept with extent 1.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axes.is_empty() {
            return shape_err("reduction over an empty axis list");
        }
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return shape_err(format!("axis {bad} out of range for shape {shape:?}"));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let scale = match kind {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::lit(count as f64),
        };
        let (out_shape, map) = output_index_map(&shape, axes);
        let mut out = Tensor::zeros(out_shape);
        {
            let o = out.data_mut();
            for (v, &slot) in self.value(x).data().iter().zip(&map) {
                o[slot] += *v;
            }
            for v in o.iter_mut() {
                *v *= scale;
            }
        }
        self.record(
            out,
            &[x],
            Box::new(ReduceRule {
                map: Some(map),
                scale,
                kind,
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce_all(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce_all(Reduction::Mean, x)
    }
}
