use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

/// `b` may be broadcast against `a` when, after dropping leading unit
/// extents, its shape equals a trailing suffix of `a`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let core: &[usize] = {
        let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
        &b[first..]
    };
    core.len() <= a.len() && a[a.len() - core.len()..] == *core
}

struct Binary {
    op: BinaryOp,
}

impl<T: Real> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        self.op.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let nb = b.numel();
        let g = grad.data();
        let ga = needs[0].then(|| {
            let mut out = grad.clone();
            match self.op {
                BinaryOp::Add | BinaryOp::Sub => {}
                BinaryOp::Mul => {
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o = g[i] * b.data()[i % nb];
                    }
                }
                BinaryOp::Div => {
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o = g[i] / b.data()[i % nb];
                    }
                }
            }
            out
        });
        let gb = needs[1].then(|| {
            let mut out = Tensor::zeros(b.shape().to_vec());
            let ob = out.data_mut();
            for (i, &gi) in g.iter().enumerate() {
                let j = i % nb;
                ob[j] += match self.op {
                    BinaryOp::Add => gi,
                    BinaryOp::Sub => -gi,
                    BinaryOp::Mul => gi * a.data()[i],
                    BinaryOp::Div => {
                        let bj = b.data()[j];
                        -gi * a.data()[i] / (bj * bj)
                    }
                };
            }
            out
        });
        vec![ga, gb]
    }
}

#[derive(Clone, Copy)]
enum ScalarOp {
    Add,
    Mul,
    Div,
}

struct Scalar<T> {
    op: ScalarOp,
    value: T,
}

impl<T: Real> Backward<T> for Scalar<T> {
    fn name(&self) -> &'static str {
        match self.op {
            ScalarOp::Add => "add_scalar",
            ScalarOp::Mul => "mul_scalar",
            ScalarOp::Div => "div_scalar",
        }
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(match self.op {
            ScalarOp::Add => grad.clone(),
            ScalarOp::Mul => grad.scale(self.value),
            ScalarOp::Div => grad.map(|g| g / self.value),
        })]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Square,
    Abs,
    Exp,
    LogClamped(f64),
}

struct Unary {
    kind: UnaryKind,
}

impl<T: Real> Backward<T> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Square => "square",
            UnaryKind::Abs => "abs",
            UnaryKind::Exp => "exp",
            UnaryKind::LogClamped(_) => "log_clamped",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let two = T::lit(2.0);
        let mut out = grad.clone();
        for (i, g) in out.data_mut().iter_mut().enumerate() {
            let d = match self.kind {
                UnaryKind::Square => two * x[i],
                UnaryKind::Abs => {
                    if x[i] > T::zero() {
                        T::one()
                    } else if x[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Exp => y[i],
                UnaryKind::LogClamped(eps) => {
                    if x[i] > T::lit(eps) {
                        T::one() / x[i]
                    } else {
                        T::zero()
                    }
                }
            };
            *g *= d;
        }
        vec![Some(out)]
    }
}

impl<T: Real> Tape<T> {
    /// Elementwise `a (op) b`; `b` may broadcast along leading unit extents.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return shape_err(format!(
                "{}: cannot broadcast {:?} onto {:?}",
                op.name(),
                tb.shape(),
                ta.shape()
            ));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let mut out = ta.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = op.apply(*o, bd[i % nb]);
        }
        self.record(out, &[a, b], Box::new(Binary { op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, value: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + value);
        self.record(out, &[a], Box::new(Scalar { op: ScalarOp::Add, value }))
    }

    pub fn mul_scalar(&mut self, a: Var, value: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * value);
        self.record(out, &[a], Box::new(Scalar { op: ScalarOp::Mul, value }))
    }

    /// `a / value`, exact where `a == value`.
    pub fn div_scalar(&mut self, a: Var, value: T) -> Result<Var> {
        let out = self.value(a).map(|x| x / value);
        self.record(out, &[a], Box::new(Scalar { op: ScalarOp::Div, value }))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.record(out, &[a], Box::new(Unary { kind }))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a, |x| x * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a, |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a, |x| x.exp())
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        let e = T::lit(eps);
        self.unary(UnaryKind::LogClamped(eps), a, |x| x.max(e).ln())
    }
}
