//! 2-D convolution lowered to matrix products (im2col).

use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[cin, h, w]` into a `rows x cols` patch matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let n = self.cols();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds patch gradients into `img`.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let n = self.cols();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct Conv2dRule {
    geo: Geometry,
    has_bias: bool,
}

impl<T: Real> Backward<T> for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let [batch, cout, _, _] = grad.dims4().expect("conv2d grad rank");
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_plane = geo.cin * geo.h * geo.w;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
        let mut gk = needs[1].then(|| Tensor::zeros(k.shape().to_vec()));
        let mut gb = (self.has_bias && needs[2]).then(|| Tensor::zeros(vec![cout]));
        let mut cols = vec![T::zero(); rows * ncols];
        for b in 0..batch {
            let gy = &grad.data()[b * cout * ncols..(b + 1) * cout * ncols];
            if let Some(gk) = gk.as_mut() {
                geo.im2col(&x.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
                // dK[cout, rows] += dY[cout, n] * cols^T[n, rows]
                T::gemm(
                    cout,
                    ncols,
                    rows,
                    T::one(),
                    gy,
                    (ncols, 1),
                    &cols,
                    (1, ncols),
                    T::one(),
                    gk.data_mut(),
                    (rows, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                // dcols[rows, n] = K^T[rows, cout] * dY[cout, n]
                T::gemm(
                    rows,
                    cout,
                    ncols,
                    T::one(),
                    k.data(),
                    (1, rows),
                    gy,
                    (ncols, 1),
                    T::zero(),
                    &mut cols,
                    (ncols, 1),
                );
                geo.col2im(&cols, &mut gx.data_mut()[b * in_plane..(b + 1) * in_plane]);
            }
            if let Some(gb) = gb.as_mut() {
                for (o, acc) in gb.data_mut().iter_mut().enumerate() {
                    *acc += gy[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
                }
            }
        }
        let mut out = vec![gx, gk];
        if self.has_bias {
            out.push(gb);
        }
        out
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input [B, Cin, H, W]` with `kernel [Cout, Cin, kh, kw]`,
    /// plus an optional per-output-channel `bias [Cout]`.
    ///
    /// Output extent is `(H + 2 * padding - kh) / stride + 1`, which must divide exactly.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = self.value(input).dims4()?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4()?;
        if kcin != cin {
            return shape_err(format!("conv2d: kernel expects {kcin} input channels, got {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d: kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be positive");
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return shape_err(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.value(b).shape()
                ));
            }
        }
        let extent = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * padding)
                .checked_sub(k)
                .ok_or_else(|| crate::Error::Shape(format!("conv2d: kernel {k} larger than padded input {n}+2*{padding}")))?;
            if span % stride != 0 {
                return shape_err(format!(
                    "conv2d: non-integral output extent ({n} + 2*{padding} - {k}) / {stride}"
                ));
            }
            Ok(span / stride + 1)
        };
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: extent(h, kh)?,
            wo: extent(w, kw)?,
        };
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_plane = cin * h * w;
        let mut out = vec![T::zero(); batch * cout * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let bias_data = bias.map(|b| self.value(b).data());
            for b in 0..batch {
                let y = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
                if let Some(bd) = bias_data {
                    for (o, &bv) in bd.iter().enumerate() {
                        y[o * ncols..(o + 1) * ncols].fill(bv);
                    }
                }
                geo.im2col(&x[b * in_plane..(b + 1) * in_plane], &mut cols);
                T::gemm(
                    cout,
                    rows,
                    ncols,
                    T::one(),
                    k,
                    (rows, 1),
                    &cols,
                    (ncols, 1),
                    if bias.is_some() { T::one() } else { T::zero() },
                    y,
                    (ncols, 1),
                );
            }
        }
        let value = Tensor::new(vec![batch, cout, geo.ho, geo.wo], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.record(
            value,
            &parents,
            Box::new(Conv2dRule {
                geo,
                has_bias: bias.is_some(),
            }),
        )
    }
}
