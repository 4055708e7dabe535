//! Binary edge sketch: Sobel gradients, non-maximum suppression along the
//! quantised gradient direction, then double-threshold hysteresis.

use std::collections::VecDeque;

use reflect_autograd::{Real, Tensor};

use crate::error::{shape_err, Result};

pub const DEFAULT_LOW: f64 = 0.1;
pub const DEFAULT_HIGH: f64 = 0.2;

/// Sobel gradients with replicated borders, scaled by 1/4 so a unit step
/// has magnitude 1.
pub fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1))
                / 4.0;
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1))
                / 4.0;
        }
    }
    (gx, gy)
}

/// Thin ridges of `mag`. A pixel survives if it beats its predecessor
/// along the gradient strictly and its successor or ties it, so a plateau
/// two pixels wide keeps exactly one of them.
fn non_max_suppress(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let tan22 = std::f64::consts::FRAC_PI_8.tan();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (dy, dx): (isize, isize) = if ay <= tan22 * ax {
                (0, 1)
            } else if ax <= tan22 * ay {
                (1, 0)
            } else if (gx[i] > 0.0) == (gy[i] > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let sample = |sy: isize, sx: isize| {
                let (yy, xx) = (y as isize + sy, x as isize + sx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            if m > sample(-dy, -dx) && m >= sample(dy, dx) {
                out[i] = m;
            }
        }
    }
    out
}

/// Keeps strong pixels (`>= high`) and weak ones (`>= low`) 8-connected to
/// a strong pixel.
fn hysteresis(mag: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let mut keep = vec![false; h * w];
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| mag[i] >= high).collect();
    for &i in &queue {
        keep[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if !keep[j] && mag[j] >= low {
                    keep[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    keep
}

/// Binary edge map of a `[1, 1, H, W]` image with values in `[0, 1]`.
pub fn extract_sketch<T: Real>(image: &Tensor<T>, low: f64, high: f64) -> Result<Tensor<T>> {
    let [b, c, h, w] = image.dims4()?;
    if b != 1 || c != 1 {
        return shape_err(format!("sketch needs a single-channel image, got {:?}", image.shape()));
    }
    let img: Vec<f64> = image.data().iter().map(|v| v.to_f64_lossy()).collect();
    let (gx, gy) = sobel(&img, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let thin = non_max_suppress(&mag, &gx, &gy, h, w);
    let keep = hysteresis(&thin, h, w, low, high);
    Ok(Tensor::from_fn([1, 1, h, w], |i| if keep[i] { T::one() } else { T::zero() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Tensor::<f32>::full([1, 1, 16, 16], 0.6);
        let s = extract_sketch(&img, DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_gives_single_line() {
        let img = Tensor::<f64>::from_fn([1, 1, 12, 12], |i| if i % 12 >= 6 { 1.0 } else { 0.0 });
        let s = extract_sketch(&img, DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        for y in 0..12 {
            let row: Vec<usize> = (0..12).filter(|&x| s.data()[y * 12 + x] == 1.0).collect();
            assert_eq!(row.len(), 1, "row {y}: {row:?}");
            assert!(row[0] == 5 || row[0] == 6);
        }
    }

    #[test]
    fn weak_edges_need_a_strong_neighbour() {
        let img = Tensor::<f64>::from_fn([1, 1, 8, 8], |i| if i % 8 >= 4 { 0.15 } else { 0.0 });
        let s = extract_sketch(&img, DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}
