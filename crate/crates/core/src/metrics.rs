//! Dice overlap, Hausdorff distance and mean/std aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::LabelMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// Dice of every class, background included.
    pub per_class: Vec<f64>,
    /// Mean over classes `1..k`.
    pub mean: f64,
}

impl DiceResult {
    pub fn foreground(&self) -> &[f64] {
        &self.per_class[1..]
    }
}

/// `2 |P & T| / (|P| + |T|)` per class; 1 when the class is absent from both.
pub fn dice(pred: &LabelMask, truth: &LabelMask, k: usize) -> Result<DiceResult> {
    pred.same_extent(truth)?;
    pred.check_classes(k)?;
    truth.check_classes(k)?;
    let mut inter = vec![0usize; k];
    let mut np = vec![0usize; k];
    let mut nt = vec![0usize; k];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        np[p as usize] += 1;
        nt[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let denom = np[c] + nt[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    let mean = per_class[1..].iter().sum::<f64>() / (k - 1).max(1) as f64;
    Ok(DiceResult { per_class, mean })
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never walks below the first parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `inside` holds. `inside` must contain at least one pixel.
pub fn squared_distance_transform(inside: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = inside.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt_1d(&col, &mut out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&row, &mut grid[y * w..(y + 1) * w], &mut v, &mut z);
    }
    grid
}

/// Distances from each pixel of `from` to the nearest pixel of `to`.
fn directed_distances(from: &[bool], to: &[bool], h: usize, w: usize) -> Vec<f64> {
    let dt = squared_distance_transform(to, h, w);
    from.iter()
        .zip(&dt)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

fn class_sets(pred: &LabelMask, truth: &LabelMask, class: u8) -> (Vec<bool>, Vec<bool>) {
    (
        pred.data().iter().map(|&c| c == class).collect(),
        truth.data().iter().map(|&c| c == class).collect(),
    )
}

/// Symmetric Hausdorff distance in pixels between the `class` regions. Both
/// empty gives 0; exactly one empty gives infinity.
pub fn hausdorff(pred: &LabelMask, truth: &LabelMask, class: u8) -> Result<f64> {
    hausdorff_percentile(pred, truth, class, 100.0)
}

/// Like [`hausdorff`] but taking the `q`-th percentile (nearest rank) of
/// each directed distance set instead of its maximum.
pub fn hausdorff_percentile(pred: &LabelMask, truth: &LabelMask, class: u8, q: f64) -> Result<f64> {
    pred.same_extent(truth)?;
    let (p, t) = class_sets(pred, truth, class);
    let (pn, tn) = (p.iter().any(|&b| b), t.iter().any(|&b| b));
    match (pn, tn) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let (h, w) = (pred.height(), pred.width());
    let pick = |mut d: Vec<f64>| {
        d.sort_by(f64::total_cmp);
        let rank = ((q / 100.0) * d.len() as f64).ceil().max(1.0) as usize;
        d[rank.min(d.len()) - 1]
    };
    Ok(pick(directed_distances(&p, &t, h, w)).max(pick(directed_distances(&t, &p, h, w))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HausdorffResult {
    /// Distance of each foreground class `1..k`.
    pub per_class: Vec<f64>,
    /// Mean of the finite entries.
    pub mean: f64,
    /// Entries left out of the mean because one mask was empty.
    pub infinite: usize,
}

pub fn hausdorff_all(pred: &LabelMask, truth: &LabelMask, k: usize, percentile: Option<f64>) -> Result<HausdorffResult> {
    let per_class = (1..k)
        .map(|c| hausdorff_percentile(pred, truth, c as u8, percentile.unwrap_or(100.0)))
        .collect::<Result<Vec<_>>>()?;
    let finite: Vec<f64> = per_class.iter().copied().filter(|d| d.is_finite()).collect();
    let mean = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(HausdorffResult {
        infinite: per_class.len() - finite.len(),
        per_class,
        mean,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// `None` for an empty input. Non-finite values are skipped.
    pub fn of(values: &[f64]) -> Option<Self> {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        })
    }

    /// `mean(std)` with four decimals.
    pub fn display(&self) -> String {
        format!("{:.4}({:.4})", self.mean, self.std)
    }
}

/// Scores of one predicted mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dice: DiceResult,
    pub hausdorff: HausdorffResult,
}

pub fn score(image_id: &str, pred: &LabelMask, truth: &LabelMask, k: usize) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        image_id: image_id.to_string(),
        dice: dice(pred, truth, k)?,
        hausdorff: hausdorff_all(pred, truth, k, None)?,
    })
}

fn fmt_hd(d: f64) -> String {
    if d.is_finite() {
        format!("{d:.6}")
    } else {
        "inf".into()
    }
}

/// `image_id,class,dice,hd`, one row per foreground class.
pub fn metrics_csv(rows: &[ImageMetrics]) -> String {
    let mut out = String::from("image_id,class,dice,hd\n");
    for r in rows {
        for (i, (d, h)) in r.dice.foreground().iter().zip(&r.hausdorff.per_class).enumerate() {
            let _ = writeln!(out, "{},{},{:.6},{}", r.image_id, i + 1, d, fmt_hd(*h));
        }
    }
    out
}

/// Mean/std of Dice and Hausdorff over images, overall and per class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub images: usize,
    pub dice_mean: Option<Summary>,
    pub hd_mean: Option<Summary>,
    pub dice_per_class: Vec<Option<Summary>>,
    pub hd_per_class: Vec<Option<Summary>>,
    /// Hausdorff entries excluded for an empty mask.
    pub hd_infinite: usize,
}

pub fn aggregate(rows: &[ImageMetrics]) -> AggregateTable {
    let Some(first) = rows.first() else {
        return AggregateTable::default();
    };
    let classes = first.hausdorff.per_class.len();
    let col = |f: &dyn Fn(&ImageMetrics) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
    AggregateTable {
        images: rows.len(),
        dice_mean: col(&|r| r.dice.mean),
        hd_mean: col(&|r| r.hausdorff.mean),
        dice_per_class: (0..classes).map(|c| col(&|r| r.dice.foreground()[c])).collect(),
        hd_per_class: (0..classes).map(|c| col(&|r| r.hausdorff.per_class[c])).collect(),
        hd_infinite: rows.iter().map(|r| r.hausdorff.infinite).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dt_handles_ties_and_borders() {
        let mut inside = vec![false; 5 * 7];
        inside[0] = true;
        inside[5 * 7 - 1] = true;
        let dt = squared_distance_transform(&inside, 5, 7);
        assert_eq!(dt[0], 0.0);
        assert_eq!(dt[3], 9.0);
        assert_eq!(dt[2 * 7 + 3], 13.0);
    }

    #[test]
    fn summary_of_empty_is_none() {
        assert!(Summary::of(&[]).is_none());
        assert!(Summary::of(&[f64::INFINITY]).is_none());
    }

    #[test]
    fn percentile_variant_is_not_larger() {
        let truth = LabelMask::new(1, 10, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 0]).unwrap();
        let pred = LabelMask::new(1, 10, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let full = hausdorff(&pred, &truth, 1).unwrap();
        let p95 = hausdorff_percentile(&pred, &truth, 1, 95.0).unwrap();
        assert_eq!(full, 8.0);
        assert!(p95 <= full);
    }
}
