//! Intensity-only segmentation.
//!
//! Projection: the needle shadow is darker than its surroundings, so each
//! pixel is scored by its contrast against a median background taken along
//! the column and along the row (whichever is brighter; the needle can only
//! pull a median down). Dropped B-scans project to zero rows and are masked.
//!
//! B-scan: after a small box blur, everything above half the 99.9th
//! percentile is bright. Long vertical bright runs are needle, thin ones are
//! layer ridges: the topmost is the ILM, the strongest one below it the RPE.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::projection::AxialProjectionImage;
use crate::segmentation::{write_tent, BScanMasks, MaskClass, Segmenter, SoftMask};
use crate::slicing::VirtualBScan;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BaselineParams {
    /// Half-window of the column median, rows.
    pub background_rows: usize,
    /// Half-window of the row median, columns, sampled every
    /// `background_col_step`.
    pub background_cols: usize,
    pub background_col_step: usize,
    /// Relative darkening `d` maps to `1 − exp(−d / contrast)`; graded, so
    /// the confidence filter sees few ties.
    pub contrast: f64,
    /// Where the score reaches 0.5, darkening is averaged over this many
    /// valid rows on either side, so the footprint centre ranks above its
    /// edges.
    pub footprint_rows: usize,
    /// Box blur half-size (columns, rows).
    pub smooth_radius: [usize; 2],
    pub percentile: f64,
    pub threshold_ratio: f64,
    pub min_needle_rows: usize,
    pub layer_gap_rows: usize,
    pub tent_half_width: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            background_rows: 15,
            background_cols: 60,
            background_col_step: 4,
            contrast: 0.2,
            footprint_rows: 2,
            smooth_radius: [2, 2],
            percentile: 0.999,
            threshold_ratio: 0.5,
            min_needle_rows: 12,
            layer_gap_rows: 8,
            tent_half_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BaselineSegmenter {
    pub params: BaselineParams,
}

impl BaselineSegmenter {
    pub fn new(params: BaselineParams) -> Self {
        Self { params }
    }
}

impl Segmenter for BaselineSegmenter {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn segment_projection(&self, image: &AxialProjectionImage) -> SoftMask {
        let p = &self.params;
        let (w, h) = (image.width, image.height);
        let mut mask = SoftMask::for_projection(image, MaskClass::Needle);
        let dropped = image.zero_rows();
        let step = p.background_col_step.max(1);
        let mut dark = vec![0.0f64; w * h];
        let mut buf: Vec<f32> = Vec::with_capacity(2 * p.background_rows.max(p.background_cols) + 1);
        for y in (0..h).filter(|&y| !dropped[y]) {
            let rows = y.saturating_sub(p.background_rows)..(y + p.background_rows + 1).min(h);
            for x in 0..w {
                buf.clear();
                buf.extend(rows.clone().filter(|&r| !dropped[r]).map(|r| image.at(x, r)));
                let vertical = math::median_f32(&mut buf).unwrap_or(0.0);
                buf.clear();
                let lo = x.saturating_sub(p.background_cols);
                let hi = (x + p.background_cols + 1).min(w);
                buf.extend((lo..hi).step_by(step).map(|c| image.at(c, y)));
                let horizontal = math::median_f32(&mut buf).unwrap_or(0.0);
                let bg = vertical.max(horizontal) as f64;
                if bg > 0.0 {
                    dark[y * w + x] = ((bg - image.at(x, y) as f64) / bg).max(0.0);
                }
            }
        }
        let gate = p.contrast * core::f64::consts::LN_2;
        for y in (0..h).filter(|&y| !dropped[y]) {
            let rows = y.saturating_sub(p.footprint_rows)..(y + p.footprint_rows + 1).min(h);
            for x in 0..w {
                let mut d = dark[y * w + x];
                if d >= gate {
                    let (sum, n) = rows
                        .clone()
                        .filter(|&r| !dropped[r])
                        .fold((0.0, 0.0), |(s, n), r| (s + dark[r * w + x], n + 1.0));
                    d = sum / n;
                }
                mask.set(x, y, (1.0 - math::exp(-d / p.contrast)) as f32);
            }
        }
        mask
    }

    fn segment_bscan(&self, image: &VirtualBScan) -> BScanMasks {
        let p = &self.params;
        let g = &image.geometry;
        let (w, h) = (g.width, g.height);
        let mut needle = SoftMask::for_slice(g, MaskClass::Needle);
        let mut ilm = SoftMask::for_slice(g, MaskClass::Ilm);
        let mut rpe = SoftMask::for_slice(g, MaskClass::Rpe);
        let smooth = box_blur(&image.pixels, w, h, p.smooth_radius);

        let mut sample: Vec<f32> = (0..w)
            .filter(|&c| image.valid[c])
            .flat_map(|c| (0..h).map(move |r| (c, r)))
            .map(|(c, r)| smooth[r * w + c])
            .collect();
        if sample.is_empty() {
            return BScanMasks { needle, ilm, rpe };
        }
        let k = math::floor(p.percentile.clamp(0.0, 1.0) * (sample.len() - 1) as f64) as usize;
        let (_, &mut hi, _) = sample.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
        let threshold = (p.threshold_ratio * hi as f64) as f32;
        if !(hi > 0.0 && threshold < hi) {
            return BScanMasks { needle, ilm, rpe };
        }
        let span = hi - threshold;

        let mut ridges: Vec<Ridge> = Vec::new();
        for col in (0..w).filter(|&c| image.valid[c]) {
            ridges.clear();
            let mut row = 0;
            while row < h {
                if smooth[row * w + col] <= threshold {
                    row += 1;
                    continue;
                }
                let start = row;
                while row < h && smooth[row * w + col] > threshold {
                    row += 1;
                }
                if row - start >= p.min_needle_rows {
                    for r in start..row {
                        let s = smooth[r * w + col];
                        needle.set(col, r, 0.5 + 0.5 * ((s - threshold) / span).min(1.0));
                    }
                } else {
                    ridges.push(Ridge::measure(&smooth, w, col, start, row, threshold));
                }
            }
            let Some(first) = ridges.first() else { continue };
            let ilm_center = first.center;
            let below = ridges
                .iter()
                .filter(|r| r.center >= ilm_center + p.layer_gap_rows as f64)
                .max_by(|a, b| a.peak.total_cmp(&b.peak));
            if let Some(r) = below {
                write_tent(&mut ilm, col, ilm_center, p.tent_half_width, 1.0);
                write_tent(&mut rpe, col, r.center, p.tent_half_width, 1.0);
            }
        }
        BScanMasks { needle, ilm, rpe }
    }
}

/// Thin bright run in one column.
struct Ridge {
    /// Centroid of the excess over the threshold, fractional row.
    center: f64,
    peak: f32,
}

impl Ridge {
    fn measure(smooth: &[f32], w: usize, col: usize, start: usize, end: usize, threshold: f32) -> Self {
        let (mut s, mut sr, mut peak) = (0.0f64, 0.0f64, 0.0f32);
        for r in start..end {
            let v = smooth[r * w + col];
            let e = (v - threshold) as f64;
            s += e;
            sr += e * r as f64;
            peak = peak.max(v);
        }
        Self { center: sr / s, peak }
    }
}

/// Separable box mean with windows clipped at the image border.
fn box_blur(src: &[f32], w: usize, h: usize, radius: [usize; 2]) -> Vec<f32> {
    let mut tmp = vec![0f32; w * h];
    let [rc, rr] = radius;
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut tmp[r * w..(r + 1) * w];
        running_mean(row, 1, w, rc, |i, v| out[i] = v);
    }
    let mut dst = vec![0f32; w * h];
    let mut column = vec![0f32; h];
    for c in 0..w {
        for r in 0..h {
            column[r] = tmp[r * w + c];
        }
        running_mean(&column, 1, h, rr, |r, v| dst[r * w + c] = v);
    }
    dst
}

fn running_mean(data: &[f32], stride: usize, n: usize, radius: usize, mut put: impl FnMut(usize, f32)) {
    let mut sum = 0f64;
    let mut lo = 0usize;
    let mut hi = 0usize;
    for i in 0..n {
        let want_hi = (i + radius + 1).min(n);
        let want_lo = i.saturating_sub(radius);
        while hi < want_hi {
            sum += data[hi * stride] as f64;
            hi += 1;
        }
        while lo < want_lo {
            sum -= data[lo * stride] as f64;
            lo += 1;
        }
        put(i, (sum / (hi - lo) as f64) as f32);
    }
}
