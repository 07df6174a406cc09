//! Needle and retinal-layer segmentation.
//!
//! Segmenters produce soft score maps. Two implementations ship: the
//! [`oracle`] reads the answer off a [`PhantomScene`](crate::PhantomScene),
//! the [`baseline`] works on image intensities alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::projection::AxialProjectionImage;
use crate::slicing::{SliceGeometry, VirtualBScan};

pub mod baseline;
pub mod oracle;

pub use baseline::BaselineSegmenter;
pub use oracle::OracleSegmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MaskClass {
    Needle,
    Ilm,
    Rpe,
}

/// Per-pixel scores in [0, 1] over a row-major image grid.
///
/// Pixel (c, r) sits at metric position `origin + (c, r) ⊙ spacing`: (x, y)
/// for projection masks, (u, z) for slice masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
    pub class: MaskClass,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
}

impl SoftMask {
    pub fn zeros(width: usize, height: usize, class: MaskClass, origin: [f64; 2], spacing: [f64; 2]) -> Self {
        Self {
            width,
            height,
            scores: vec![0.0; width * height],
            class,
            origin,
            spacing,
        }
    }

    /// Empty mask on the grid of a projection image.
    pub fn for_projection(image: &AxialProjectionImage, class: MaskClass) -> Self {
        Self::zeros(image.width, image.height, class, [0.0, 0.0], image.spacing)
    }

    /// Empty mask on the grid of a slice.
    pub fn for_slice(geometry: &SliceGeometry, class: MaskClass) -> Self {
        Self::zeros(
            geometry.width,
            geometry.height,
            class,
            [geometry.u_min, 0.0],
            [geometry.u_spacing, geometry.z_spacing],
        )
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, score: f32) {
        self.scores[row * self.width + col] = score;
    }

    /// Metric position of the row-major pixel index `i`.
    #[inline]
    pub fn index_to_metric(&self, i: usize) -> [f64; 2] {
        let (c, r) = (i % self.width, i / self.width);
        [
            self.origin[0] + c as f64 * self.spacing[0],
            self.origin[1] + r as f64 * self.spacing[1],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.width * self.height {
            return Err(Error::SizeMismatch {
                expected: self.width * self.height,
                actual: self.scores.len(),
            });
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidParameter {
                name: "mask",
                reason: format!("score {s} outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Scores quantized to 8 bits (0..=255), for inspection.
    pub fn to_u8(&self) -> Vec<u8> {
        self.scores
            .iter()
            .map(|&s| math::round(s.clamp(0.0, 1.0) as f64 * 255.0) as u8)
            .collect()
    }
}

/// Masks of one B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct BScanMasks {
    pub needle: SoftMask,
    pub ilm: SoftMask,
    pub rpe: SoftMask,
}

pub trait Segmenter {
    fn name(&self) -> &'static str;

    /// Needle footprint in an axial projection.
    fn segment_projection(&self, image: &AxialProjectionImage) -> SoftMask;

    /// Needle, ILM and RPE in a (virtual) B-scan.
    fn segment_bscan(&self, image: &VirtualBScan) -> BScanMasks;
}

/// Number of pixels kept for `fraction` of `n`; products within 1e-9 of an
/// integer are not rounded up.
pub fn confidence_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = math::round(x);
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { math::ceil(x) };
    (k as usize).clamp(1, n.max(1))
}

/// Row-major indices of the `ceil(fraction · W · H)` highest-scoring pixels,
/// best first; equal scores are ordered by index.
pub fn confidence_filter(mask: &SoftMask, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "fraction",
            reason: format!("{fraction} outside (0, 1]"),
        });
    }
    let n = mask.scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = confidence_count(fraction, n);
    let scores = &mask.scores;
    let order = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let mut idx: Vec<u32> = (0..n as u32).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx.into_iter().map(|i| i as usize).collect())
}

/// Per-column ILM/RPE depths in fractional rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBoundaries {
    pub ilm: Vec<f64>,
    pub rpe: Vec<f64>,
    pub valid: Vec<bool>,
    /// µm per row.
    pub z_spacing: f64,
}

impl LayerBoundaries {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// (ILM, RPE) depth in µm at column `col`, if valid.
    pub fn depths_um(&self, col: usize) -> Option<(f64, f64)> {
        (col < self.len() && self.valid[col]).then(|| (self.ilm[col] * self.z_spacing, self.rpe[col] * self.z_spacing))
    }

    /// Valid column closest to `col`.
    pub fn nearest_valid(&self, col: usize) -> Option<usize> {
        let n = self.len();
        (0..n)
            .flat_map(|d| [col.checked_sub(d), col.checked_add(d)])
            .flatten()
            .find(|&c| c < n && self.valid[c])
    }
}

/// Boundary per column = score-weighted mean row of each class. A column is
/// invalid when either class has total score below `min_total_score` or
/// the RPE is not below the ILM.
pub fn extract_layer_boundaries(ilm: &SoftMask, rpe: &SoftMask, min_total_score: f64) -> Result<LayerBoundaries> {
    if (ilm.width, ilm.height) != (rpe.width, rpe.height) {
        return Err(Error::SizeMismatch {
            expected: ilm.width * ilm.height,
            actual: rpe.width * rpe.height,
        });
    }
    let (w, h) = (ilm.width, ilm.height);
    let centroid = |m: &SoftMask, col: usize| {
        let (mut s, mut sz) = (0.0f64, 0.0f64);
        for row in 0..h {
            let v = m.at(col, row) as f64;
            s += v;
            sz += v * row as f64;
        }
        (s >= min_total_score && s > 0.0).then(|| sz / s)
    };
    let mut out = LayerBoundaries {
        ilm: vec![f64::NAN; w],
        rpe: vec![f64::NAN; w],
        valid: vec![false; w],
        z_spacing: ilm.spacing[1],
    };
    for col in 0..w {
        if let (Some(a), Some(b)) = (centroid(ilm, col), centroid(rpe, col)) {
            out.ilm[col] = a;
            out.rpe[col] = b;
            out.valid[col] = b > a;
        }
    }
    Ok(out)
}

/// Writes a tent of half-width `half_width` rows peaking at fractional row
/// `center` into column `col`, scaled by `gain`.
pub(crate) fn write_tent(mask: &mut SoftMask, col: usize, center: f64, half_width: f64, gain: f32) {
    if !center.is_finite() {
        return;
    }
    let lo = math::ceil(center - half_width).max(0.0) as usize;
    let hi = math::floor(center + half_width);
    if hi < 0.0 {
        return;
    }
    let hi = (hi as usize).min(mask.height.saturating_sub(1));
    for row in lo..=hi {
        let t = 1.0 - (row as f64 - center).abs() / half_width;
        if t > 0.0 {
            mask.set(col, row, (t as f32 * gain).clamp(0.0, 1.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, scores: Vec<f32>) -> SoftMask {
        SoftMask { scores, ..SoftMask::zeros(w, h, MaskClass::Needle, [0.0; 2], [1.0; 2]) }
    }

    #[test]
    fn fraction_one_keeps_all() {
        let m = mask(3, 2, vec![0.1, 0.5, 0.5, 0.0, 0.9, 0.2]);
        let all = confidence_filter(&m, 1.0).unwrap();
        assert_eq!(all, vec![4, 1, 2, 5, 0, 3]);
    }

    #[test]
    fn one_percent_of_default_projection() {
        let m = SoftMask::zeros(1000, 100, MaskClass::Needle, [0.0; 2], [2.5, 25.0]);
        assert_eq!(confidence_filter(&m, 0.01).unwrap().len(), 1000);
        assert_eq!(confidence_count(0.01, 1000 * 100), 1000);
        assert_eq!(confidence_count(0.015, 10), 1);
        assert_eq!(confidence_count(0.5, 3), 2);
    }

    #[test]
    fn ties_break_by_row_major_order() {
        let m = mask(4, 1, vec![0.3, 0.7, 0.9, 0.7]);
        assert_eq!(confidence_filter(&m, 0.5).unwrap(), vec![2, 1]);
    }

    #[test]
    fn fraction_out_of_range() {
        let m = mask(2, 1, vec![0.0, 1.0]);
        assert!(confidence_filter(&m, 0.0).is_err());
        assert!(confidence_filter(&m, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn filter_matches_full_sort(scores in proptest::collection::vec(0u8..5, 1..200), fraction in 0.01f64..1.0) {
            let n = scores.len();
            let m = mask(n, 1, scores.iter().map(|&s| s as f32 / 4.0).collect());
            let got = confidence_filter(&m, fraction).unwrap();
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| m.scores[b].partial_cmp(&m.scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize);
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn flat_layer_boundaries() {
        let (w, h) = (5, 600);
        let mut ilm = SoftMask::zeros(w, h, MaskClass::Ilm, [0.0; 2], [2.5, 3.0]);
        let mut rpe = SoftMask::zeros(w, h, MaskClass::Rpe, [0.0; 2], [2.5, 3.0]);
        for c in 0..w {
            write_tent(&mut ilm, c, 300.0, 2.0, 1.0);
            write_tent(&mut rpe, c, 400.0, 2.0, if c == 4 { 0.2 } else { 1.0 });
        }
        let b = extract_layer_boundaries(&ilm, &rpe, 1.0).unwrap();
        for c in 0..4 {
            assert!(b.valid[c]);
            assert_eq!(b.ilm[c], 300.0);
            assert_eq!(b.rpe[c], 400.0);
        }
        assert!(!b.valid[4]);
        assert_eq!(b.nearest_valid(4), Some(3));
        assert_eq!(b.depths_um(0), Some((900.0, 1200.0)));
    }

    #[test]
    fn fractional_tent_centroid_is_exact() {
        let mut m = SoftMask::zeros(1, 50, MaskClass::Ilm, [0.0; 2], [1.0; 2]);
        write_tent(&mut m, 0, 20.3, 2.0, 1.0);
        let total: f64 = m.scores.iter().map(|&s| s as f64).sum();
        let c: f64 = m.scores.iter().enumerate().map(|(i, &s)| i as f64 * s as f64).sum::<f64>() / total;
        assert!((c - 20.3).abs() < 1e-6);
        assert!((total - 2.0).abs() < 1e-6);
    }
}
