//! Robust line fitting and 5-DoF needle pose estimation.
//!
//! Yaw and the lateral needle line come from the projection mask; pitch and
//! the tip come from the mask of the tool-aligned virtual B-scan. Roll is
//! ignored: the needle is rotationally symmetric.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math;
use crate::segmentation::{confidence_filter, SoftMask};
use crate::slicing::SliceGeometry;
use crate::volume::MetricPoint;

const MAX_ITERATIONS: usize = 100;
const CONVERGENCE: f64 = 1e-8;
/// Consistency constant turning a median absolute deviation into a
/// Gaussian standard deviation.
const MAD_SCALE: f64 = 1.4826;
const MEAN_AD_SCALE: f64 = 1.2533;

/// Fitted 2D line in metric coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Line2D {
    /// Unit direction.
    pub direction: [f64; 2],
    /// Point on the line (weighted centroid, shifted onto the fit).
    pub point: [f64; 2],
    /// Indices (into the fitted point slice) of points within `delta · scale`.
    pub inliers: Vec<usize>,
    /// Projections of the extreme inliers onto the line.
    pub endpoints: [[f64; 2]; 2],
    /// Robust residual scale.
    pub scale: f64,
    /// Eigenvalues (major, minor) of the weighted point covariance.
    pub spread: [f64; 2],
}

impl Line2D {
    /// Signed position of the orthogonal projection of `p` along the line.
    #[inline]
    pub fn project(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.point[0]) * self.direction[0] + (p[1] - self.point[1]) * self.direction[1]
    }

    /// Signed perpendicular distance of `p` from the line.
    #[inline]
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        (p[1] - self.point[1]) * self.direction[0] - (p[0] - self.point[0]) * self.direction[1]
    }

    #[inline]
    pub fn at(&self, t: f64) -> [f64; 2] {
        [
            self.point[0] + t * self.direction[0],
            self.point[1] + t * self.direction[1],
        ]
    }

    /// Minor over major covariance eigenvalue; near 1 for isotropic blobs.
    pub fn anisotropy_ratio(&self) -> f64 {
        if self.spread[0] > 0.0 {
            self.spread[1] / self.spread[0]
        } else {
            1.0
        }
    }

    fn flipped(mut self) -> Self {
        self.direction = [-self.direction[0], -self.direction[1]];
        self.endpoints.swap(0, 1);
        self
    }
}

/// Huber-loss line fit by iteratively reweighted least squares.
///
/// The frame is first rotated onto the principal axes of the (weighted)
/// point cloud, and `b = α + β·a` is fitted with the major axis `a` as the
/// regressor, so steep and flat lines are handled alike. `weights` defaults
/// to uniform and multiplies the Huber weights.
pub fn fit_line_huber(points: &[[f64; 2]], weights: Option<&[f64]>, delta: f64) -> Result<Line2D> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidParameter {
            name: "huber_delta",
            reason: format!("{delta} must be positive"),
        });
    }
    if let Some(w) = weights {
        if w.len() != points.len() || w.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: "one finite positive weight per point required".into(),
            });
        }
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::InvalidParameter {
            name: "points",
            reason: "non-finite coordinate".into(),
        });
    }
    let distinct = count_distinct(points);
    if distinct < 2 {
        return Err(Error::TooFewPoints(distinct));
    }
    let prior = |i: usize| weights.map_or(1.0, |w| w[i]);

    // Weighted principal axes.
    let (mut sw, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, p) in points.iter().enumerate() {
        let w = prior(i);
        sw += w;
        mx += w * p[0];
        my += w * p[1];
    }
    let (mx, my) = (mx / sw, my / sw);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for (i, p) in points.iter().enumerate() {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        let w = prior(i);
        cxx += w * dx * dx;
        cyy += w * dy * dy;
        cxy += w * dx * dy;
    }
    let (cxx, cyy, cxy) = (cxx / sw, cyy / sw, cxy / sw);
    let trace = cxx + cyy;
    if !(trace > 0.0) {
        return Err(Error::ZeroSpread);
    }
    let half_gap = math::hypot(0.5 * (cxx - cyy), cxy);
    let spread = [0.5 * trace + half_gap, (0.5 * trace - half_gap).max(0.0)];
    let phi = 0.5 * math::atan2(2.0 * cxy, cxx - cyy);
    let e1 = [math::cos(phi), math::sin(phi)];
    let e2 = [-e1[1], e1[0]];

    let n = points.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        a.push(dx * e1[0] + dy * e1[1]);
        b.push(dx * e2[0] + dy * e2[1]);
    }

    let extent = math::sqrt(spread[0]).max(1.0);
    let scale_floor = 1e-12 * extent;
    let mut w = Vec::with_capacity(n);
    w.extend((0..n).map(prior));
    let (mut alpha, mut beta) = weighted_ls(&a, &b, &w).ok_or(Error::ZeroSpread)?;
    let mut residuals: Vec<f64> = Vec::with_capacity(n);
    let mut scratch: Vec<f64> = Vec::with_capacity(n);
    let mut scale;
    for _ in 0..MAX_ITERATIONS {
        residuals.clear();
        residuals.extend(a.iter().zip(&b).map(|(a, b)| b - alpha - beta * a));
        scale = robust_scale(&residuals, &mut scratch);
        if scale <= scale_floor {
            break;
        }
        let cut = delta * scale;
        for (i, r) in residuals.iter().enumerate() {
            let r = r.abs();
            w[i] = prior(i) * if r <= cut { 1.0 } else { cut / r };
        }
        let Some((na, nb)) = weighted_ls(&a, &b, &w) else {
            break;
        };
        let change = (na - alpha).abs() + (nb - beta).abs();
        alpha = na;
        beta = nb;
        if change < CONVERGENCE {
            break;
        }
    }
    residuals.clear();
    residuals.extend(a.iter().zip(&b).map(|(a, b)| b - alpha - beta * a));
    scale = robust_scale(&residuals, &mut scratch);

    let norm = math::hypot(1.0, beta);
    let direction = [(e1[0] + beta * e2[0]) / norm, (e1[1] + beta * e2[1]) / norm];
    let point = [mx + alpha * e2[0], my + alpha * e2[1]];
    let cut = (delta * scale).max(1e-9 * extent);
    let inliers: Vec<usize> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.abs() <= cut)
        .map(|(i, _)| i)
        .collect();

    let mut line = Line2D {
        direction,
        point,
        inliers,
        endpoints: [point, point],
        scale,
        spread,
    };
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &line.inliers {
        let t = line.project(points[i]);
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    if t_min <= t_max {
        line.endpoints = [line.at(t_min), line.at(t_max)];
    }
    Ok(line)
}

fn count_distinct(points: &[[f64; 2]]) -> usize {
    match points.first() {
        None => 0,
        Some(first) => {
            if points.iter().any(|p| p != first) {
                2
            } else {
                1
            }
        }
    }
}

/// Weighted least squares `b = α + β a`.
fn weighted_ls(a: &[f64], b: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let (mut sw, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        sw += w[i];
        sa += w[i] * a[i];
        sb += w[i] * b[i];
    }
    if !(sw > 0.0) {
        return None;
    }
    let (ma, mb) = (sa / sw, sb / sw);
    let (mut saa, mut sab) = (0.0, 0.0);
    for i in 0..a.len() {
        let da = a[i] - ma;
        saa += w[i] * da * da;
        sab += w[i] * da * (b[i] - mb);
    }
    if !(saa > 0.0) {
        return None;
    }
    let beta = sab / saa;
    Some((mb - beta * ma, beta))
}

/// 1.4826 · median absolute deviation about the median. When more than half
/// the residuals coincide (points on a few pixel rows) the MAD vanishes and
/// 1.2533 · mean absolute deviation is used instead.
fn robust_scale(residuals: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(residuals);
    let med = median(scratch);
    scratch.clear();
    scratch.extend(residuals.iter().map(|r| (r - med).abs()));
    let mean_ad = scratch.iter().sum::<f64>() / scratch.len() as f64;
    let mad = median(scratch);
    if mad > 1e-9 * mean_ad {
        MAD_SCALE * mad
    } else {
        MEAN_AD_SCALE * mean_ad
    }
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Image edge the needle enters from; the advance direction points away
/// from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EntryBorder {
    #[default]
    MinusX,
    PlusX,
    MinusY,
    PlusY,
}

impl EntryBorder {
    /// Unit lateral vector pointing into the image from this edge.
    pub fn inward(self) -> [f64; 2] {
        match self {
            EntryBorder::MinusX => [1.0, 0.0],
            EntryBorder::PlusX => [-1.0, 0.0],
            EntryBorder::MinusY => [0.0, 1.0],
            EntryBorder::PlusY => [0.0, -1.0],
        }
    }
}

/// Tuning of the mask-to-pose stage.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PoseParams {
    /// Fraction of projection pixels kept by the confidence filter.
    pub confidence_fraction: f64,
    /// Fraction of B-scan pixels kept by the confidence filter.
    pub bscan_confidence_fraction: f64,
    pub huber_delta: f64,
    pub entry_border: EntryBorder,
    /// Kept pixels also need a score of at least
    /// `max(min_score, relative_score · best score)`.
    pub min_score: f64,
    pub relative_score: f64,
    /// Half-width of the corridor around the fitted line that the tip
    /// extremum is taken from, projection / slice, µm.
    pub tip_corridor_projection_um: f64,
    pub tip_corridor_slice_um: f64,
    /// Minimum major/minor spread ratio of an acceptable needle fit.
    pub min_elongation: f64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            confidence_fraction: 0.01,
            bscan_confidence_fraction: 0.01,
            huber_delta: 1.345,
            entry_border: EntryBorder::MinusX,
            min_score: 0.25,
            relative_score: 0.5,
            tip_corridor_projection_um: 25.0,
            tip_corridor_slice_um: 6.0,
            min_elongation: 4.0,
        }
    }
}

/// Confident pixels of `mask` in metric coordinates plus their scores.
fn confident_points(mask: &SoftMask, fraction: f64, params: &PoseParams) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let picked = confidence_filter(mask, fraction)?;
    let best = picked.first().map_or(0.0, |&i| mask.scores[i] as f64);
    let floor = params.min_score.max(params.relative_score * best);
    let mut points = Vec::with_capacity(picked.len());
    let mut weights = Vec::with_capacity(picked.len());
    for &i in &picked {
        let s = mask.scores[i] as f64;
        if s >= floor && s > 0.0 {
            points.push(mask.index_to_metric(i));
            weights.push(s);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((points, weights))
}

fn fit_elongated(points: &[[f64; 2]], weights: &[f64], params: &PoseParams) -> Result<Line2D> {
    let line = fit_line_huber(points, Some(weights), params.huber_delta)?;
    let ratio = line.anisotropy_ratio();
    if ratio * params.min_elongation > 1.0 {
        return Err(Error::DegenerateFit(ratio));
    }
    Ok(line)
}

/// Extreme projection along the (oriented) line among inliers close to it.
fn innermost(line: &Line2D, points: &[[f64; 2]], corridor: f64) -> f64 {
    let near = line
        .inliers
        .iter()
        .filter(|&&i| line.distance(points[i]).abs() <= corridor)
        .map(|&i| line.project(points[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    if near.is_finite() {
        near
    } else {
        points.iter().map(|&p| line.project(p)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Result of the projection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct InplaneEstimate {
    /// Yaw of the advance direction: `atan2(-d_y, d_x)`.
    pub theta_z: f64,
    /// Lateral tip on the fitted line, µm.
    pub tip: [f64; 2],
    /// Fitted line, oriented along the advance direction.
    pub line: Line2D,
}

/// Yaw and lateral needle line from the projection mask.
pub fn estimate_inplane(mask: &SoftMask, params: &PoseParams) -> Result<InplaneEstimate> {
    let (points, weights) = confident_points(mask, params.confidence_fraction, params)?;
    let mut line = fit_elongated(&points, &weights, params)?;
    let inward = params.entry_border.inward();
    if line.direction[0] * inward[0] + line.direction[1] * inward[1] < 0.0 {
        line = line.flipped();
    }
    let t = innermost(&line, &points, params.tip_corridor_projection_um);
    Ok(InplaneEstimate {
        theta_z: math::atan2(-line.direction[1], line.direction[0]),
        tip: line.at(t),
        line,
    })
}

/// Result of the slice stage, in slice metric coordinates (u, z).
#[derive(Debug, Clone, PartialEq)]
pub struct AxialEstimate {
    /// Pitch; positive when the needle descends while advancing.
    pub theta_y: f64,
    pub tip_u: f64,
    pub tip_z: f64,
    pub line: Line2D,
}

/// Pitch and tip from the needle mask of the tool-aligned slice, whose
/// horizontal axis points along the advance direction.
pub fn estimate_axial(needle: &SoftMask, params: &PoseParams) -> Result<AxialEstimate> {
    let (points, weights) = confident_points(needle, params.bscan_confidence_fraction, params)?;
    let mut line = fit_elongated(&points, &weights, params)?;
    let d = line.direction;
    if d[0] < 0.0 || (d[0] == 0.0 && d[1] < 0.0) {
        line = line.flipped();
    }
    let t = innermost(&line, &points, params.tip_corridor_slice_um);
    let [tip_u, tip_z] = line.at(t);
    Ok(AxialEstimate {
        theta_y: math::atan2(line.direction[1], line.direction[0]),
        tip_u,
        tip_z,
        line,
    })
}

/// Full 5-DoF needle pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedlePose {
    pub theta_z: f64,
    pub theta_y: f64,
    pub tip: MetricPoint,
    /// `R_z(θz) · R_y(θy)`.
    pub rotation: Matrix3<f64>,
}

pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = (math::sin(theta), math::cos(theta));
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = (math::sin(theta), math::cos(theta));
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// `R = R_z(θz) · R_y(θy) · I`.
pub fn compose_pose(theta_z: f64, theta_y: f64, tip: MetricPoint) -> NeedlePose {
    NeedlePose {
        theta_z,
        theta_y,
        tip,
        rotation: rot_z(theta_z) * rot_y(theta_y),
    }
}

impl NeedlePose {
    pub fn new(theta_z: f64, theta_y: f64, tip: MetricPoint) -> Self {
        compose_pose(theta_z, theta_y, tip)
    }

    /// Unit needle-advance direction in the volume frame.
    ///
    /// `R` rotates the needle axis x̂ in a frame whose Y and Z axes are
    /// flipped relative to the volume (Z up); mapping back gives
    /// `(cos θy cos θz, −cos θy sin θz, sin θy)`.
    pub fn direction(&self) -> Vector3<f64> {
        let d = self.rotation.column(0);
        Vector3::new(d[0], -d[1], -d[2])
    }

    /// Lateral advance direction (unit, unless the needle is vertical).
    pub fn lateral_direction(&self) -> [f64; 2] {
        [math::cos(self.theta_z), -math::sin(self.theta_z)]
    }

    pub fn is_finite(&self) -> bool {
        self.theta_z.is_finite() && self.theta_y.is_finite() && self.tip.is_finite()
    }
}

/// Combines both stages: the tip is the slice tip mapped back into the
/// volume, so its lateral position lies on the projection line.
pub fn pose_from_estimates(inplane: &InplaneEstimate, axial: &AxialEstimate, slice: &SliceGeometry) -> NeedlePose {
    let tip = slice.slice_to_metric(axial.tip_u, axial.tip_z);
    compose_pose(inplane.theta_z, axial.theta_y, tip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::MaskClass;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn collinear_points_fit_exactly() {
        let pts: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 3.0 * i as f64 - 2.0]).collect();
        let line = fit_line_huber(&pts, None, 1.345).unwrap();
        for p in &pts {
            assert_abs_diff_eq!(line.distance(*p), 0.0, epsilon = 1e-9);
        }
        assert_eq!(line.inliers.len(), 10);
        let slope = line.direction[1] / line.direction[0];
        assert_abs_diff_eq!(slope, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn rows_of_pixels_keep_inliers() {
        // Most points on the centre row: the MAD is zero.
        let mut pts = Vec::new();
        for i in 0..200 {
            pts.push([i as f64 * 2.5, 1250.0]);
        }
        for i in 0..60 {
            pts.push([i as f64 * 2.5 + 40.0, 1225.0]);
            pts.push([i as f64 * 2.5 + 40.0, 1275.0]);
        }
        let line = fit_line_huber(&pts, None, 1.345).unwrap();
        assert!(line.scale > 0.0);
        assert!(line.inliers.len() >= 200);
        assert_abs_diff_eq!(line.direction[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(line.distance([0.0, 1250.0]), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn two_points_and_vertical_lines() {
        let line = fit_line_huber(&[[1.0, 1.0], [4.0, 5.0]], None, 1.345).unwrap();
        assert_abs_diff_eq!(line.distance([1.0, 1.0]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(line.distance([4.0, 5.0]), 0.0, epsilon = 1e-12);
        let vertical: Vec<[f64; 2]> = (0..5).map(|i| [2.0, i as f64]).collect();
        let line = fit_line_huber(&vertical, None, 1.345).unwrap();
        assert_abs_diff_eq!(line.direction[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(line.point[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit_line_huber(&[], None, 1.345).unwrap_err(), Error::TooFewPoints(0));
        assert_eq!(
            fit_line_huber(&[[1.0, 1.0], [1.0, 1.0]], None, 1.345).unwrap_err(),
            Error::TooFewPoints(1)
        );
        assert!(fit_line_huber(&[[0.0, 0.0], [1.0, 0.0]], None, 0.0).is_err());
    }

    /// Independent closed-form least squares for y = a + b x.
    fn ols(points: &[[f64; 2]]) -> (f64, f64) {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p[0]).sum();
        let sy: f64 = points.iter().map(|p| p[1]).sum();
        let sxx: f64 = points.iter().map(|p| p[0] * p[0]).sum();
        let sxy: f64 = points.iter().map(|p| p[0] * p[1]).sum();
        let b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        ((sy - b * sx) / n, b)
    }

    #[test]
    fn outliers_do_not_pull_the_fit() {
        use rand_chacha::rand_core::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let clean: Vec<[f64; 2]> = (0..50)
            .map(|i| {
                let x = i as f64;
                let e: f64 = StandardNormal.sample(&mut rng);
                [x, x + e]
            })
            .collect();
        let (_, oracle_slope) = ols(&clean);
        let mut all = clean.clone();
        for k in 0..5 {
            let x = 10.0 * k as f64 + 3.0;
            all.push([x, x + 50.0]);
        }
        let line = fit_line_huber(&all, None, 1.345).unwrap();
        let slope = line.direction[1] / line.direction[0];
        assert!((slope - 1.0).abs() <= 0.05, "slope {slope}");
        assert!((slope - oracle_slope).abs() <= 0.05);
        for k in 50..55 {
            assert!(!line.inliers.contains(&k));
        }
    }

    #[test]
    fn compose_identity_and_axes() {
        let p = compose_pose(0.0, 0.0, MetricPoint::new(1.0, 2.0, 3.0));
        assert_eq!(p.rotation, Matrix3::identity());
        let p = compose_pose(core::f64::consts::FRAC_PI_2, 0.0, MetricPoint::default());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).abs().max() < 1e-15);
    }

    #[test]
    fn compose_matches_explicit_product() {
        let (z, y) = (30f64.to_radians(), 20f64.to_radians());
        let p = compose_pose(z, y, MetricPoint::default());
        let rz = [[z.cos(), -z.sin(), 0.0], [z.sin(), z.cos(), 0.0], [0.0, 0.0, 1.0]];
        let ry = [[y.cos(), 0.0, y.sin()], [0.0, 1.0, 0.0], [-y.sin(), 0.0, y.cos()]];
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| rz[i][k] * ry[k][j]).sum();
                assert_abs_diff_eq!(p.rotation[(i, j)], v, epsilon = 1e-15);
            }
        }
        let d = p.direction();
        assert_abs_diff_eq!(d[0], y.cos() * z.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], -y.cos() * z.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(d[2], y.sin(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(z in -4.0f64..4.0, y in -2.0f64..2.0) {
            let r = compose_pose(z, y, MetricPoint::default()).rotation;
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() <= 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn fit_recovers_exact_lines(angle in -3.0f64..3.0, ox in -100.0f64..100.0, oy in -100.0f64..100.0) {
            let (c, s) = (angle.cos(), angle.sin());
            let pts: Vec<[f64; 2]> = (0..20).map(|i| {
                let t = i as f64 * 7.0 - 50.0;
                [ox + t * c, oy + t * s]
            }).collect();
            let line = fit_line_huber(&pts, None, 1.345).unwrap();
            let cross = line.direction[0] * s - line.direction[1] * c;
            prop_assert!(cross.abs() <= 1e-9);
            for p in &pts {
                prop_assert!(line.distance(*p).abs() <= 1e-6);
            }
            let n = line.direction[0].hypot(line.direction[1]);
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    fn bar_mask(width: usize, height: usize, spacing: [f64; 2], f: impl Fn(f64, f64) -> f32) -> SoftMask {
        let mut m = SoftMask::zeros(width, height, MaskClass::Needle, [0.0, 0.0], spacing);
        for r in 0..height {
            for c in 0..width {
                m.scores[r * width + c] = f(c as f64 * spacing[0], r as f64 * spacing[1]);
            }
        }
        m
    }

    #[test]
    fn inplane_axis_aligned_needle() {
        // Needle along +X at y = 500 µm, entering from x = 0, tip at x = 600 µm.
        let m = bar_mask(400, 40, [2.5, 25.0], |x, y| {
            let rho = (y - 500.0).abs();
            if x <= 600.0 && rho <= 55.0 {
                (1.0 - 0.5 * (rho / 55.0).powi(2)) as f32
            } else {
                0.0
            }
        });
        let params = PoseParams { confidence_fraction: 0.02, ..PoseParams::default() };
        let est = estimate_inplane(&m, &params).unwrap();
        assert_abs_diff_eq!(est.theta_z, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(est.tip[0], 600.0, epsilon = 1e-6);
        assert_abs_diff_eq!(est.tip[1], 500.0, epsilon = 1e-6);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = bar_mask(100, 10, [2.5, 25.0], |_, _| 0.01);
        assert_eq!(estimate_inplane(&m, &PoseParams::default()).unwrap_err(), Error::EmptyMask);
        let blob = bar_mask(100, 10, [2.5, 25.0], |_, _| 1.0);
        assert!(matches!(
            estimate_inplane(&blob, &PoseParams { confidence_fraction: 1.0, ..PoseParams::default() }),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn anisotropic_spacing_enters_the_angle() {
        // Pixel line col = 4·row: slope in µm is (sy·1)/(sx·4).
        let make = |sy: f64| {
            bar_mask(200, 50, [2.5, sy], |x, y| {
                let col = x / 2.5;
                let row = y / sy;
                if (col - 4.0 * row).abs() < 0.5 { 1.0 } else { 0.0 }
            })
        };
        let params = PoseParams { confidence_fraction: 1.0, ..PoseParams::default() };
        for sy in [25.0, 50.0] {
            let est = estimate_inplane(&make(sy), &params).unwrap();
            let expected = -(sy / 10.0).atan();
            assert_abs_diff_eq!(est.theta_z, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn axial_horizontal_needle() {
        // Slice mask: needle along +u at depth 300 µm, tip at u = 900 µm.
        let m = bar_mask(600, 200, [2.5, 3.0], |u, z| {
            let rho = (z - 300.0).abs();
            if u <= 900.0 && rho <= 55.0 {
                (1.0 - 0.5 * (rho / 55.0).powi(2)) as f32
            } else {
                0.0
            }
        });
        // Keep exactly the rows within 3 µm of the axis: 3 rows × 361 columns.
        let params = PoseParams { bscan_confidence_fraction: 1083.0 / 120_000.0, ..PoseParams::default() };
        let est = estimate_axial(&m, &params).unwrap();
        assert_abs_diff_eq!(est.theta_y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(est.tip_z, 300.0, epsilon = 1e-6);
        assert_abs_diff_eq!(est.tip_u, 900.0, epsilon = 1e-6);
        let empty = bar_mask(60, 20, [2.5, 3.0], |_, _| 0.0);
        assert_eq!(estimate_axial(&empty, &PoseParams::default()).unwrap_err(), Error::EmptyMask);
    }

    proptest! {
        #[test]
        fn angles_invariant_to_score_scaling(factor in 0.5f32..1.0) {
            let base = bar_mask(300, 40, [2.5, 25.0], |x, y| {
                let d = ((y - 200.0) - 0.4 * (x - 100.0)).abs() / 1.16;
                if x <= 650.0 && d <= 55.0 { (1.0 - 0.5 * (d / 55.0).powi(2)) as f32 } else { 0.0 }
            });
            let mut scaled = base.clone();
            for s in &mut scaled.scores { *s *= factor; }
            let params = PoseParams::default();
            let a = estimate_inplane(&base, &params).unwrap();
            let b = estimate_inplane(&scaled, &params).unwrap();
            prop_assert!((a.theta_z - b.theta_z).abs() <= 1e-6);
        }
    }

    #[test]
    fn entry_border_orients_line() {
        let m = bar_mask(400, 40, [2.5, 25.0], |x, y| {
            if x >= 200.0 && (y - 500.0).abs() <= 30.0 { 1.0 } else { 0.0 }
        });
        let params = PoseParams {
            entry_border: EntryBorder::PlusX,
            confidence_fraction: 1.0,
            ..PoseParams::default()
        };
        let est = estimate_inplane(&m, &params).unwrap();
        assert_abs_diff_eq!(est.theta_z.abs(), core::f64::consts::PI, epsilon = 1e-9);
        assert_abs_diff_eq!(est.tip[0], 200.0, epsilon = 1e-9);
    }
}
