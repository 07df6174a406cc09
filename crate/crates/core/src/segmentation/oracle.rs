//! Ground-truth segmentation from phantom geometry.
//!
//! Needle scores fall off radially, `1 − ½(ρ/r)²`, so the most confident
//! pixels hug the axis. Layer masks are tents of half-width two rows around
//! the true optical depth, attenuated where the needle shadows them.

use crate::math;
use crate::phantom::PhantomScene;
use crate::projection::AxialProjectionImage;
use crate::segmentation::{write_tent, BScanMasks, MaskClass, Segmenter, SoftMask};
use crate::slicing::{SliceGeometry, VirtualBScan};
use crate::volume::MetricPoint;

/// Half-width of the layer tents, rows.
pub const LAYER_TENT_ROWS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    scene: PhantomScene,
}

impl OracleSegmenter {
    pub fn new(scene: PhantomScene) -> Self {
        Self { scene }
    }

    pub fn scene(&self) -> &PhantomScene {
        &self.scene
    }

    /// Footprint mask on a `width × height` lateral grid.
    pub fn projection_mask(&self, width: usize, height: usize, spacing: [f64; 2]) -> SoftMask {
        let mut mask = SoftMask::zeros(width, height, MaskClass::Needle, [0.0, 0.0], spacing);
        for row in 0..height {
            for col in 0..width {
                let s = self.scene.footprint_score(col as f64 * spacing[0], row as f64 * spacing[1]);
                mask.set(col, row, s as f32);
            }
        }
        mask
    }

    /// Masks for the slice grid `geometry`; no image data needed.
    pub fn bscan_masks_for(&self, geometry: &SliceGeometry) -> BScanMasks {
        let mut needle = SoftMask::for_slice(geometry, MaskClass::Needle);
        let mut ilm = SoftMask::for_slice(geometry, MaskClass::Ilm);
        let mut rpe = SoftMask::for_slice(geometry, MaskClass::Rpe);
        let vol = &self.scene.geometry;
        let sz = geometry.z_spacing;
        let shadow = self.scene.appearance.shadow_factor as f32;
        for col in 0..geometry.width {
            let (x, y) = geometry.lateral_at(geometry.u_at(col as f64));
            if !vol.contains_lateral(x, y) {
                continue;
            }
            let profile = self.scene.column(x, y);
            let mut needle_bottom = f64::INFINITY;
            if let Some((a, b)) = profile.needle {
                needle_bottom = b;
                let first = math::ceil(a / sz).max(0.0) as usize;
                let last = math::floor(b / sz);
                if last >= 0.0 {
                    for row in first..=(last as usize).min(geometry.height - 1) {
                        let s = self.scene.needle_score(&MetricPoint::new(x, y, row as f64 * sz));
                        needle.set(col, row, s as f32);
                    }
                }
            }
            let gain = |depth: f64| if depth > needle_bottom { shadow } else { 1.0 };
            write_tent(&mut ilm, col, profile.ilm / sz, LAYER_TENT_ROWS, gain(profile.ilm));
            write_tent(&mut rpe, col, profile.rpe / sz, LAYER_TENT_ROWS, gain(profile.rpe));
        }
        BScanMasks { needle, ilm, rpe }
    }
}

impl Segmenter for OracleSegmenter {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn segment_projection(&self, image: &AxialProjectionImage) -> SoftMask {
        self.projection_mask(image.width, image.height, image.spacing)
    }

    fn segment_bscan(&self, image: &VirtualBScan) -> BScanMasks {
        self.bscan_masks_for(&image.geometry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{HeightField, NeedleModel};
    use crate::segmentation::extract_layer_boundaries;
    use crate::slicing::PlaneSpec;
    use crate::volume::VolumeGeometry;

    fn scene() -> PhantomScene {
        PhantomScene {
            geometry: VolumeGeometry::new([200, 20, 400], [2.5, 25.0, 3.0]).unwrap(),
            ilm_surface: HeightField::flat(600.0 / 1.38),
            rpe_surface: HeightField::flat(600.0 / 1.38 + 300.0 / 1.38),
            needle: Some(NeedleModel {
                theta_z: 0.0,
                theta_y: 0.0,
                tip: MetricPoint::new(300.0, 250.0, 150.0),
                radius: 55.0,
                length: 5000.0,
            }),
            ..PhantomScene::default()
        }
    }

    #[test]
    fn footprint_is_exact() {
        let s = scene();
        let o = OracleSegmenter::new(s.clone());
        let m = o.projection_mask(200, 20, [2.5, 25.0]);
        for row in 0..20 {
            for col in 0..200 {
                let (x, y) = (col as f64 * 2.5, row as f64 * 25.0);
                let inside = x <= 300.0 && (y - 250.0).abs() <= 55.0;
                assert_eq!(m.at(col, row) > 0.0, inside, "({col}, {row})");
            }
        }
        assert_eq!(m.at(10, 10), 1.0);
    }

    #[test]
    fn layer_boundaries_from_native_slice() {
        let s = scene();
        let o = OracleSegmenter::new(s.clone());
        let g = crate::slicing::SliceGeometry::new(&s.geometry, &PlaneSpec::native(&s.geometry, 2), None, None).unwrap();
        let masks = o.bscan_masks_for(&g);
        let b = extract_layer_boundaries(&masks.ilm, &masks.rpe, 1.0).unwrap();
        for c in 0..g.width {
            assert!(b.valid[c]);
            assert!((b.ilm[c] - 200.0).abs() < 1e-6);
            assert!((b.rpe[c] - 300.0).abs() < 1e-6);
        }
        assert!(masks.needle.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shadowed_columns_are_invalid() {
        let s = scene();
        let o = OracleSegmenter::new(s.clone());
        let g = crate::slicing::SliceGeometry::new(&s.geometry, &PlaneSpec::native(&s.geometry, 10), None, None).unwrap();
        let masks = o.bscan_masks_for(&g);
        let b = extract_layer_boundaries(&masks.ilm, &masks.rpe, 1.0).unwrap();
        for c in 0..g.width {
            let x = c as f64 * 2.5;
            assert_eq!(b.valid[c], x > 300.0, "column {c}");
        }
        // Needle axis at optical depth 150·1.38 = 207 µm, row 69.
        assert_eq!(masks.needle.at(10, 69), 1.0);
        assert_eq!(masks.needle.at(150, 69), 0.0);
    }
}
