#![allow(dead_code)]

use octnav_core::phantom::{HeightField, NeedleModel};
use octnav_core::{MetricPoint, PhantomScene, VolumeGeometry};

/// 1000 × 1000 × 1797 µm scene; renders in a fraction of a second.
pub fn small_scene() -> PhantomScene {
    let geometry = VolumeGeometry::new([400, 40, 600], [2.5, 25.0, 3.0]).unwrap();
    let ilm = HeightField {
        base: 850.0,
        curvature: [2e-5, 2e-5],
        center: [500.0, 500.0],
        ..HeightField::flat(0.0)
    };
    PhantomScene {
        geometry,
        rpe_surface: ilm.offset(250.0),
        ilm_surface: ilm,
        needle: Some(NeedleModel {
            theta_z: 0.0,
            theta_y: 20f64.to_radians(),
            tip: MetricPoint::new(550.0, 500.0, 450.0),
            ..NeedleModel::default()
        }),
        rng_seed: 11,
        ..PhantomScene::default()
    }
}

/// A target 300 µm (optical) further along the needle, above the ILM.
pub fn target_ahead(scene: &PhantomScene) -> MetricPoint {
    let pose = scene.needle_in_volume().unwrap();
    MetricPoint::from_vector(&(pose.tip.to_vector() + pose.direction() * 300.0))
}
