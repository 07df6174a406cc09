//! Randomised phantom scenes with a reachable target.
//!
//! The target is drawn first; the needle tip is then placed back along the
//! (optical) insertion direction so the target is reachable by one lateral
//! alignment plus one advance.

use octnav_core::phantom::{GaussianBump, HeightField, NeedleModel};
use octnav_core::{MetricPoint, PhantomScene};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRegion {
    AboveRetina,
    InsideRetina,
    NearRpe,
}

impl TargetRegion {
    pub fn name(self) -> &'static str {
        match self {
            TargetRegion::AboveRetina => "above_retina",
            TargetRegion::InsideRetina => "inside_retina",
            TargetRegion::NearRpe => "near_rpe",
        }
    }
}

impl FromStr for TargetRegion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "above_retina" => Ok(TargetRegion::AboveRetina),
            "inside_retina" => Ok(TargetRegion::InsideRetina),
            "near_rpe" => Ok(TargetRegion::NearRpe),
            _ => Err(format!("unknown target region {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub scene: PhantomScene,
    /// Target in the volume frame (optical depth), µm.
    pub target: MetricPoint,
}

/// Lateral margin kept between the tip or target and the scan border, µm.
const MARGIN_UM: f64 = 200.0;
/// Minimum physical depth of the tip, µm. Keeps enough shaft inside the scan.
const MIN_TIP_DEPTH_UM: f64 = 250.0;
/// Minimum lateral length of needle shaft inside the scan, µm.
const MIN_SHAFT_UM: f64 = 500.0;
/// Minimum physical clearance between the tip and the ILM, µm.
const MIN_TIP_CLEARANCE_UM: f64 = 60.0;

/// Deterministic in (`region`, `seed`).
pub fn generate_scenario(region: TargetRegion, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ce_4a71_0000_0000);
    loop {
        if let Some(s) = attempt(region, seed, &mut rng) {
            return s;
        }
    }
}

fn attempt(region: TargetRegion, seed: u64, rng: &mut ChaCha8Rng) -> Option<Scenario> {
    let mut scene = PhantomScene { rng_seed: seed, ..PhantomScene::default() };
    let [mx, my, mz] = scene.geometry.max_metric();
    let ilm = HeightField {
        base: rng.random_range(950.0..1250.0),
        slope: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
        curvature: [rng.random_range(0.0..2e-5), rng.random_range(0.0..2e-5)],
        center: [rng.random_range(0.3 * mx..0.7 * mx), rng.random_range(0.3 * my..0.7 * my)],
        bumps: vec![GaussianBump {
            center: [rng.random_range(0.0..mx), rng.random_range(0.0..my)],
            amplitude: rng.random_range(-40.0..40.0),
            sigma: rng.random_range(200.0..500.0),
        }],
    };
    scene.rpe_surface = ilm.offset(rng.random_range(200.0..320.0));
    scene.ilm_surface = ilm;

    let theta_z: f64 = rng.random_range(-30f64..30.0).to_radians();
    let theta_y: f64 = rng.random_range(15f64..30.0).to_radians();
    let vx = rng.random_range(MARGIN_UM..mx - MARGIN_UM);
    let vy = rng.random_range(MARGIN_UM..my - MARGIN_UM);
    let col = scene.column(vx, vy);
    let (ilm_o, rpe_o) = (col.ilm, col.rpe);
    let (vz, delta) = match region {
        TargetRegion::AboveRetina => (ilm_o - rng.random_range(40.0..200.0), rng.random_range(100.0..350.0)),
        TargetRegion::InsideRetina => {
            let vz = rng.random_range(ilm_o + 30.0..rpe_o - 30.0);
            (vz, vz - ilm_o + rng.random_range(100.0..300.0))
        }
        TargetRegion::NearRpe => {
            let vz = rpe_o - rng.random_range(15.0..45.0);
            (vz, vz - ilm_o + rng.random_range(100.0..300.0))
        }
    };
    if vz >= mz {
        return None;
    }

    // The tip sits above the ILM, where the optical slope is n·tan θy.
    let n = scene.indices.vitreous;
    let run = delta / (n * theta_y.tan());
    let (adv, perp) = ([theta_z.cos(), -theta_z.sin()], [theta_z.sin(), theta_z.cos()]);
    let e = rng.random_range(-120.0..120.0);
    let tx = vx - run * adv[0] + e * perp[0];
    let ty = vy - run * adv[1] + e * perp[1];
    if !(MARGIN_UM..=mx - MARGIN_UM).contains(&tx) || !(MARGIN_UM..=my - MARGIN_UM).contains(&ty) {
        return None;
    }
    let tip = scene.to_physical(&MetricPoint::new(tx, ty, vz - delta));
    if tip.z < MIN_TIP_DEPTH_UM || tip.z > scene.ilm_surface.at(tx, ty) - MIN_TIP_CLEARANCE_UM {
        return None;
    }
    if visible_shaft(tip, adv, theta_y, mx, my) < MIN_SHAFT_UM {
        return None;
    }
    scene.needle = Some(NeedleModel { theta_z, theta_y, tip, ..NeedleModel::default() });
    scene.validate().ok()?;
    Some(Scenario {
        name: format!("{}-{seed}", region.name()),
        scene,
        target: MetricPoint::new(vx, vy, vz),
    })
}

/// Lateral run from the tip back to where the shaft leaves the scan, either
/// through a side or through the top.
fn visible_shaft(tip: MetricPoint, adv: [f64; 2], theta_y: f64, mx: f64, my: f64) -> f64 {
    let mut run = tip.z / theta_y.tan();
    for (p, a, hi) in [(tip.x, adv[0], mx), (tip.y, adv[1], my)] {
        if a > 1e-12 {
            run = run.min(p / a);
        } else if a < -1e-12 {
            run = run.min((hi - p) / -a);
        }
    }
    run
}
