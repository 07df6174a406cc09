use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use octnav::dto::{PlanJson, PoseJson};
use octnav::io::{load_scene, load_volume, rescale_u16, save_json, save_volume, write_pgm16, write_pgm8, RescaleSidecar};
use octnav::pipeline::{
    append_trial_log, benchmark, estimate, make_segmenter, plan, read_trial_log, replay, run_trial, PipelineConfig,
};
use octnav::scenarios::{generate_scenario, TargetRegion};
use octnav::server::{serve, Session};
use octnav_core::projection::axial_projection;
use octnav_core::slicing::{tool_aligned_plane, virtual_bscan_skipping};
use octnav_core::{MetricPoint, PhantomScene, ProjectionOp, SoftMask};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "octnav", version, about = "OCT-guided needle navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom scenes and rendering.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Axial projection of a volume as 16-bit PGM plus JSON sidecar.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "mean")]
        op: ProjectionOp,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tool-aligned virtual B-scan as 16-bit PGM plus JSON sidecar.
    Slice {
        #[arg(long = "in")]
        input: PathBuf,
        /// Degrees.
        #[arg(long, allow_hyphen_values = true)]
        theta_z: f64,
        #[arg(long, allow_hyphen_values = true)]
        tx: f64,
        #[arg(long, allow_hyphen_values = true)]
        ty: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Needle pose of a volume, printed as JSON.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Ground-truth scene, required by the oracle segmenter.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the segmentation masks as 8-bit PGMs here.
        #[arg(long)]
        masks_dir: Option<PathBuf>,
    },
    /// Closed-loop trial: plan preview, and with --yes execution.
    Run {
        #[arg(long)]
        scene: PathBuf,
        /// Target in the volume frame, µm: X,Y,Z.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        target: MetricPoint,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trial log (CSV), appended to.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trial_id: u64,
        /// Approve execution.
        #[arg(long)]
        yes: bool,
    },
    /// Re-runs every trial of a log and compares errors.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Times the estimate and plan stages.
    Bench {
        /// Volume to time on; defaults to a render of --scene or the default scene.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        target: Option<MetricPoint>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// HTTP API for the operator console.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Renders a scene to an .ioct volume.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the default scene as JSON.
    Example {
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a random scene with a reachable target.
    Scenario {
        #[arg(long)]
        region: TargetRegion,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene JSON; the target is printed.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_point(s: &str) -> Result<MetricPoint, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(MetricPoint::new(x, y, z)),
        _ => Err(format!("expected X,Y,Z, got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let config: PipelineConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_image(out: &Path, pixels: &[f32], width: usize, height: usize, operator: Option<String>, spacing: [f64; 2]) -> Result<()> {
    let (data, min, max) = rescale_u16(pixels);
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_pgm16(BufWriter::new(file), width, height, &data)?;
    let sidecar = RescaleSidecar { width, height, min, max, operator, spacing_um: spacing };
    save_json(out.with_extension("json"), &sidecar)?;
    Ok(())
}

fn write_mask(dir: &Path, name: &str, mask: &SoftMask) -> Result<()> {
    let path = dir.join(format!("{name}.pgm"));
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_pgm8(BufWriter::new(file), mask.width, mask.height, &mask.to_u8())?;
    Ok(())
}

#[derive(Serialize)]
struct RunPreview {
    pose: PoseJson,
    plan: PlanJson,
    approved: bool,
}

#[derive(Serialize)]
struct ReplayRow {
    trial_id: u64,
    logged_error_um: f64,
    replayed_error_um: f64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Phantom { command } => match command {
            PhantomCommand::Render { scene, out } => {
                let volume = load_scene(&scene)?.render()?;
                save_volume(&out, &volume)?;
            }
            PhantomCommand::Example { out } => save_json(&out, &PhantomScene::default())?,
            PhantomCommand::Scenario { region, seed, out } => {
                let s = generate_scenario(region, seed);
                save_json(&out, &s.scene)?;
                print_json(&s.target.to_array())?;
            }
        },
        Command::Project { input, op, out } => {
            let volume = load_volume(&input)?;
            let p = axial_projection(&volume, op);
            write_image(&out, &p.pixels, p.width, p.height, Some(op.name().into()), p.spacing)?;
        }
        Command::Slice { input, theta_z, tx, ty, out } => {
            let volume = load_volume(&input)?;
            let dropped = axial_projection(&volume, ProjectionOp::Mean).zero_rows();
            let plane = tool_aligned_plane(theta_z.to_radians(), tx, ty, volume.geometry())?;
            let b = virtual_bscan_skipping(&volume, &plane, None, None, &dropped)?;
            let g = &b.geometry;
            write_image(&out, &b.pixels, g.width, g.height, None, [g.u_spacing, g.z_spacing])?;
        }
        Command::Estimate { input, scene, config, masks_dir } => {
            let config = load_config(config.as_deref())?;
            let volume = load_volume(&input)?;
            let scene = scene.map(load_scene).transpose()?;
            let segmenter = make_segmenter(&config, scene.as_ref())?;
            let est = estimate(&volume, segmenter.as_ref(), &config)?;
            if let Some(dir) = masks_dir {
                std::fs::create_dir_all(&dir)?;
                write_mask(&dir, "projection_needle", &est.projection_mask)?;
                write_mask(&dir, "slice_needle", &est.slice_masks.needle)?;
                write_mask(&dir, "slice_ilm", &est.slice_masks.ilm)?;
                write_mask(&dir, "slice_rpe", &est.slice_masks.rpe)?;
            }
            print_json(&PoseJson::from(&est.pose))?;
        }
        Command::Run { scene, target, config, log, trial_id, yes } => {
            let config = load_config(config.as_deref())?;
            let name = scene_name(&scene);
            let scene = load_scene(&scene)?;
            if !yes {
                let volume = scene.render()?;
                let segmenter = make_segmenter(&config, Some(&scene))?;
                let est = estimate(&volume, segmenter.as_ref(), &config)?;
                let outcome = plan(&volume, &est.pose, &est.dropped, &target, segmenter.as_ref(), &config)?;
                print_json(&RunPreview {
                    pose: PoseJson::from(&est.pose),
                    plan: PlanJson::from(&outcome.plan),
                    approved: false,
                })?;
                eprintln!("not executed; pass --yes to approve");
                return Ok(());
            }
            let record = run_trial(&scene, &name, &target, &config, trial_id)?;
            if let Some(log) = log {
                append_trial_log(&log, &record)?;
            }
            print_json(&record)?;
        }
        Command::Replay { log, scene, config } => {
            let config = load_config(config.as_deref())?;
            let scene = load_scene(&scene)?;
            let mut rows = Vec::new();
            for row in read_trial_log(&log)? {
                let record = replay(&row, &scene, &config)?;
                rows.push(ReplayRow {
                    trial_id: row.trial_id,
                    logged_error_um: row.error_um,
                    replayed_error_um: record.error_um,
                });
            }
            print_json(&rows)?;
        }
        Command::Bench { input, scene, config, target, repetitions } => {
            let config = load_config(config.as_deref())?;
            let scene = match scene {
                Some(p) => load_scene(&p)?,
                None => PhantomScene::default(),
            };
            let volume = match input {
                Some(p) => load_volume(&p)?,
                None => scene.render()?,
            };
            let target = match target {
                Some(t) => t,
                None => default_target(&scene)?,
            };
            let segmenter = make_segmenter(&config, Some(&scene))?;
            print_json(&benchmark(&volume, segmenter.as_ref(), &target, &config, repetitions)?)?;
        }
        Command::Serve { addr, scene, config, log } => {
            let config = load_config(config.as_deref())?;
            let (scene, name) = match scene {
                Some(p) => (load_scene(&p)?, scene_name(&p)),
                None => (PhantomScene::default(), "default".to_string()),
            };
            let session = Session::new(scene, name, config, log)?;
            let runtime = tokio::runtime::Runtime::new()?;
            eprintln!("listening on {addr}");
            runtime.block_on(serve(&addr, session))?;
        }
    }
    Ok(())
}

/// A point 300 µm along the true needle path, for timing runs.
fn default_target(scene: &PhantomScene) -> Result<MetricPoint> {
    let Some(pose) = scene.needle_in_volume() else {
        bail!("scene has no needle; pass --target");
    };
    Ok(MetricPoint::from_vector(&(pose.tip.to_vector() + pose.direction() * 300.0)))
}
