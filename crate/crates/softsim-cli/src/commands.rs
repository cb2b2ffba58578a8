//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Subcommand, ValueEnum};
use serde::Deserialize;

use softsim_core::constraints::{ConstraintSet, StiffnessBounds};
use softsim_core::geometry::{build_grid_shell, extrude_to_volumetric};
use softsim_core::harness::{
    gradcheck as core_gradcheck, mean_finite, run_experiment, run_experiment_with_mesh,
    ExperimentConfig, FrameRecord, HarnessError, Method, SweepCell,
};
use softsim_core::mapping::chamfer_points;
use softsim_core::metrics::average_future_gap;
use softsim_core::online::{init_stiffness, loss_gap, online_step, OnlineState, StiffnessPreset};
use softsim_core::solver::{pbd_step_positions, Control};
use softsim_core::{DeformableMesh, MeshKind, PointCloud, Vec3};

use crate::output;
use crate::{meshio, pointio, Failure};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Output root: `--out` wins, then `SOFTSIM_OUT_ROOT`, then `results/`.
fn resolve_out(cli_out: Option<PathBuf>, sub: &str) -> PathBuf {
    cli_out.unwrap_or_else(|| {
        let root = std::env::var_os("SOFTSIM_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("results"));
        root.join(sub)
    })
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Pbd,
    PbdRm,
    PbdRmOn,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pbd => Method::Pbd,
            MethodArg::PbdRm => Method::PbdRm,
            MethodArg::PbdRmOn => Method::PbdRmOn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PresetArg {
    K1,
    K2,
    K3,
}

impl From<PresetArg> for StiffnessPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::K1 => StiffnessPreset::K1,
            PresetArg::K2 => StiffnessPreset::K2,
            PresetArg::K3 => StiffnessPreset::K3,
        }
    }
}

/// JSON experiment config: every `ExperimentConfig` field (all optional,
/// defaulting to the thin-shell experiment), plus an optional mesh file
/// that overrides the parametric mesh spec.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(default)]
    mesh_path: Option<PathBuf>,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

fn load_config(path: Option<&Path>) -> Result<ConfigDoc, Failure> {
    match path {
        None => Ok(ConfigDoc {
            mesh_path: None,
            experiment: ExperimentConfig::thin_shell_default(),
        }),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::validation)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(Failure::validation)
        }
    }
}

#[derive(Args)]
pub struct RunArgs {
    /// Experiment config JSON; omitted fields use thin-shell defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $SOFTSIM_OUT_ROOT/run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config frame count.
    #[arg(long)]
    frames: Option<usize>,
    /// Override the config method.
    #[arg(long)]
    method: Option<MethodArg>,
    /// Override the config initialization preset.
    #[arg(long)]
    preset: Option<PresetArg>,
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(frames) = args.frames {
        cfg.frames = frames;
    }
    if let Some(method) = args.method {
        cfg.method = method.into();
    }
    if let Some(preset) = args.preset {
        cfg.preset = preset.into();
    }
}

fn classify(e: HarnessError) -> Failure {
    match e {
        HarnessError::Config(_) | HarnessError::Geometry(_) | HarnessError::Constraint(_) => {
            Failure::validation(anyhow!("{e}"))
        }
        HarnessError::Online(_) => Failure::runtime(anyhow!("{e}")),
    }
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let doc = load_config(args.config.as_deref())?;
    let mut cfg = doc.experiment;
    apply_overrides(&mut cfg, &args);
    let out_dir = resolve_out(args.out.clone(), "run");
    let output = match &doc.mesh_path {
        Some(path) => {
            let mesh = meshio::load_mesh(path).map_err(Failure::Validation)?;
            run_experiment_with_mesh(&cfg, mesh)
        }
        None => run_experiment(&cfg),
    }
    .map_err(classify)?;
    output::write_run_outputs(&out_dir, &output).map_err(Failure::Runtime)?;
    println!(
        "{} frames, method {}, results in {}",
        output.records.len(),
        cfg.method.name(),
        out_dir.display()
    );
    if let Some(frame) = output.aborted_at {
        return Err(Failure::runtime(anyhow!(
            "run aborted at frame {frame} after 5 consecutive frame failures"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GradcheckSize {
    /// 2x2 thin shell.
    Small,
    /// 4x4 thin shell.
    Large,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradcheckSize::Small)]
    size: GradcheckSize,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let (rows, cols) = match args.size {
        GradcheckSize::Small => (2, 2),
        GradcheckSize::Large => (4, 4),
    };
    let start = std::time::Instant::now();
    let report = core_gradcheck(rows, cols, 2, 10).map_err(classify)?;
    println!(
        "gradcheck {rows}x{cols}: {} parameters, max relative error {:.3e} \
         (abs {:.3e} at theta[{}]), tolerance {GRADCHECK_TOLERANCE:.0e}, {:.1}s",
        report.dims,
        report.max_rel_error,
        report.max_abs_error,
        report.worst_dim,
        start.elapsed().as_secs_f64()
    );
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Failure::runtime(anyhow!(
            "max relative gradient error {:.3e} exceeds tolerance {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SweepPreset {
    ThinShellDefault,
    VolumetricDefault,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Base experiment preset.
    #[arg(long, value_enum, default_value_t = SweepPreset::ThinShellDefault)]
    preset: SweepPreset,
    /// Base experiment config JSON (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $SOFTSIM_OUT_ROOT/sweep).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
}

pub fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut base = match &args.config {
        Some(_) => load_config(args.config.as_deref())?.experiment,
        None => match args.preset {
            SweepPreset::ThinShellDefault => ExperimentConfig::thin_shell_default(),
            SweepPreset::VolumetricDefault => ExperimentConfig::volumetric_default(),
        },
    };
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(frames) = args.frames {
        base.frames = frames;
    }
    let cells = run_sweep_parallel(&base).map_err(classify)?;
    let out_dir = resolve_out(args.out.clone(), "sweep");
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(Failure::Runtime)?;
    let csv = output::sweep_csv(&cells);
    std::fs::write(out_dir.join("sweep.csv"), &csv)
        .context("writing sweep.csv")
        .map_err(Failure::Runtime)?;
    print!("{csv}");
    Ok(())
}

/// Parallel version of the core sweep: one worker thread per cell,
/// merged back in the fixed method-by-preset order.
pub fn run_sweep_parallel(base: &ExperimentConfig) -> Result<Vec<SweepCell>, HarnessError> {
    let mut configs = Vec::new();
    for method in [Method::Pbd, Method::PbdRm, Method::PbdRmOn] {
        for preset in [StiffnessPreset::K1, StiffnessPreset::K2, StiffnessPreset::K3] {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.preset = preset;
            configs.push(cfg);
        }
    }
    let results: Vec<Result<SweepCell, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| {
                scope.spawn(move || {
                    let out = run_experiment(cfg)?;
                    Ok(SweepCell {
                        method: cfg.method,
                        preset: cfg.preset,
                        mean_e_t: mean_finite(out.records.iter().map(|r| r.e_t)),
                        mean_f_t: mean_finite(out.records.iter().map(|r| r.f_t)),
                        mean_chamfer: mean_finite(out.records.iter().map(|r| r.chamfer_gap)),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Args)]
pub struct ReplayArgs {
    /// Directory with one point cloud per frame (.ply or .csv, sorted by
    /// name) and an optional controls.csv.
    #[arg(long)]
    obs: PathBuf,
    /// Mesh JSON file for the estimator.
    #[arg(long)]
    mesh: PathBuf,
    /// Experiment config JSON for method/solver/mapping settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $SOFTSIM_OUT_ROOT/replay).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    method: Option<MethodArg>,
    #[arg(long)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?.experiment;
    if let Some(method) = args.method {
        cfg.method = method.into();
    }
    if let Some(preset) = args.preset {
        cfg.preset = preset.into();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut mesh = meshio::load_mesh(&args.mesh).map_err(Failure::Validation)?;

    let files = pointio::observation_files(&args.obs).map_err(Failure::Validation)?;
    let mut frames = files.len();
    if let Some(limit) = args.frames {
        frames = frames.min(limit);
    }
    let observations: Vec<PointCloud> = files[..frames]
        .iter()
        .map(|f| pointio::load_point_cloud(f))
        .collect::<Result<_, _>>()
        .map_err(Failure::Validation)?;
    let controls = pointio::load_controls(
        &args.obs.join("controls.csv"),
        frames,
        mesh.particle_count(),
    )
    .map_err(Failure::Validation)?;

    let records = replay_loop(&mut mesh, &cfg, &controls, &observations).map_err(classify)?;
    let out_dir = resolve_out(args.out.clone(), "replay");
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(Failure::Runtime)?;
    std::fs::write(out_dir.join("metrics.csv"), output::metrics_csv(&records))
        .context("writing metrics.csv")
        .map_err(Failure::Runtime)?;
    println!("{} frames replayed, results in {}", frames, out_dir.display());
    Ok(())
}

fn stiffness_stats(v: &[f64]) -> (f64, f64, f64) {
    let min = v.iter().copied().fold(f64::MAX, f64::min);
    let max = v.iter().copied().fold(f64::MIN, f64::max);
    (min, v.iter().sum::<f64>() / v.len() as f64, max)
}

/// Estimator loop against recorded data: the same per-frame flow as the
/// twin harness, with e_t measured against the recorded future and no
/// keypoint metric (f_t stays NaN).
fn replay_loop(
    mesh: &mut DeformableMesh,
    cfg: &ExperimentConfig,
    controls: &[Control],
    observations: &[PointCloud],
) -> Result<Vec<FrameRecord>, HarnessError> {
    use softsim_core::online::OnlineError;

    let cset = ConstraintSet::from_mesh(mesh).map_err(HarnessError::Constraint)?;
    let stiffness = init_stiffness(cfg.preset, mesh.particle_count(), StiffnessBounds::default())
        .map_err(HarnessError::Constraint)?;
    let mut online = OnlineState::new(stiffness, &cfg.online, cfg.seed);
    let paired: Vec<(Control, PointCloud)> = controls
        .iter()
        .cloned()
        .zip(observations.iter().cloned())
        .collect();

    let mut records = Vec::with_capacity(controls.len());
    for (t, (u, z)) in controls.iter().zip(observations).enumerate() {
        let t1 = t + 1;
        let weights = online.stiffness.constraint_weights(&cset);
        let (predicted, losses) = match cfg.method {
            Method::Pbd => {
                let x =
                    pbd_step_positions(&mesh.positions, None, mesh, u, &cset, &weights, &cfg.solver)
                        .map_err(|e| HarnessError::Online(OnlineError::Solver(e)))?;
                mesh.positions = x.clone();
                (x, (f64::NAN, f64::NAN, f64::NAN))
            }
            Method::PbdRm => {
                let x =
                    pbd_step_positions(&mesh.positions, None, mesh, u, &cset, &weights, &cfg.solver)
                        .map_err(|e| HarnessError::Online(OnlineError::Solver(e)))?;
                let (gap, field) = loss_gap::<f64>(&x, mesh, z, &cset, &cfg.mapping)
                    .map_err(|e| HarnessError::Online(OnlineError::Mapping(e)))?;
                mesh.positions = x.iter().zip(&field.delta).map(|(p, d)| *p + *d).collect();
                (x, (gap, f64::NAN, f64::NAN))
            }
            Method::PbdRmOn => {
                let r = online_step(
                    mesh,
                    t1 as u64,
                    u,
                    z,
                    &cset,
                    &cfg.mapping,
                    &cfg.solver,
                    &cfg.online,
                    &mut online,
                )
                .map_err(HarnessError::Online)?;
                (r.predicted, (r.losses.gap, r.losses.hist, r.losses.smooth))
            }
        };

        let surface: Vec<Vec3> = match mesh.kind {
            MeshKind::ThinShell => predicted.clone(),
            MeshKind::Volumetric => mesh.surface_indices.iter().map(|&i| predicted[i]).collect(),
        };
        let chamfer = chamfer_points(&surface, &z.points);

        let weights = online.stiffness.constraint_weights(&cset);
        let future = average_future_gap(
            &mesh.positions,
            mesh,
            &cset,
            &weights,
            &cfg.solver,
            &cfg.mapping,
            &paired[t1..],
            cfg.horizon,
        )
        .map_err(HarnessError::Online)?;

        let (kd_min, kd_mean, kd_max) = stiffness_stats(&online.stiffness.k_dist());
        let (ks_min, ks_mean, ks_max) = stiffness_stats(&online.stiffness.k_shape());
        records.push(FrameRecord {
            frame: t1 as u64,
            chamfer_gap: chamfer,
            l_gap: losses.0,
            l_hist: losses.1,
            l_smooth: losses.2,
            e_t: if future.truncated { f64::NAN } else { future.value },
            e_t_truncated: future.truncated,
            f_t: f64::NAN,
            k_dist_min: kd_min,
            k_dist_mean: kd_mean,
            k_dist_max: kd_max,
            k_shape_min: ks_min,
            k_shape_mean: ks_mean,
            k_shape_max: ks_max,
            mapping_restarts: 0,
            error: None,
        });
    }
    Ok(records)
}

#[derive(Args)]
pub struct MeshArgs {
    #[command(subcommand)]
    command: MeshCommand,
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Build a rectangular thin-shell grid.
    Build {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        spacing: f64,
        /// Pin the first grid row.
        #[arg(long)]
        pin_first_row: bool,
        /// Mark the last grid row as grasped.
        #[arg(long)]
        grasp_last_row: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extrude a thin-shell mesh into a volumetric one.
    Extrude {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        thickness: f64,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Import a Wavefront OBJ triangle shell (v/f records only).
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn mesh(args: MeshArgs) -> Result<(), Failure> {
    match args.command {
        MeshCommand::Build {
            rows,
            cols,
            spacing,
            pin_first_row,
            grasp_last_row,
            out,
        } => {
            let mut mesh = build_grid_shell(rows, cols, spacing)
                .map_err(|e| Failure::validation(anyhow!("{e}")))?;
            if pin_first_row {
                mesh.pin(&(0..cols).collect::<Vec<_>>());
            }
            if grasp_last_row {
                mesh.grasp(&((rows - 1) * cols..rows * cols).collect::<Vec<_>>());
            }
            meshio::save_mesh(&mesh, &out).map_err(Failure::Runtime)?;
            println!("{} particles written to {}", mesh.particle_count(), out.display());
        }
        MeshCommand::Extrude {
            input,
            thickness,
            layers,
            out,
        } => {
            let shell = meshio::load_mesh(&input).map_err(Failure::Validation)?;
            let solid = extrude_to_volumetric(&shell, thickness, layers)
                .map_err(|e| Failure::validation(anyhow!("{e}")))?;
            meshio::save_mesh(&solid, &out).map_err(Failure::Runtime)?;
            println!(
                "{} particles, {} tetrahedra written to {}",
                solid.particle_count(),
                solid.tetrahedra.len(),
                out.display()
            );
        }
        MeshCommand::Import { input, out } => {
            let mesh = meshio::import_obj(&input).map_err(Failure::Validation)?;
            meshio::save_mesh(&mesh, &out).map_err(Failure::Runtime)?;
            println!(
                "{} particles, {} triangles written to {}",
                mesh.particle_count(),
                mesh.triangles.len(),
                out.display()
            );
        }
    }
    Ok(())
}
