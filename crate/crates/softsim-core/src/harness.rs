//! Experiment harness: builds the twin and the estimator, runs the
//! per-frame loop for each method, computes predictive metrics, and
//! provides the gradient cross-check used by the CLI.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{finite_diff_gradient, Tape, Var};
use crate::constraints::{
    stiffness_to_constraint_weights, ConstraintError, ConstraintSet, StiffnessBounds,
    StiffnessField,
};
use crate::geometry::{
    build_grid_shell, extrude_to_volumetric, DeformableMesh, GeometryError, PointCloud,
};
use crate::mapping::{chamfer_points, ResidualConfig};
use crate::math::{Real, Vec3, V3};
use crate::metrics::{future_keypoint_error, nearest_particle_indices, rollout};
use crate::online::{
    init_stiffness, loss_gap, loss_hist, loss_smooth_mesh, online_step, FrameLosses, OnlineConfig,
    OnlineError, OnlineState, StiffnessPreset,
};
use crate::solver::{pbd_step_positions, Control, SolverConfig, SolverError};
use crate::twin::{scripted_trajectory, select_keypoints, TrajectoryKind, Twin, TwinConfig};

/// Estimation method under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    /// Plain forward simulation.
    Pbd,
    /// Forward simulation plus residual mapping correction.
    PbdRm,
    /// Residual mapping plus online stiffness optimization.
    PbdRmOn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pbd => "PBD",
            Method::PbdRm => "PBD-RM",
            Method::PbdRmOn => "PBD-RM-ON",
        }
    }
}

/// Parametric mesh description. Grid meshes pin their first row and
/// grasp their last row.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MeshSpec {
    GridShell {
        rows: usize,
        cols: usize,
        spacing: f64,
    },
    GridVolumetric {
        rows: usize,
        cols: usize,
        spacing: f64,
        thickness: f64,
        layers: usize,
    },
}

impl MeshSpec {
    pub fn build(&self) -> Result<DeformableMesh, GeometryError> {
        match *self {
            MeshSpec::GridShell {
                rows,
                cols,
                spacing,
            } => {
                let mut m = build_grid_shell(rows, cols, spacing)?;
                pin_and_grasp_rows(&mut m, rows, cols);
                Ok(m)
            }
            MeshSpec::GridVolumetric {
                rows,
                cols,
                spacing,
                thickness,
                layers,
            } => {
                let mut shell = build_grid_shell(rows, cols, spacing)?;
                pin_and_grasp_rows(&mut shell, rows, cols);
                extrude_to_volumetric(&shell, thickness, layers)
            }
        }
    }
}

fn pin_and_grasp_rows(mesh: &mut DeformableMesh, rows: usize, cols: usize) {
    let first: Vec<usize> = (0..cols).collect();
    let last: Vec<usize> = ((rows - 1) * cols..rows * cols).collect();
    mesh.pin(&first);
    mesh.grasp(&last);
}

/// Hidden twin stiffness layout.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrueStiffness {
    Uniform {
        k_dist: f64,
        k_shape: f64,
    },
    /// Soft half / stiff half split at the footprint midline (y axis).
    TwoRegion {
        soft_k_dist: f64,
        stiff_k_dist: f64,
        k_shape: f64,
    },
}

impl TrueStiffness {
    /// Per-particle stiffness vectors, plus the soft-region particle set
    /// for two-region layouts.
    pub fn materialize(&self, mesh: &DeformableMesh) -> (Vec<f64>, Vec<f64>, Option<Vec<usize>>) {
        let n = mesh.particle_count();
        match *self {
            TrueStiffness::Uniform { k_dist, k_shape } => {
                (vec![k_dist; n], vec![k_shape; n], None)
            }
            TrueStiffness::TwoRegion {
                soft_k_dist,
                stiff_k_dist,
                k_shape,
            } => {
                let min_y = mesh.rest_positions.iter().map(|p| p.y).fold(f64::MAX, f64::min);
                let max_y = mesh.rest_positions.iter().map(|p| p.y).fold(f64::MIN, f64::max);
                let mid = 0.5 * (min_y + max_y);
                let mut kd = Vec::with_capacity(n);
                let mut soft = Vec::new();
                for (i, p) in mesh.rest_positions.iter().enumerate() {
                    if p.y < mid {
                        kd.push(soft_k_dist);
                        soft.push(i);
                    } else {
                        kd.push(stiff_k_dist);
                    }
                }
                (kd, vec![k_shape; n], Some(soft))
            }
        }
    }
}

/// Full experiment description.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ExperimentConfig {
    pub mesh: MeshSpec,
    pub method: Method,
    pub preset: StiffnessPreset,
    pub frames: usize,
    pub seed: u64,
    /// Future horizon T for e_t and f_t.
    pub horizon: usize,
    pub keypoints: usize,
    /// Offset added to keypoint positions (exercises the
    /// nearest-neighbor approximation); zero keeps keypoints exactly on
    /// particles.
    pub keypoint_offset: f64,
    pub trajectory: TrajectoryKind,
    pub amplitude: f64,
    /// Freeze the twin after a warmup pass over the trajectory and
    /// replay the same pose every frame.
    pub stationary: bool,
    pub true_stiffness: TrueStiffness,
    pub noise_sigma: f64,
    pub points_per_frame: usize,
    pub model_mismatch: bool,
    pub solver: SolverConfig,
    pub mapping: ResidualConfig,
    pub online: OnlineConfig,
    /// Compute e_t/f_t every this many frames (1 = every frame).
    pub metrics_every: usize,
}

impl ExperimentConfig {
    /// Desk-scale thin-shell default (10x10 grid, 1 cm spacing).
    pub fn thin_shell_default() -> Self {
        Self {
            mesh: MeshSpec::GridShell {
                rows: 10,
                cols: 10,
                spacing: 0.01,
            },
            method: Method::PbdRmOn,
            preset: StiffnessPreset::K2,
            frames: 60,
            seed: 1,
            horizon: 10,
            keypoints: 15,
            keypoint_offset: 0.0,
            trajectory: TrajectoryKind::EdgePull,
            amplitude: 0.03,
            stationary: false,
            true_stiffness: TrueStiffness::Uniform {
                k_dist: 2.5,
                k_shape: 0.01,
            },
            noise_sigma: 0.0005,
            points_per_frame: 2000,
            model_mismatch: false,
            solver: SolverConfig::default(),
            mapping: ResidualConfig {
                learning_rate: 0.005,
                ..ResidualConfig::default()
            },
            online: OnlineConfig::default(),
            metrics_every: 1,
        }
    }

    /// Desk-scale volumetric default (8x8 footprint, 2 layers).
    pub fn volumetric_default() -> Self {
        Self {
            mesh: MeshSpec::GridVolumetric {
                rows: 8,
                cols: 8,
                spacing: 0.01,
                thickness: 0.01,
                layers: 2,
            },
            ..Self::thin_shell_default()
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::thin_shell_default()
    }
}

/// One row of the metrics stream.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame: u64,
    /// Chamfer between the predicted (pre-correction) surface and the
    /// observation.
    pub chamfer_gap: f64,
    /// Loss values; NaN for terms the method does not evaluate.
    pub l_gap: f64,
    pub l_hist: f64,
    pub l_smooth: f64,
    /// Average future gap; NaN when the horizon ran past the trajectory
    /// or the frame was skipped by `metrics_every`.
    pub e_t: f64,
    pub e_t_truncated: bool,
    pub f_t: f64,
    pub k_dist_min: f64,
    pub k_dist_mean: f64,
    pub k_dist_max: f64,
    pub k_shape_min: f64,
    pub k_shape_mean: f64,
    pub k_shape_max: f64,
    pub mapping_restarts: u32,
    /// Module error recorded for this frame, if any; the frame's metric
    /// columns are NaN markers in that case.
    pub error: Option<String>,
}

/// Wall-clock per stage, seconds (std builds only; zero otherwise).
#[derive(Clone, Copy, Debug, Default)]
pub struct Timings {
    pub twin_total: f64,
    pub estimator_total: f64,
    pub metrics_total: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<FrameRecord>,
    pub final_stiffness: StiffnessField,
    pub final_state: Vec<Vec3>,
    pub keypoint_indices: Vec<usize>,
    /// Chamfer between two independent observations of the initial twin
    /// pose: the pure sampling floor.
    pub sampling_floor: f64,
    /// Soft-region particle set when the twin is two-region.
    pub soft_region: Option<Vec<usize>>,
    /// Set when the run stopped early after five consecutive frame
    /// failures; records end at this frame.
    pub aborted_at: Option<u64>,
    pub timings: Timings,
}

#[derive(Clone, Debug)]
pub enum HarnessError {
    Geometry(GeometryError),
    Constraint(ConstraintError),
    Online(OnlineError),
    Config(String),
}

impl core::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HarnessError::Geometry(e) => write!(f, "{e}"),
            HarnessError::Constraint(e) => write!(f, "{e}"),
            HarnessError::Online(e) => write!(f, "{e}"),
            HarnessError::Config(m) => write!(f, "invalid config: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for HarnessError {}

impl From<GeometryError> for HarnessError {
    fn from(e: GeometryError) -> Self {
        Self::Geometry(e)
    }
}
impl From<ConstraintError> for HarnessError {
    fn from(e: ConstraintError) -> Self {
        Self::Constraint(e)
    }
}
impl From<OnlineError> for HarnessError {
    fn from(e: OnlineError) -> Self {
        Self::Online(e)
    }
}
impl From<SolverError> for HarnessError {
    fn from(e: SolverError) -> Self {
        Self::Online(OnlineError::Solver(e))
    }
}

#[cfg(feature = "std")]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}
#[cfg(not(feature = "std"))]
fn now() -> Option<()> {
    None
}

#[cfg(feature = "std")]
fn elapsed(t: &Option<std::time::Instant>) -> f64 {
    t.map(|i| i.elapsed().as_secs_f64()).unwrap_or(0.0)
}
#[cfg(not(feature = "std"))]
fn elapsed(_: &Option<()>) -> f64 {
    0.0
}

fn stiffness_stats(v: &[f64]) -> (f64, f64, f64) {
    let mut min = f64::MAX;
    let mut max = f64::MIN;
    let mut sum = 0.0;
    for &x in v {
        min = min.min(x);
        max = max.max(x);
        sum += x;
    }
    (min, sum / v.len() as f64, max)
}

/// Runs the full per-frame loop of the configured experiment.
///
/// All randomness derives from `cfg.seed`; identical configurations
/// produce identical records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let mesh = cfg.mesh.build()?;
    run_experiment_with_mesh(cfg, mesh)
}

/// Same as [`run_experiment`] with an externally constructed mesh
/// (e.g. loaded from a file); `cfg.mesh` is ignored.
pub fn run_experiment_with_mesh(
    cfg: &ExperimentConfig,
    mesh: DeformableMesh,
) -> Result<ExperimentOutput, HarnessError> {
    if cfg.frames == 0 || cfg.horizon == 0 || cfg.metrics_every == 0 {
        return Err(HarnessError::Config(String::from(
            "frames, horizon and metrics_every must be at least 1",
        )));
    }
    let n = mesh.particle_count();
    let (true_kd, true_ks, soft_region) = cfg.true_stiffness.materialize(&mesh);
    let twin_cfg = TwinConfig {
        true_k_dist: true_kd,
        true_k_shape: true_ks,
        noise_sigma: cfg.noise_sigma,
        points_per_frame: cfg.points_per_frame,
        seed: cfg.seed,
        model_mismatch: cfg.model_mismatch,
    };
    let mut twin =
        Twin::new(mesh.clone(), twin_cfg, cfg.solver).map_err(HarnessError::Constraint)?;
    let trajectory = scripted_trajectory(cfg.trajectory, cfg.frames, cfg.amplitude, &mesh);
    let keypoint_indices = select_keypoints(&twin, &trajectory, cfg.keypoints)?;
    let kp_offset = Vec3::new(cfg.keypoint_offset, 0.0, 0.0);

    // Two independent observation streams of the same pose measure the
    // pure sampling + noise floor of the chamfer metric.
    let sampling_floor = {
        let a = twin.observe(1 << 40);
        let b = twin.observe((1 << 40) + 1);
        chamfer_points(&a.points, &b.points)
    };

    // Precompute twin states, observations and keypoint tracks. In
    // stationary mode the twin is deformed by a full warmup pass and
    // then held, while the estimator still sees the trajectory's
    // controls replaced by holds.
    let t_twin = now();
    let mut controls: Vec<Control> = Vec::with_capacity(cfg.frames);
    let mut observations: Vec<PointCloud> = Vec::with_capacity(cfg.frames);
    let mut kp_tracks: Vec<Vec<Vec3>> = Vec::with_capacity(cfg.frames);
    if cfg.stationary {
        for u in &trajectory {
            twin.step(u)?;
        }
        let hold_pose = trajectory
            .last()
            .cloned()
            .unwrap_or_else(Control::hold);
        let frozen = twin.observe(1);
        let kp = keypoint_positions(&twin, &keypoint_indices, kp_offset);
        for _ in 1..=cfg.frames {
            controls.push(hold_pose.clone());
            observations.push(frozen.clone());
            kp_tracks.push(kp.clone());
        }
    } else {
        for (f, u) in trajectory.iter().enumerate() {
            twin.step(u)?;
            controls.push(u.clone());
            observations.push(twin.observe((f + 1) as u64));
            kp_tracks.push(keypoint_positions(&twin, &keypoint_indices, kp_offset));
        }
    }
    let twin_total = elapsed(&t_twin);

    // Estimator.
    let cset = ConstraintSet::from_mesh(&mesh).map_err(HarnessError::Constraint)?;
    let stiffness = init_stiffness(cfg.preset, n, StiffnessBounds::default())?;
    let mut est_mesh = mesh.clone();
    let x0 = est_mesh.positions.clone();
    let kp0: Vec<Vec3> = kp_initial(&mesh, &keypoint_indices, kp_offset);
    let kp_nn = nearest_particle_indices(&x0, &kp0);
    let mut online = OnlineState::new(stiffness, &cfg.online, cfg.seed);

    let mut records = Vec::with_capacity(cfg.frames);
    let mut estimator_total = 0.0;
    let mut metrics_total = 0.0;

    let mut consecutive_failures = 0usize;
    let mut aborted_at = None;

    for t in 1..=cfg.frames {
        let u = &controls[t - 1];
        let z = &observations[t - 1];
        let t_est = now();
        let weights_now = online.stiffness.constraint_weights(&cset);

        let frame_result = (|| -> Result<(Vec<Vec3>, FrameLosses, u32), OnlineError> {
            Ok(match cfg.method {
            Method::Pbd => {
                let x = pbd_step_positions(
                    &est_mesh.positions,
                    None,
                    &est_mesh,
                    u,
                    &cset,
                    &weights_now,
                    &cfg.solver,
                )
                .map_err(OnlineError::Solver)?;
                est_mesh.positions = x.clone();
                (
                    x,
                    FrameLosses {
                        gap: f64::NAN,
                        hist: f64::NAN,
                        smooth: f64::NAN,
                    },
                    0,
                )
            }
            Method::PbdRm => {
                let x = pbd_step_positions(
                    &est_mesh.positions,
                    None,
                    &est_mesh,
                    u,
                    &cset,
                    &weights_now,
                    &cfg.solver,
                )
                .map_err(OnlineError::Solver)?;
                let (gap, field) = loss_gap::<f64>(&x, &est_mesh, z, &cset, &cfg.mapping)
                    .map_err(OnlineError::Mapping)?;
                est_mesh.positions = x
                    .iter()
                    .zip(&field.delta)
                    .map(|(p, d)| *p + *d)
                    .collect();
                (
                    x,
                    FrameLosses {
                        gap,
                        hist: f64::NAN,
                        smooth: f64::NAN,
                    },
                    field.restarts as u32,
                )
            }
            Method::PbdRmOn => {
                let r = online_step(
                    &mut est_mesh,
                    t as u64,
                    u,
                    z,
                    &cset,
                    &cfg.mapping,
                    &cfg.solver,
                    &cfg.online,
                    &mut online,
                )?;
                (r.predicted, r.losses, r.residual.restarts as u32)
            }
            })
        })();
        estimator_total += elapsed(&t_est);

        let (predicted, losses, restarts) = match frame_result {
            Ok(v) => {
                consecutive_failures = 0;
                v
            }
            Err(e) => {
                consecutive_failures += 1;
                let (kd_min, kd_mean, kd_max) = stiffness_stats(&online.stiffness.k_dist());
                let (ks_min, ks_mean, ks_max) = stiffness_stats(&online.stiffness.k_shape());
                records.push(FrameRecord {
                    frame: t as u64,
                    chamfer_gap: f64::NAN,
                    l_gap: f64::NAN,
                    l_hist: f64::NAN,
                    l_smooth: f64::NAN,
                    e_t: f64::NAN,
                    e_t_truncated: true,
                    f_t: f64::NAN,
                    k_dist_min: kd_min,
                    k_dist_mean: kd_mean,
                    k_dist_max: kd_max,
                    k_shape_min: ks_min,
                    k_shape_mean: ks_mean,
                    k_shape_max: ks_max,
                    mapping_restarts: 0,
                    error: Some(alloc::format!("{e}")),
                });
                if consecutive_failures >= 5 {
                    aborted_at = Some(t as u64);
                    break;
                }
                continue;
            }
        };

        let surf_pred: Vec<Vec3> = match est_mesh.kind {
            crate::geometry::MeshKind::ThinShell => predicted.clone(),
            crate::geometry::MeshKind::Volumetric => est_mesh
                .surface_indices
                .iter()
                .map(|&i| predicted[i])
                .collect(),
        };
        let chamfer_gap = chamfer_points(&surf_pred, &z.points);

        // Predictive metrics on the corrected state with frozen weights.
        let t_met = now();
        let weights_frozen = online.stiffness.constraint_weights(&cset);
        let mut e_t = f64::NAN;
        let mut e_t_truncated = true;
        let mut f_t = f64::NAN;
        let mut metric_error = None;
        let horizon_ok = t + cfg.horizon <= cfg.frames;
        if (t - 1) % cfg.metrics_every == 0 && horizon_ok {
            let metrics = (|| -> Result<(f64, f64), OnlineError> {
                let future_controls: Vec<Control> = controls[t..t + cfg.horizon].to_vec();
                let states = rollout(
                    &est_mesh.positions,
                    &est_mesh,
                    &cset,
                    &weights_frozen,
                    &cfg.solver,
                    &future_controls,
                )?;
                let mut total = 0.0;
                for (x, zf) in states.iter().zip(&observations[t..t + cfg.horizon]) {
                    let (g, _) = loss_gap::<f64>(x, &est_mesh, zf, &cset, &cfg.mapping)
                        .map_err(OnlineError::Mapping)?;
                    total += g;
                }
                let x_future = states.last().expect("horizon >= 1");
                let kp_future = &kp_tracks[t + cfg.horizon - 1];
                let f = future_keypoint_error(&x0, x_future, &kp0, kp_future, &kp_nn);
                Ok((total / cfg.horizon as f64, f))
            })();
            match metrics {
                Ok((e, f)) => {
                    e_t = e;
                    e_t_truncated = false;
                    f_t = f;
                }
                Err(err) => metric_error = Some(alloc::format!("metrics: {err}")),
            }
        }
        metrics_total += elapsed(&t_met);

        let (kd_min, kd_mean, kd_max) = stiffness_stats(&online.stiffness.k_dist());
        let (ks_min, ks_mean, ks_max) = stiffness_stats(&online.stiffness.k_shape());
        records.push(FrameRecord {
            frame: t as u64,
            chamfer_gap,
            l_gap: losses.gap,
            l_hist: losses.hist,
            l_smooth: losses.smooth,
            e_t,
            e_t_truncated,
            f_t,
            k_dist_min: kd_min,
            k_dist_mean: kd_mean,
            k_dist_max: kd_max,
            k_shape_min: ks_min,
            k_shape_mean: ks_mean,
            k_shape_max: ks_max,
            mapping_restarts: restarts,
            error: metric_error,
        });
    }

    Ok(ExperimentOutput {
        records,
        final_stiffness: online.stiffness,
        final_state: est_mesh.positions,
        keypoint_indices,
        sampling_floor,
        soft_region,
        aborted_at,
        timings: Timings {
            twin_total,
            estimator_total,
            metrics_total,
        },
    })
}

fn keypoint_positions(twin: &Twin, indices: &[usize], offset: Vec3) -> Vec<Vec3> {
    indices
        .iter()
        .map(|&i| twin.mesh.positions[i] + offset)
        .collect()
}

fn kp_initial(mesh: &DeformableMesh, indices: &[usize], offset: Vec3) -> Vec<Vec3> {
    indices
        .iter()
        .map(|&i| mesh.rest_positions[i] + offset)
        .collect()
}

/// One cell of a methods-by-presets sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub method: Method,
    pub preset: StiffnessPreset,
    pub mean_e_t: f64,
    pub mean_f_t: f64,
    pub mean_chamfer: f64,
}

/// Runs every method against every initialization preset with otherwise
/// identical configuration. Cells execute sequentially in a fixed order,
/// so the result is deterministic.
pub fn run_sweep(base: &ExperimentConfig) -> Result<Vec<SweepCell>, HarnessError> {
    let mut cells = Vec::with_capacity(9);
    for method in [Method::Pbd, Method::PbdRm, Method::PbdRmOn] {
        for preset in [StiffnessPreset::K1, StiffnessPreset::K2, StiffnessPreset::K3] {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.preset = preset;
            let out = run_experiment(&cfg)?;
            cells.push(SweepCell {
                method,
                preset,
                mean_e_t: mean_finite(out.records.iter().map(|r| r.e_t)),
                mean_f_t: mean_finite(out.records.iter().map(|r| r.f_t)),
                mean_chamfer: mean_finite(out.records.iter().map(|r| r.chamfer_gap)),
            });
        }
    }
    Ok(cells)
}

/// Mean over the finite entries (NaN markers excluded).
pub fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Gradient fidelity report: reverse-mode versus central finite
/// differences of the full online loss with respect to theta.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub dims: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the worst coordinate.
    pub worst_dim: usize,
}

/// Evaluates `L_total = L_gap + L_hist + L_smooth` through `pbd_steps`
/// unrolled solver steps and the truncated mapping descent, and compares
/// the taped gradient against central finite differences (h = 1e-4).
///
/// Relative error per coordinate is `|ad - fd| / max(|ad|, |fd|, 1e-6)`.
pub fn gradcheck(
    rows: usize,
    cols: usize,
    pbd_steps: usize,
    inner_steps: usize,
) -> Result<GradcheckReport, HarnessError> {
    let mut mesh = build_grid_shell(rows, cols, 0.01)?;
    let first: Vec<usize> = (0..cols).collect();
    mesh.pin(&first);
    let n = mesh.particle_count();
    let cset = ConstraintSet::from_mesh(&mesh).map_err(HarnessError::Constraint)?;
    let solver_cfg = SolverConfig::default();
    let map_cfg = ResidualConfig {
        inner_steps,
        taped_steps: inner_steps,
        learning_rate: 0.05,
        ..ResidualConfig::default()
    };
    let bounds = StiffnessBounds::default();

    // Heterogeneous theta so every coordinate matters.
    let base = init_stiffness(
        StiffnessPreset::Custom {
            k_dist: 1.0,
            k_shape: 0.005,
        },
        n,
        bounds,
    )?;
    let mut theta0: Vec<f64> = base
        .theta_dist
        .iter()
        .chain(&base.theta_shape)
        .copied()
        .collect();
    for (i, t) in theta0.iter_mut().enumerate() {
        *t += 0.1 * crate::math::f64_cos(1.7 * i as f64);
    }

    // A deterministic, slightly deformed previous state and a nearby
    // observation.
    let x_prev: Vec<Vec3> = mesh
        .rest_positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            *p + Vec3::new(
                0.0006 * crate::math::f64_cos(0.9 * i as f64),
                0.0006 * crate::math::f64_cos(1.3 * i as f64 + 0.4),
                0.0006 * crate::math::f64_cos(2.1 * i as f64 + 1.1),
            )
        })
        .collect();
    let z = PointCloud::new(
        mesh.rest_positions
            .iter()
            .map(|p| *p + Vec3::new(0.0004, -0.0002, 0.0003))
            .collect(),
    )
    .expect("finite observation");
    let snapshot = (0u64, x_prev.clone());

    let eval = |theta: &[f64]| -> f64 { loss_total(theta, &mesh, &cset, &z, &snapshot, &x_prev, &solver_cfg, &map_cfg, bounds, pbd_steps, n).expect("loss evaluation") };
    let fd = finite_diff_gradient(eval, &theta0, 1e-4);

    let tape = Tape::new();
    let theta_vars: Vec<Var<'_>> = theta0.iter().map(|&t| tape.input(t)).collect();
    let loss = loss_total(
        &theta_vars,
        &mesh,
        &cset,
        &z,
        &snapshot,
        &x_prev,
        &solver_cfg,
        &map_cfg,
        bounds,
        pbd_steps,
        n,
    )
    .map_err(HarnessError::Online)?;
    let grads = tape.backward(loss).map_err(OnlineError::Gradient)?;

    let mut worst = (0usize, 0.0f64, 0.0f64);
    for (i, (v, f)) in theta_vars.iter().zip(&fd).enumerate() {
        let ad = grads.get(*v);
        let abs = (ad - f).abs();
        let rel = abs / ad.abs().max(f.abs()).max(1e-6);
        if rel > worst.1 {
            worst = (i, rel, abs);
        }
    }
    Ok(GradcheckReport {
        dims: theta0.len(),
        max_rel_error: worst.1,
        max_abs_error: worst.2,
        worst_dim: worst.0,
    })
}

#[allow(clippy::too_many_arguments)]
fn loss_total<R: Real>(
    theta: &[R],
    mesh: &DeformableMesh,
    cset: &ConstraintSet,
    z: &PointCloud,
    snapshot: &(u64, Vec<Vec3>),
    x_prev: &[Vec3],
    solver_cfg: &SolverConfig,
    map_cfg: &ResidualConfig,
    bounds: StiffnessBounds,
    pbd_steps: usize,
    n: usize,
) -> Result<R, OnlineError> {
    let k_dist = crate::constraints::map_stiffness(&theta[..n], bounds.dist_min, bounds.dist_max);
    let k_shape =
        crate::constraints::map_stiffness(&theta[n..], bounds.shape_min, bounds.shape_max);
    let weights = stiffness_to_constraint_weights(
        &k_dist,
        &k_shape,
        crate::constraints::K_VOL_FIXED,
        cset,
    );
    let mut x: Vec<V3<R>> = x_prev.iter().map(|p| V3::lit(*p)).collect();
    for _ in 0..pbd_steps {
        x = pbd_step_positions(&x, None, mesh, &Control::hold(), cset, &weights, solver_cfg)?;
    }
    let (gap, _) = loss_gap(&x, mesh, z, cset, map_cfg)?;
    let snaps = [snapshot];
    let refs: Vec<&(u64, Vec<Vec3>)> = snaps.iter().copied().collect();
    let hist = loss_hist(&refs, mesh, cset, &weights, solver_cfg)?;
    let smooth = loss_smooth_mesh(&k_dist, &k_shape, mesh);
    Ok(gap + hist + smooth)
}
