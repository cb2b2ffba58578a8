//! Online per-particle stiffness optimization: the gap, history and
//! smoothness losses, the snapshot buffer, the Adam update, and the
//! per-frame step that ties them together.
//!
//! Each loss term is recorded on its own autodiff tape with the
//! unconstrained stiffness parameters theta as inputs; the gradients are
//! summed and one Adam step is taken per simulation frame.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientNan, Tape, Var};
use crate::constraints::{
    map_stiffness, stiffness_to_constraint_weights, ConstraintError, ConstraintSet,
    ConstraintWeights, StiffnessBounds, StiffnessField,
};
use crate::geometry::{DeformableMesh, MeshKind, PointCloud};
use crate::mapping::{residual_map_positions, MappingError, ResidualConfig, ResidualField};
use crate::math::{Real, Vec3, V3};
use crate::solver::{pbd_step_positions, Control, SolverConfig, SolverError};

/// Frobenius norm of an n x 3 displacement field, with a smooth guard at
/// zero so the gradient stays finite.
pub fn frobenius_norm<R: Real>(rows: &[V3<R>]) -> R {
    let mut s = R::lit(1e-24);
    for r in rows {
        s = s + r.norm_sq();
    }
    s.sqrt()
}

/// Ring buffer of corrected states for the history loss.
#[derive(Clone, Debug)]
pub struct SnapshotBuffer {
    capacity: usize,
    sample_size: usize,
    entries: Vec<(u64, Vec<Vec3>)>,
}

impl SnapshotBuffer {
    pub fn new(capacity: usize, sample_size: usize) -> Self {
        assert!(capacity >= 1 && sample_size >= 1);
        Self {
            capacity,
            sample_size,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: u64, state: Vec<Vec3>) {
        if self.entries.len() == self.capacity {
            self.entries.remove(0);
        }
        self.entries.push((frame, state));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Uniformly samples `min(sample_size, len)` distinct snapshots.
    pub fn sample<'a, G: Rng>(&'a self, rng: &mut G) -> Vec<&'a (u64, Vec<Vec3>)> {
        let k = self.sample_size.min(self.entries.len());
        let mut picked = rand::seq::index::sample(rng, self.entries.len(), k).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| &self.entries[i]).collect()
    }
}

impl Default for SnapshotBuffer {
    fn default() -> Self {
        Self::new(20, 4)
    }
}

/// Adam moments over the flattened theta vector
/// `[theta_dist.. | theta_shape..]`.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One Adam update in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - crate::math::f64_powi(self.beta1, self.step as i32);
        let b2t = 1.0 - crate::math::f64_powi(self.beta2, self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            theta[i] -= self.learning_rate * mh / (crate::math::f64_sqrt(vh) + self.epsilon);
        }
    }
}

/// Loss weighting and snapshot settings for the online loop.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OnlineConfig {
    pub weight_gap: f64,
    pub weight_hist: f64,
    pub weight_smooth: f64,
    pub snapshot_capacity: usize,
    pub snapshot_samples: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            weight_gap: 1.0,
            weight_hist: 1.0,
            weight_smooth: 1.0,
            snapshot_capacity: 20,
            snapshot_samples: 4,
        }
    }
}

/// Initialization presets from the reference experiments.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StiffnessPreset {
    K1,
    K2,
    K3,
    Custom { k_dist: f64, k_shape: f64 },
}

/// Largest shape stiffness used when a preset exceeds the bound.
pub const K_SHAPE_CLAMP: f64 = 0.0199;

/// Uniform stiffness field for a preset. Preset shape values above the
/// bound are clamped to [`K_SHAPE_CLAMP`] with a warning; custom values
/// must lie strictly inside the bounds.
pub fn init_stiffness(
    preset: StiffnessPreset,
    n: usize,
    bounds: StiffnessBounds,
) -> Result<StiffnessField, ConstraintError> {
    let (k_dist, k_shape, clamp) = match preset {
        StiffnessPreset::K1 => (5.0, 0.15, true),
        StiffnessPreset::K2 => (1.0, 0.1, true),
        StiffnessPreset::K3 => (0.2, 0.005, true),
        StiffnessPreset::Custom { k_dist, k_shape } => (k_dist, k_shape, false),
    };
    let k_shape = if clamp && k_shape >= bounds.shape_max {
        log::warn!(
            "preset k_shape {k_shape} exceeds bound {}; clamped to {K_SHAPE_CLAMP}",
            bounds.shape_max
        );
        K_SHAPE_CLAMP
    } else {
        k_shape
    };
    StiffnessField::uniform(n, k_dist, k_shape, bounds)
}

#[derive(Clone, Debug)]
pub enum OnlineError {
    Mapping(MappingError),
    Gradient(GradientNan),
    Solver(SolverError),
}

impl core::fmt::Display for OnlineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OnlineError::Mapping(e) => write!(f, "{e}"),
            OnlineError::Gradient(e) => write!(f, "{e}"),
            OnlineError::Solver(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OnlineError {}

impl From<MappingError> for OnlineError {
    fn from(e: MappingError) -> Self {
        Self::Mapping(e)
    }
}
impl From<GradientNan> for OnlineError {
    fn from(e: GradientNan) -> Self {
        Self::Gradient(e)
    }
}
impl From<SolverError> for OnlineError {
    fn from(e: SolverError) -> Self {
        Self::Solver(e)
    }
}

/// Smoothness penalty `(1/2F) sum_f sum_{i in f} sum_{j in f}
/// (k_i - k_j)^2` over mesh elements (squared differences; the signed
/// form cancels identically).
pub fn loss_smooth<R: Real, const N: usize>(k: &[R], elements: &[[usize; N]]) -> R {
    if elements.is_empty() {
        return R::lit(0.0);
    }
    let mut s = R::lit(0.0);
    for f in elements {
        for &i in f {
            for &j in f {
                let d = k[i] - k[j];
                s = s + d * d;
            }
        }
    }
    s * R::lit(1.0 / (2.0 * elements.len() as f64))
}

/// Smoothness over both elastic families on the mesh's elements
/// (triangles for thin shells, tetrahedra for volumetric meshes).
pub fn loss_smooth_mesh<R: Real>(k_dist: &[R], k_shape: &[R], mesh: &DeformableMesh) -> R {
    match mesh.kind {
        MeshKind::ThinShell => {
            loss_smooth(k_dist, &mesh.triangles) + loss_smooth(k_shape, &mesh.triangles)
        }
        MeshKind::Volumetric => {
            loss_smooth(k_dist, &mesh.tetrahedra) + loss_smooth(k_shape, &mesh.tetrahedra)
        }
    }
}

/// The residual-gap loss `|g(x_t, z_t)|` at explicit positions,
/// together with the mapping diagnostics.
pub fn loss_gap<R: Real>(
    x: &[V3<R>],
    mesh: &DeformableMesh,
    z: &PointCloud,
    cset: &ConstraintSet,
    map_cfg: &ResidualConfig,
) -> Result<(R, ResidualField), MappingError> {
    let (delta, field) = residual_map_positions(x, mesh, z, cset, map_cfg)?;
    Ok((frobenius_norm(&delta), field))
}

/// The history loss: one-step drift of each sampled snapshot under zero
/// control, `sum_h |x_h - PBD(x_h, 0, k_c)|`.
pub fn loss_hist<R: Real>(
    snapshots: &[&(u64, Vec<Vec3>)],
    mesh: &DeformableMesh,
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
    solver_cfg: &SolverConfig,
) -> Result<R, SolverError> {
    let mut total = R::lit(0.0);
    for (_, state) in snapshots {
        let x0: Vec<V3<R>> = state.iter().map(|p| V3::lit(*p)).collect();
        let x1 = pbd_step_positions(&x0, None, mesh, &Control::hold(), cset, weights, solver_cfg)?;
        let drift: Vec<V3<R>> = x0.iter().zip(&x1).map(|(a, b)| *a - *b).collect();
        total = total + frobenius_norm(&drift);
    }
    Ok(total)
}

/// Mutable per-experiment state of the online optimizer.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub stiffness: StiffnessField,
    pub optimizer: OptimizerState,
    pub buffer: SnapshotBuffer,
    rng: ChaCha8Rng,
}

impl OnlineState {
    pub fn new(stiffness: StiffnessField, cfg: &OnlineConfig, seed: u64) -> Self {
        let dim = 2 * stiffness.particle_count();
        Self {
            stiffness,
            optimizer: OptimizerState::new(dim),
            buffer: SnapshotBuffer::new(cfg.snapshot_capacity, cfg.snapshot_samples),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6f6e6c696e65),
        }
    }

    fn theta(&self) -> Vec<f64> {
        let mut t = self.stiffness.theta_dist.clone();
        t.extend(&self.stiffness.theta_shape);
        t
    }

    fn set_theta(&mut self, theta: &[f64]) {
        let n = self.stiffness.particle_count();
        self.stiffness.theta_dist.copy_from_slice(&theta[..n]);
        self.stiffness.theta_shape.copy_from_slice(&theta[n..]);
    }
}

/// Per-frame loss values.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameLosses {
    pub gap: f64,
    pub hist: f64,
    pub smooth: f64,
}

impl FrameLosses {
    pub fn total(&self) -> f64 {
        self.gap + self.hist + self.smooth
    }
}

/// Outcome of one online frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    /// Uncorrected post-step state x_t.
    pub predicted: Vec<Vec3>,
    pub residual: ResidualField,
    pub losses: FrameLosses,
}

struct TapedStiffness<'t> {
    theta: Vec<Var<'t>>,
    k_dist: Vec<Var<'t>>,
    k_shape: Vec<Var<'t>>,
}

fn taped_stiffness<'t>(tape: &'t Tape, field: &StiffnessField) -> TapedStiffness<'t> {
    let theta: Vec<Var<'t>> = field
        .theta_dist
        .iter()
        .chain(&field.theta_shape)
        .map(|&t| tape.input(t))
        .collect();
    let n = field.particle_count();
    let b = field.bounds;
    let k_dist = map_stiffness(&theta[..n], b.dist_min, b.dist_max);
    let k_shape = map_stiffness(&theta[n..], b.shape_min, b.shape_max);
    TapedStiffness {
        theta,
        k_dist,
        k_shape,
    }
}

fn accumulate(theta_grad: &mut [f64], grads: &crate::autodiff::Gradients, vars: &[Var<'_>], w: f64) {
    for (g, v) in theta_grad.iter_mut().zip(vars) {
        *g += w * grads.get(*v);
    }
}

/// One full online frame per Algorithm 1: forward PBD with the current
/// stiffness, residual mapping against the observation, gradients of the
/// three losses with respect to theta on separate tapes, one Adam step,
/// snapshot push, and state correction `x_t <- x_t + Delta_t`.
///
/// `mesh.positions` must hold the previous corrected state; on success
/// they hold the new corrected state. On error theta is left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn online_step(
    mesh: &mut DeformableMesh,
    frame: u64,
    u: &Control,
    z: &PointCloud,
    cset: &ConstraintSet,
    map_cfg: &ResidualConfig,
    solver_cfg: &SolverConfig,
    online_cfg: &OnlineConfig,
    state: &mut OnlineState,
) -> Result<FrameResult, OnlineError> {
    let n = mesh.particle_count();
    let x_prev = mesh.positions.clone();
    let weights_f = state.stiffness.constraint_weights(cset);

    // Forward pass and loss values in plain f64.
    let x_t = pbd_step_positions(&x_prev, None, mesh, u, cset, &weights_f, solver_cfg)?;
    let (gap_f, residual) = loss_gap(&x_t, mesh, z, cset, map_cfg)?;
    let sampled = state.buffer.sample(&mut state.rng);
    let hist_f = loss_hist(&sampled, mesh, cset, &weights_f, solver_cfg)?;
    let smooth_f = loss_smooth_mesh(&state.stiffness.k_dist(), &state.stiffness.k_shape(), mesh);
    let losses = FrameLosses {
        gap: online_cfg.weight_gap * gap_f,
        hist: online_cfg.weight_hist * hist_f,
        smooth: online_cfg.weight_smooth * smooth_f,
    };

    let mut theta_grad = vec![0.0f64; 2 * n];

    // Gap term: theta -> k_c -> PBD -> residual mapping -> norm.
    if online_cfg.weight_gap != 0.0 {
        let tape = Tape::new();
        let ts = taped_stiffness(&tape, &state.stiffness);
        let weights =
            stiffness_to_constraint_weights(&ts.k_dist, &ts.k_shape, state.stiffness.k_vol, cset);
        let x0: Vec<V3<Var<'_>>> = x_prev.iter().map(|p| V3::lit(*p)).collect();
        let xt = pbd_step_positions(&x0, None, mesh, u, cset, &weights, solver_cfg)?;
        let (loss, _) = loss_gap(&xt, mesh, z, cset, map_cfg)?;
        let grads = tape.backward(loss)?;
        accumulate(&mut theta_grad, &grads, &ts.theta, online_cfg.weight_gap);
    }

    // History term: one tape per evaluation over the sampled snapshots.
    if online_cfg.weight_hist != 0.0 && !sampled.is_empty() {
        let tape = Tape::new();
        let ts = taped_stiffness(&tape, &state.stiffness);
        let weights =
            stiffness_to_constraint_weights(&ts.k_dist, &ts.k_shape, state.stiffness.k_vol, cset);
        let loss = loss_hist(&sampled, mesh, cset, &weights, solver_cfg)?;
        let grads = tape.backward(loss)?;
        accumulate(&mut theta_grad, &grads, &ts.theta, online_cfg.weight_hist);
    }

    // Smoothness term.
    if online_cfg.weight_smooth != 0.0 {
        let tape = Tape::new();
        let ts = taped_stiffness(&tape, &state.stiffness);
        let loss = loss_smooth_mesh(&ts.k_dist, &ts.k_shape, mesh);
        let grads = tape.backward(loss)?;
        accumulate(&mut theta_grad, &grads, &ts.theta, online_cfg.weight_smooth);
    }

    // Commit: Adam step, snapshot, state correction.
    let mut theta = state.theta();
    state.optimizer.update(&mut theta, &theta_grad);
    state.set_theta(&theta);

    let corrected: Vec<Vec3> = x_t.iter().zip(&residual.delta).map(|(p, d)| *p + *d).collect();
    state.buffer.push(frame, corrected.clone());
    mesh.positions = corrected;
    for v in &mut mesh.velocities {
        *v = Vec3::zero();
    }

    Ok(FrameResult {
        predicted: x_t,
        residual,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::constraints::{DistanceConstraint, StiffnessBounds};
    use crate::geometry::build_grid_shell;
    use rand::rngs::StdRng;

    #[test]
    fn smooth_examples() {
        let tri = [[0usize, 1, 2]];
        assert_eq!(loss_smooth(&[1.0, 1.0, 1.0], &tri), 0.0);
        let l = loss_smooth(&[1.0, 1.0, 2.0], &tri);
        assert!((l - 2.0).abs() < 1e-15);
        let doubled = loss_smooth(&[1.0, 1.0, 3.0], &tri);
        assert!((doubled - 8.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_gradient_matches_fd() {
        let elements = [[0usize, 1, 2], [1, 2, 3]];
        let k0 = [0.4, 1.3, 0.9, 2.2];
        let tape = Tape::new();
        let k: Vec<Var<'_>> = k0.iter().map(|&v| tape.input(v)).collect();
        let loss = loss_smooth(&k, &elements);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff_gradient(|v| loss_smooth(v, &elements), &k0, 1e-6);
        for (v, f) in k.iter().zip(&fd) {
            assert!((grads.get(*v) - f).abs() < 1e-8);
        }
    }

    #[test]
    fn frobenius_homogeneity() {
        let rows = vec![Vec3::new(1.0, 2.0, 2.0), Vec3::new(0.0, 3.0, 4.0)];
        let doubled: Vec<Vec3> = rows.iter().map(|r| r.scale(2.0)).collect();
        let a = frobenius_norm(&rows);
        let b = frobenius_norm(&doubled);
        assert!((b - 2.0 * a).abs() < 1e-9);
        assert!((a - 34.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn buffer_capacity_and_sampling_frequency() {
        let mut buf = SnapshotBuffer::new(20, 4);
        for f in 0..50u64 {
            buf.push(f, vec![Vec3::zero()]);
        }
        assert_eq!(buf.len(), 20);
        assert_eq!(buf.entries[0].0, 30);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 20];
        let draws = 100_000;
        for _ in 0..draws {
            for s in buf.sample(&mut rng) {
                counts[(s.0 - 30) as usize] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.01, "slot frequency {freq}");
        }
    }

    #[test]
    fn adam_replay_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(5);
        use rand::Rng as _;
        let grads: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |grads: &[Vec<f64>]| {
            let mut opt = OptimizerState::new(6);
            let mut theta = vec![0.2; 6];
            for g in grads {
                opt.update(&mut theta, g);
            }
            theta
        };
        assert_eq!(run(&grads), run(&grads));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut opt = OptimizerState::new(3);
        let mut theta = vec![1.0, -2.0, 0.5];
        let before = theta.clone();
        for _ in 0..10 {
            opt.update(&mut theta, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn presets() {
        let b = StiffnessBounds::default();
        let k2 = init_stiffness(StiffnessPreset::K2, 5, b).unwrap();
        for v in k2.k_dist() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        for v in k2.k_shape() {
            assert!((v - K_SHAPE_CLAMP).abs() < 1e-9);
        }
        let k3 = init_stiffness(StiffnessPreset::K3, 5, b).unwrap();
        assert!((k3.k_dist()[0] - 0.2).abs() < 1e-9);
        assert!((k3.k_shape()[0] - 0.005).abs() < 1e-9);
        assert!(init_stiffness(
            StiffnessPreset::Custom {
                k_dist: 10.0,
                k_shape: 0.01
            },
            5,
            b
        )
        .is_err());
    }

    #[test]
    fn hist_zero_at_satisfied_rest_without_gravity() {
        let mesh = build_grid_shell(3, 3, 0.1).unwrap();
        let cset = ConstraintSet::from_mesh(&mesh).unwrap();
        let field = StiffnessField::uniform(9, 1.0, 0.005, StiffnessBounds::default()).unwrap();
        let weights = field.constraint_weights(&cset);
        let cfg = SolverConfig {
            gravity: Vec3::zero(),
            ..SolverConfig::default()
        };
        let snap = (0u64, mesh.positions.clone());
        let l = loss_hist(&[&snap], &mesh, &cset, &weights, &cfg).unwrap();
        assert!(l < 1e-9, "hist loss {l}");
    }

    #[test]
    fn hist_monotone_in_stiffness_on_stretched_edge() {
        // A stretched two-particle system drifts more per step the
        // stiffer the constraint.
        let positions = vec![Vec3::zero(), Vec3::new(1.5, 0.0, 0.0)];
        let mesh = DeformableMesh {
            kind: MeshKind::ThinShell,
            positions: positions.clone(),
            rest_positions: vec![Vec3::zero(), Vec3::new(1.0, 0.0, 0.0)],
            velocities: vec![Vec3::zero(); 2],
            masses: vec![0.01; 2],
            edges: vec![[0, 1]],
            triangles: vec![],
            tetrahedra: vec![],
            surface_indices: vec![0, 1],
            pinned_indices: vec![],
            grasped_indices: vec![],
        };
        let cset = ConstraintSet {
            distance: vec![DistanceConstraint {
                i: 0,
                j: 1,
                rest_length: 1.0,
            }],
            ..Default::default()
        };
        let cfg = SolverConfig {
            gravity: Vec3::zero(),
            ..SolverConfig::default()
        };
        let snap = (0u64, positions);
        let mut prev = 0.0;
        for k in [0.01, 0.1, 1.0, 5.0] {
            let weights = ConstraintWeights {
                distance: vec![k],
                volume: vec![],
                shape: vec![],
            };
            let l = loss_hist(&[&snap], &mesh, &cset, &weights, &cfg).unwrap();
            assert!(l > prev, "k={k}: {l} vs {prev}");
            prev = l;
        }
    }

    #[test]
    fn online_step_zero_loss_leaves_theta() {
        let mut mesh = build_grid_shell(3, 3, 0.1).unwrap();
        let cset = ConstraintSet::from_mesh(&mesh).unwrap();
        let online_cfg = OnlineConfig::default();
        let field = StiffnessField::uniform(9, 1.0, 0.005, StiffnessBounds::default()).unwrap();
        let mut state = OnlineState::new(field, &online_cfg, 3);
        let theta_before = state.theta();
        let z = PointCloud::new(mesh.positions.clone()).unwrap();
        let solver_cfg = SolverConfig {
            gravity: Vec3::zero(),
            ..SolverConfig::default()
        };
        let map_cfg = ResidualConfig {
            learning_rate: 0.1,
            ..ResidualConfig::default()
        };
        let r = online_step(
            &mut mesh,
            0,
            &Control::hold(),
            &z,
            &cset,
            &map_cfg,
            &solver_cfg,
            &online_cfg,
            &mut state,
        )
        .unwrap();
        assert!(r.losses.gap < 1e-9);
        assert_eq!(r.losses.hist, 0.0);
        assert_eq!(r.losses.smooth, 0.0);
        let dtheta: f64 = state
            .theta()
            .iter()
            .zip(&theta_before)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(dtheta < 1e-9, "theta moved by {dtheta}");
        assert_eq!(state.buffer.len(), 1);
    }

    #[test]
    fn bounds_hold_under_adversarial_updates() {
        let mut rng = StdRng::seed_from_u64(11);
        use rand::Rng as _;
        let mut field = StiffnessField::uniform(4, 1.0, 0.01, StiffnessBounds::default()).unwrap();
        let mut opt = OptimizerState::new(8);
        let mut theta: Vec<f64> = field
            .theta_dist
            .iter()
            .chain(&field.theta_shape)
            .copied()
            .collect();
        for _ in 0..10_000 {
            let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-100.0..100.0)).collect();
            opt.update(&mut theta, &g);
        }
        field.theta_dist.copy_from_slice(&theta[..4]);
        field.theta_shape.copy_from_slice(&theta[4..]);
        for v in field.k_dist() {
            assert!(v > 0.0 && v < 10.0);
        }
        for v in field.k_shape() {
            assert!(v > 0.0 && v < 0.02);
        }
    }
}
