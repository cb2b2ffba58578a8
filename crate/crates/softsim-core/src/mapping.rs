//! Residual mapping g(x_t, z_t): non-rigid registration of the
//! simulation state to an observed surface point cloud by gradient
//! descent on Chamfer distance plus constraint energy.
//!
//! The descent runs in plain `f64` to pick a safe learning rate (halving
//! and restarting on a non-decreasing objective), then the accepted
//! schedule is replayed generically so the last few steps can be
//! recorded on an autodiff tape with the state as differentiable input.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::constraints::{energy, energy_descent_direction, ConstraintSet, ConstraintWeights};
use crate::geometry::{DeformableMesh, MeshKind, PointCloud};
use crate::math::{Real, Vec3, V3};

/// Inner-loop settings for the residual mapping.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResidualConfig {
    pub inner_steps: usize,
    pub learning_rate: f64,
    /// Uniform physical-realness weights per family (k_c').
    pub realness_dist: f64,
    pub realness_vol: f64,
    pub realness_shape: f64,
    /// How many of the final descent steps stay on the autodiff tape;
    /// earlier steps are treated as constants.
    pub taped_steps: usize,
    /// Restart-with-halved-rate attempts when the objective fails to
    /// decrease or goes non-finite.
    pub max_restarts: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            inner_steps: 30,
            learning_rate: 50.0,
            realness_dist: 1.0,
            realness_vol: 1.0,
            realness_shape: 0.01,
            taped_steps: 10,
            max_restarts: 3,
        }
    }
}

impl ResidualConfig {
    fn realness_weights(&self, cset: &ConstraintSet) -> ConstraintWeights<f64> {
        ConstraintWeights::uniform(cset, self.realness_dist, self.realness_vol, self.realness_shape)
    }
}

/// Estimated residual deformation, one displacement row per particle.
#[derive(Clone, Debug)]
pub struct ResidualField {
    pub delta: Vec<Vec3>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Restarts spent before the accepted schedule (0 = first try).
    pub restarts: usize,
    /// True when every restart failed and the mapping fell back to
    /// delta = 0.
    pub fell_back: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingError(pub String);

impl core::fmt::Display for MappingError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "residual mapping diverged: {}; consider reducing the learning rate",
            self.0
        )
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MappingError {}

/// Static kd-tree over 3D points for nearest-neighbor queries.
pub struct KdTree {
    /// Permutation of input indices laid out as a balanced tree in
    /// subtree-contiguous order.
    order: Vec<u32>,
    points: Vec<Vec3>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = Self {
            order: Vec::new(),
            points: points.to_vec(),
        };
        build_recursive(&tree.points, &mut order, 0);
        tree.order = order;
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest stored point and its squared distance.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest-neighbor query on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        let d2 = (q - p).norm_sq();
        if d2 < best.1 {
            *best = (idx, d2);
        }
        let axis = depth % 3;
        let diff = q.get(axis) - p.get(axis);
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff < best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build_recursive(points: &[Vec3], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let (pa, pb) = (points[a as usize].get(axis), points[b as usize].get(axis));
        pa.partial_cmp(&pb).expect("finite coordinates")
    });
    let (left, rest) = order.split_at_mut(mid);
    build_recursive(points, left, depth + 1);
    build_recursive(points, &mut rest[1..], depth + 1);
}

fn values<R: Real>(pts: &[V3<R>]) -> Vec<Vec3> {
    pts.iter().map(|p| p.value()).collect()
}

/// Bidirectional sum of squared nearest-neighbor distances. Assignments
/// are found on plain values and frozen for differentiation.
pub fn chamfer_points<R: Real>(a: &[V3<R>], b: &[V3<R>]) -> R {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of empty cloud");
    let ta = KdTree::build(&values(a));
    let tb = KdTree::build(&values(b));
    let mut total = R::lit(0.0);
    for p in a {
        let (j, _) = tb.nearest(p.value());
        total = total + (*p - b[j]).norm_sq();
    }
    for q in b {
        let (i, _) = ta.nearest(q.value());
        total = total + (*q - a[i]).norm_sq();
    }
    total
}

/// Chamfer distance between two observed clouds.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    chamfer_points(&a.points, &b.points)
}

/// Constraint energy under the uniform user-defined realness weights;
/// identical formula to [`energy`] with k_c' in place of k_c.
pub fn physical_realness<R: Real>(
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
    x: &[V3<R>],
) -> R {
    energy(cset, weights, x)
}

/// Surface particle indices exposed to the Chamfer term.
fn observed_indices(mesh: &DeformableMesh) -> Vec<usize> {
    match mesh.kind {
        MeshKind::ThinShell => (0..mesh.particle_count()).collect(),
        MeshKind::Volumetric => mesh.surface_indices.clone(),
    }
}

/// Objective D(x' + delta', z) + E(x + delta) at explicit positions.
fn objective<R: Real>(
    x: &[V3<R>],
    surface: &[usize],
    z_tree: &KdTree,
    z: &[Vec3],
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
) -> R {
    let surf_pts: Vec<V3<R>> = surface.iter().map(|&i| x[i]).collect();
    let surf_tree = KdTree::build(&values(&surf_pts));
    let mut d = R::lit(0.0);
    for p in &surf_pts {
        let (j, _) = z_tree.nearest(p.value());
        d = d + (*p - V3::lit(z[j])).norm_sq();
    }
    for q in z {
        let (i, _) = surf_tree.nearest(*q);
        d = d + (surf_pts[i] - V3::lit(*q)).norm_sq();
    }
    d + energy(cset, weights, x)
}

/// Gradient of the objective with respect to the particle positions,
/// with Chamfer assignments frozen at the current values and the
/// shape-matching goal held fixed (see
/// [`energy_descent_direction`]). Pinned rows are zeroed.
fn objective_gradient<R: Real>(
    x: &[V3<R>],
    mesh: &DeformableMesh,
    surface: &[usize],
    z_tree: &KdTree,
    z: &[Vec3],
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
) -> Vec<V3<R>> {
    let mut grad = energy_descent_direction(cset, weights, x);
    let surf_vals: Vec<Vec3> = surface.iter().map(|&i| x[i].value()).collect();
    let surf_tree = KdTree::build(&surf_vals);
    for (&i, pv) in surface.iter().zip(&surf_vals) {
        let (j, _) = z_tree.nearest(*pv);
        grad[i] = grad[i] + (x[i] - V3::lit(z[j])).scale(R::lit(2.0));
    }
    for q in z {
        let (local, _) = surf_tree.nearest(*q);
        let i = surface[local];
        grad[i] = grad[i] + (x[i] - V3::lit(*q)).scale(R::lit(2.0));
    }
    for (i, g) in grad.iter_mut().enumerate() {
        if mesh.is_pinned(i) {
            *g = V3::zero();
        }
    }
    grad
}

fn descend<R: Real>(
    x0: &[V3<R>],
    mesh: &DeformableMesh,
    surface: &[usize],
    z_tree: &KdTree,
    z: &[Vec3],
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
    lr: f64,
    steps: usize,
) -> Vec<V3<R>> {
    let mut delta = vec![V3::<R>::zero(); x0.len()];
    for _ in 0..steps {
        let current: Vec<V3<R>> = x0.iter().zip(&delta).map(|(p, d)| *p + *d).collect();
        let grad = objective_gradient(&current, mesh, surface, z_tree, z, cset, weights);
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d = *d - g.scale(R::lit(lr));
        }
    }
    delta
}

/// Runs the inner optimization over explicit positions, generically.
///
/// The learning-rate schedule (restarts) is decided on plain values;
/// the accepted run is then replayed with the first
/// `inner_steps - taped_steps` updates on values only and the remainder
/// in the generic scalar type, so tape memory stays bounded. When every
/// restart fails the mapping falls back to delta = 0 (no gradient).
pub fn residual_map_positions<R: Real>(
    x: &[V3<R>],
    mesh: &DeformableMesh,
    z_cloud: &PointCloud,
    cset: &ConstraintSet,
    cfg: &ResidualConfig,
) -> Result<(Vec<V3<R>>, ResidualField), MappingError> {
    assert!(cfg.inner_steps >= 1 && cfg.learning_rate > 0.0);
    let surface = observed_indices(mesh);
    if surface.is_empty() {
        return Err(MappingError(String::from("mesh has no observable surface")));
    }
    let z = &z_cloud.points;
    let z_tree = KdTree::build(z);
    let weights_f = cfg.realness_weights(cset);
    let x_val = values(x);

    let initial = objective(&x_val, &surface, &z_tree, z, cset, &weights_f);
    if !initial.is_finite() {
        return Err(MappingError(String::from("objective non-finite at delta = 0")));
    }

    // Value-level dry runs pick the schedule.
    let mut lr = cfg.learning_rate;
    let mut accepted = None;
    let mut restarts = 0;
    for attempt in 0..=cfg.max_restarts {
        let delta = descend(&x_val, mesh, &surface, &z_tree, z, cset, &weights_f, lr, cfg.inner_steps);
        let corrected: Vec<Vec3> = x_val.iter().zip(&delta).map(|(p, d)| *p + *d).collect();
        let obj = objective(&corrected, &surface, &z_tree, z, cset, &weights_f);
        if obj.is_finite() && obj <= initial {
            accepted = Some((lr, obj));
            restarts = attempt;
            break;
        }
        lr *= 0.5;
    }

    let Some((lr, final_obj)) = accepted else {
        // Every attempt overshot: report the identity mapping.
        let field = ResidualField {
            delta: vec![Vec3::zero(); x.len()],
            initial_objective: initial,
            final_objective: initial,
            restarts: cfg.max_restarts,
            fell_back: true,
        };
        return Ok((vec![V3::zero(); x.len()], field));
    };

    // Replay: constant prefix, generic suffix.
    let taped = cfg.taped_steps.min(cfg.inner_steps);
    let prefix_steps = cfg.inner_steps - taped;
    let weights_r = ConstraintWeights::<R>::lift(&weights_f);
    let prefix = descend(&x_val, mesh, &surface, &z_tree, z, cset, &weights_f, lr, prefix_steps);
    let mut delta: Vec<V3<R>> = prefix.iter().map(|d| V3::lit(*d)).collect();
    for _ in 0..taped {
        let current: Vec<V3<R>> = x.iter().zip(&delta).map(|(p, d)| *p + *d).collect();
        let grad = objective_gradient(&current, mesh, &surface, &z_tree, z, cset, &weights_r);
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d = *d - g.scale(R::lit(lr));
        }
    }

    let field = ResidualField {
        delta: values(&delta),
        initial_objective: initial,
        final_objective: final_obj,
        restarts,
        fell_back: false,
    };
    Ok((delta, field))
}

/// Residual mapping over the mesh's current positions.
pub fn residual_map(
    mesh: &DeformableMesh,
    z: &PointCloud,
    cset: &ConstraintSet,
    cfg: &ResidualConfig,
) -> Result<ResidualField, MappingError> {
    let (_, field) = residual_map_positions(&mesh.positions, mesh, z, cset, cfg)?;
    Ok(field)
}
