//! Forward XPBD step: position prediction, sequential (Gauss-Seidel)
//! constraint projection with compliance, and boundary handling.
//!
//! The step is generic over the scalar type so the same code runs in
//! plain `f64` and recorded on an autodiff tape, in which case the
//! returned positions carry gradients with respect to the constraint
//! weights (and through them the stiffness parameters).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::constraints::{
    volume_gradient, ConstraintSet, ConstraintWeights, COINCIDENT_EPS,
};
use crate::geometry::DeformableMesh;
use crate::math::{Real, Vec3, M3, V3};

/// Time step and projection settings.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SolverConfig {
    pub dt: f64,
    pub iterations: usize,
    pub gravity: Vec3,
    /// Zero velocities at the end of every step and treat each frame as
    /// an equilibrium-seeking solve.
    pub quasi_static: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            iterations: 20,
            gravity: Vec3::new(0.0, 0.0, -9.81),
            quasi_static: true,
        }
    }
}

/// Positional control for grasped particles. An empty target list holds
/// every grasped particle in place.
#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Control {
    /// `(grasped particle index, world-frame target)` pairs.
    pub targets: Vec<(usize, Vec3)>,
}

impl Control {
    pub fn hold() -> Self {
        Self::default()
    }

    pub fn is_hold(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolverError {
    /// Projection produced a non-finite position at this iteration.
    Divergence { iteration: usize },
    InvalidControl { message: String },
}

impl core::fmt::Display for SolverError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SolverError::Divergence { iteration } => {
                write!(f, "solver diverged at projection iteration {iteration}")
            }
            SolverError::InvalidControl { message } => write!(f, "invalid control: {message}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SolverError {}

/// Inverse masses with pinned and grasped particles treated as static
/// (infinite mass).
pub fn inverse_masses(mesh: &DeformableMesh) -> Vec<f64> {
    (0..mesh.particle_count())
        .map(|i| {
            if mesh.is_pinned(i) || mesh.is_grasped(i) {
                0.0
            } else {
                1.0 / mesh.masses[i]
            }
        })
        .collect()
}

fn check_control(mesh: &DeformableMesh, u: &Control) -> Result<(), SolverError> {
    for (i, target) in &u.targets {
        if !mesh.is_grasped(*i) {
            return Err(SolverError::InvalidControl {
                message: format!("particle {i} is not grasped"),
            });
        }
        if !target.is_finite() {
            return Err(SolverError::InvalidControl {
                message: format!("target for particle {i} is not finite"),
            });
        }
    }
    Ok(())
}

/// Moves grasped particles to their control targets.
pub fn apply_control(mesh: &mut DeformableMesh, u: &Control) -> Result<(), SolverError> {
    check_control(mesh, u)?;
    for (i, target) in &u.targets {
        mesh.positions[*i] = *target;
    }
    Ok(())
}

/// One XPBD step over explicit positions.
///
/// `velocities`, when given, feed the position prediction (ignored in
/// the quasi-static regime). Grasped targets and pinned particles have
/// zero inverse mass, so projection never displaces them. The Lagrange
/// multipliers are reset at the start of the step and accumulated across
/// the projection iterations.
///
/// Shape-matching clusters are projected against their current goal
/// positions; the fitted rotation is computed on plain values each
/// iteration and held constant for differentiation, and only the
/// residual's own particle receives the correction. Distance and volume
/// projections use the exact constraint gradients.
pub fn pbd_step_positions<R: Real>(
    x_prev: &[V3<R>],
    velocities: Option<&[Vec3]>,
    mesh: &DeformableMesh,
    u: &Control,
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
    cfg: &SolverConfig,
) -> Result<Vec<V3<R>>, SolverError> {
    check_control(mesh, u)?;
    let w = inverse_masses(mesh);
    let dt2 = cfg.dt * cfg.dt;
    let mut x = x_prev.to_vec();
    for (i, target) in &u.targets {
        x[*i] = V3::lit(*target);
    }
    // Predict: x + dt v + dt^2 g for dynamic particles.
    for i in 0..x.len() {
        if w[i] > 0.0 {
            if let Some(v) = velocities {
                if !cfg.quasi_static {
                    x[i] = x[i] + V3::lit(v[i].scale(cfg.dt));
                }
            }
            x[i] = x[i] + V3::lit(cfg.gravity.scale(dt2));
        }
    }

    let mut lambda_dist = vec![R::lit(0.0); cset.distance.len()];
    let mut lambda_vol = vec![R::lit(0.0); cset.volume.len()];
    let shape_scalars: usize = cset.shape.iter().map(|c| c.members.len()).sum();
    let mut lambda_shape = vec![V3::<R>::zero(); shape_scalars];

    for iter in 0..cfg.iterations {
        for (ci, d) in cset.distance.iter().enumerate() {
            let k = weights.distance[ci];
            if k.val() <= 0.0 {
                continue;
            }
            let alpha = (k * R::lit(dt2)).recip();
            let (wi, wj) = (w[d.i], w[d.j]);
            let denom_val = wi + wj + alpha.val();
            if denom_val <= 0.0 {
                continue;
            }
            let diff = x[d.i] - x[d.j];
            let (c, dir) = if diff.norm_sq().val() < COINCIDENT_EPS * COINCIDENT_EPS {
                (R::lit(-d.rest_length), V3::lit(Vec3::new(1.0, 0.0, 0.0)))
            } else {
                let len = diff.norm();
                (len - R::lit(d.rest_length), diff.scale(len.recip()))
            };
            let lambda = lambda_dist[ci];
            let dl = -(c + alpha * lambda) / (R::lit(wi + wj) + alpha);
            lambda_dist[ci] = lambda + dl;
            x[d.i] = x[d.i] + dir.scale(dl * R::lit(wi));
            x[d.j] = x[d.j] - dir.scale(dl * R::lit(wj));
        }

        for (ci, v) in cset.volume.iter().enumerate() {
            let k = weights.volume[ci];
            if k.val() <= 0.0 {
                continue;
            }
            let alpha = (k * R::lit(dt2)).recip();
            let grads = volume_gradient(v, &x);
            let mut denom = alpha;
            let mut denom_w = 0.0;
            for (idx, g) in v.indices.iter().zip(&grads) {
                denom = denom + g.norm_sq() * R::lit(w[*idx]);
                denom_w += w[*idx] * g.norm_sq().val();
            }
            if denom_w + alpha.val() <= 0.0 {
                continue;
            }
            let [i, j, kk, l] = v.indices;
            let b = x[j] - x[i];
            let cc = x[kk] - x[i];
            let dd = x[l] - x[i];
            let c = b.cross(cc).dot(dd) * R::lit(1.0 / 6.0) - R::lit(v.rest_volume);
            let lambda = lambda_vol[ci];
            let dl = -(c + alpha * lambda) / denom;
            lambda_vol[ci] = lambda + dl;
            for (idx, g) in v.indices.iter().zip(&grads) {
                x[*idx] = x[*idx] + g.scale(dl * R::lit(w[*idx]));
            }
        }

        let mut offset = 0;
        for (ci, cluster) in cset.shape.iter().enumerate() {
            let size = cluster.members.len();
            let k = weights.shape[ci];
            if k.val() <= 0.0 {
                offset += size;
                continue;
            }
            let alpha = (k * R::lit(dt2)).recip();
            let mpos = cluster.gather(&x);
            let centroid = cluster.centroid_members(&mpos);
            let vals: Vec<Vec3> = mpos.iter().map(|p| p.value()).collect();
            let rot = M3::<R>::lit(cluster.rotation_members(&vals));
            for (local, &q) in cluster.members.iter().enumerate() {
                let wq = w[q];
                if wq + alpha.val() <= 0.0 {
                    continue;
                }
                let goal = rot.mul_vec(V3::lit(cluster.rest_offsets[local])) + centroid;
                let r = x[q] - goal;
                let denom = R::lit(wq) + alpha;
                let lambda = lambda_shape[offset + local];
                let dl = -(r + lambda.scale(alpha)).scale(denom.recip());
                lambda_shape[offset + local] = lambda + dl;
                x[q] = x[q] + dl.scale(R::lit(wq));
            }
            offset += size;
        }

        for p in &x {
            if !p.value().is_finite() {
                return Err(SolverError::Divergence { iteration: iter });
            }
        }
    }
    Ok(x)
}

/// One XPBD step updating the mesh in place, including velocity
/// bookkeeping.
pub fn pbd_step(
    mesh: &mut DeformableMesh,
    u: &Control,
    cset: &ConstraintSet,
    weights: &ConstraintWeights<f64>,
    cfg: &SolverConfig,
) -> Result<(), SolverError> {
    let prev = mesh.positions.clone();
    let new = pbd_step_positions(
        &prev,
        Some(&mesh.velocities.clone()),
        mesh,
        u,
        cset,
        weights,
        cfg,
    )?;
    if cfg.quasi_static {
        for v in &mut mesh.velocities {
            *v = Vec3::zero();
        }
    } else {
        for ((v, new_p), old_p) in mesh.velocities.iter_mut().zip(&new).zip(&prev) {
            *v = (*new_p - *old_p).scale(1.0 / cfg.dt);
        }
    }
    mesh.positions = new;
    Ok(())
}
