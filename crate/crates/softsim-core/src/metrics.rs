//! Predictive metrics: the average future gap e_t over an open-loop
//! rollout with frozen parameters, and the future keypoint error f_t
//! with nearest-neighbor particle proxies fixed at the start frame.

use alloc::vec::Vec;

use crate::constraints::{ConstraintSet, ConstraintWeights};
use crate::geometry::{DeformableMesh, PointCloud};
use crate::mapping::{KdTree, ResidualConfig};
use crate::math::Vec3;
use crate::online::{loss_gap, OnlineError};
use crate::solver::{pbd_step_positions, Control, SolverConfig};

/// Open-loop rollout from `x_t` under the given controls with frozen
/// weights; returns the state after each control.
pub fn rollout(
    x_t: &[Vec3],
    mesh: &DeformableMesh,
    cset: &ConstraintSet,
    weights: &ConstraintWeights<f64>,
    solver_cfg: &SolverConfig,
    controls: &[Control],
) -> Result<Vec<Vec<Vec3>>, crate::solver::SolverError> {
    let mut states = Vec::with_capacity(controls.len());
    let mut x = x_t.to_vec();
    for u in controls {
        x = pbd_step_positions(&x, None, mesh, u, cset, weights, solver_cfg)?;
        states.push(x.clone());
    }
    Ok(states)
}

/// Result of [`average_future_gap`].
#[derive(Clone, Copy, Debug)]
pub struct FutureGap {
    pub value: f64,
    /// Steps actually rolled out.
    pub horizon_used: usize,
    /// True when fewer than the requested steps were available.
    pub truncated: bool,
}

/// Average future gap `e_t = (1/T) sum_s |g(x_{t+s}, z_{t+s})|`.
///
/// The rollout clones the state and keeps the current weights frozen;
/// the residual mapping is evaluated for measurement only, so no
/// correction is applied mid-rollout and no caller state changes.
#[allow(clippy::too_many_arguments)]
pub fn average_future_gap(
    x_t: &[Vec3],
    mesh: &DeformableMesh,
    cset: &ConstraintSet,
    weights: &ConstraintWeights<f64>,
    solver_cfg: &SolverConfig,
    map_cfg: &ResidualConfig,
    future: &[(Control, PointCloud)],
    horizon: usize,
) -> Result<FutureGap, OnlineError> {
    assert!(horizon >= 1);
    let used = horizon.min(future.len());
    if used == 0 {
        return Ok(FutureGap {
            value: f64::NAN,
            horizon_used: 0,
            truncated: true,
        });
    }
    let controls: Vec<Control> = future[..used].iter().map(|(u, _)| u.clone()).collect();
    let states = rollout(x_t, mesh, cset, weights, solver_cfg, &controls)?;
    let mut total = 0.0;
    for (x, (_, z)) in states.iter().zip(&future[..used]) {
        let (gap, _) = loss_gap::<f64>(x, mesh, z, cset, map_cfg)?;
        total += gap;
    }
    Ok(FutureGap {
        value: total / used as f64,
        horizon_used: used,
        truncated: used < horizon,
    })
}

/// Nearest estimator particle for every keypoint, fixed at t = 0.
pub fn nearest_particle_indices(x0: &[Vec3], keypoints0: &[Vec3]) -> Vec<usize> {
    let tree = KdTree::build(x0);
    keypoints0.iter().map(|p| tree.nearest(*p).0).collect()
}

/// Future keypoint error `f_t = sum_k |p_{t+T} - (x^nn_{t+T} - x^nn_0 +
/// p_0)|` using the fixed nearest-neighbor assignment `nn`.
pub fn future_keypoint_error(
    x0: &[Vec3],
    x_future: &[Vec3],
    keypoints0: &[Vec3],
    keypoints_future: &[Vec3],
    nn: &[usize],
) -> f64 {
    assert_eq!(keypoints0.len(), keypoints_future.len());
    assert_eq!(keypoints0.len(), nn.len());
    let mut total = 0.0;
    for ((p0, pf), &i) in keypoints0.iter().zip(keypoints_future).zip(nn) {
        let predicted = x_future[i] - x0[i] + *p0;
        total += (*pf - predicted).norm();
    }
    total
}
