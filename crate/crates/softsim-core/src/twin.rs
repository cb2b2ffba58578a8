//! Synthetic hidden-parameter ground truth: a second simulation with
//! its own (unknown to the estimator) stiffness field, a noisy surface
//! point-cloud observation model, scripted control trajectories and
//! keypoint selection.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::{
    stiffness_to_constraint_weights, ConstraintSet, ConstraintWeights, K_VOL_FIXED,
};
use crate::geometry::{boundary_faces, DeformableMesh, MeshKind, PointCloud};
use crate::math::{f64_cos, f64_ln, f64_sqrt, Vec3};
use crate::solver::{pbd_step, Control, SolverConfig, SolverError};

/// Hidden-parameter and observation settings for the twin.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TwinConfig {
    /// Per-particle hidden distance stiffness k*.
    pub true_k_dist: Vec<f64>,
    /// Per-particle hidden shape stiffness k*.
    pub true_k_shape: Vec<f64>,
    /// Isotropic observation noise, meters.
    pub noise_sigma: f64,
    /// Points sampled per observation frame.
    pub points_per_frame: usize,
    pub seed: u64,
    /// Run the twin with half the time step (two substeps) and four
    /// times the iterations, so the estimator's solver no longer matches
    /// the data-generating process exactly.
    pub model_mismatch: bool,
}

/// The ground-truth simulation with hidden parameters.
#[derive(Clone, Debug)]
pub struct Twin {
    pub mesh: DeformableMesh,
    pub cset: ConstraintSet,
    weights: ConstraintWeights<f64>,
    cfg: TwinConfig,
    solver_cfg: SolverConfig,
    /// Observation triangles: mesh faces for thin shells, boundary faces
    /// for volumetric meshes.
    obs_triangles: Vec<[usize; 3]>,
}

impl Twin {
    pub fn new(
        mesh: DeformableMesh,
        cfg: TwinConfig,
        solver_cfg: SolverConfig,
    ) -> Result<Self, crate::constraints::ConstraintError> {
        assert_eq!(cfg.true_k_dist.len(), mesh.particle_count());
        assert_eq!(cfg.true_k_shape.len(), mesh.particle_count());
        let cset = ConstraintSet::from_mesh(&mesh)?;
        let weights =
            stiffness_to_constraint_weights(&cfg.true_k_dist, &cfg.true_k_shape, K_VOL_FIXED, &cset);
        let obs_triangles = match mesh.kind {
            MeshKind::ThinShell => mesh.triangles.clone(),
            MeshKind::Volumetric => {
                if mesh.triangles.is_empty() {
                    boundary_faces(&mesh.tetrahedra)
                } else {
                    mesh.triangles.clone()
                }
            }
        };
        Ok(Self {
            mesh,
            cset,
            weights,
            cfg,
            solver_cfg,
        obs_triangles,
        })
    }

    /// Advances the hidden simulation one frame under the given control.
    pub fn step(&mut self, u: &Control) -> Result<(), SolverError> {
        if self.cfg.model_mismatch {
            let sub = SolverConfig {
                dt: self.solver_cfg.dt * 0.5,
                iterations: self.solver_cfg.iterations * 4,
                ..self.solver_cfg
            };
            pbd_step(&mut self.mesh, u, &self.cset, &self.weights, &sub)?;
            pbd_step(&mut self.mesh, u, &self.cset, &self.weights, &sub)
        } else {
            pbd_step(&mut self.mesh, u, &self.cset, &self.weights, &self.solver_cfg)
        }
    }

    /// Noisy surface point cloud, sampled uniformly by area over the
    /// observation triangles. Deterministic in (seed, frame).
    pub fn observe(&self, frame: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(frame.wrapping_add(1));
        let x = &self.mesh.positions;
        let areas: Vec<f64> = self
            .obs_triangles
            .iter()
            .map(|t| (x[t[1]] - x[t[0]]).cross(x[t[2]] - x[t[0]]).norm() * 0.5)
            .collect();
        let total: f64 = areas.iter().sum();
        assert!(total > 0.0, "degenerate observation surface");
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        let mut points = Vec::with_capacity(self.cfg.points_per_frame);
        for _ in 0..self.cfg.points_per_frame {
            let r = rng.gen_range(0.0..total);
            let ti = cumulative.partition_point(|&c| c <= r).min(areas.len() - 1);
            let t = self.obs_triangles[ti];
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let p = x[t[0]] + (x[t[1]] - x[t[0]]).scale(u) + (x[t[2]] - x[t[0]]).scale(v);
            let noise = if self.cfg.noise_sigma > 0.0 {
                Vec3::new(
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                )
                .scale(self.cfg.noise_sigma)
            } else {
                Vec3::zero()
            };
            points.push(p + noise);
        }
        PointCloud::new(points).expect("sampled points are finite")
    }

    pub fn config(&self) -> &TwinConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ConstraintWeights<f64> {
        &self.weights
    }
}

/// Standard normal draw via Box-Muller.
fn normal<G: Rng>(rng: &mut G) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    f64_sqrt(-2.0 * f64_ln(u1)) * f64_cos(2.0 * core::f64::consts::PI * u2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrajectoryKind {
    EdgePull,
    LiftFold,
    Poke,
}

/// Cubic ease-in-out on [0, 1].
fn ease(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Per-frame controls tracing a smooth path of the grasped particles
/// with peak displacement `amplitude`.
pub fn scripted_trajectory(
    kind: TrajectoryKind,
    frames: usize,
    amplitude: f64,
    mesh: &DeformableMesh,
) -> Vec<Control> {
    assert!(frames >= 1);
    if amplitude == 0.0 || mesh.grasped_indices.is_empty() {
        return vec![Control::hold(); frames];
    }
    let dir = match kind {
        TrajectoryKind::EdgePull => Vec3::new(1.0, 0.0, 0.0),
        TrajectoryKind::LiftFold => Vec3::new(-0.6, 0.0, 0.8),
        TrajectoryKind::Poke => Vec3::new(0.0, 0.0, -1.0),
    };
    (0..frames)
        .map(|f| {
            let t = if frames == 1 {
                1.0
            } else {
                f as f64 / (frames - 1) as f64
            };
            let s = match kind {
                TrajectoryKind::Poke => {
                    // out and back: returns to the start by the last frame
                    if t <= 0.5 {
                        ease(2.0 * t)
                    } else {
                        ease(2.0 * (1.0 - t))
                    }
                }
                _ => ease(t),
            };
            let offset = dir.scale(amplitude * s);
            Control {
                targets: mesh
                    .grasped_indices
                    .iter()
                    .map(|&i| (i, mesh.rest_positions[i] + offset))
                    .collect(),
            }
        })
        .collect()
}

/// Picks the `count` particles with the largest rest-to-final
/// displacement under the trajectory, by pre-running a copy of the twin.
/// Ties break toward the lower index; the result is sorted.
pub fn select_keypoints(
    twin: &Twin,
    trajectory: &[Control],
    count: usize,
) -> Result<Vec<usize>, SolverError> {
    let mut probe = twin.clone();
    for u in trajectory {
        probe.step(u)?;
    }
    let mut scored: Vec<(usize, f64)> = probe
        .mesh
        .positions
        .iter()
        .zip(&probe.mesh.rest_positions)
        .enumerate()
        .map(|(i, (p, r))| (i, (*p - *r).norm()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = scored
        .into_iter()
        .take(count.min(twin.mesh.particle_count()))
        .map(|(i, _)| i)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid_shell;
    use crate::mapping::chamfer;

    fn shell_twin(noise: f64, m: usize, k_dist: f64) -> Twin {
        let mut mesh = build_grid_shell(4, 4, 0.1).unwrap();
        mesh.pin(&[0, 1, 2, 3]);
        mesh.grasp(&[12, 13, 14, 15]);
        let n = mesh.particle_count();
        let cfg = TwinConfig {
            true_k_dist: vec![k_dist; n],
            true_k_shape: vec![0.005; n],
            noise_sigma: noise,
            points_per_frame: m,
            seed: 42,
            model_mismatch: false,
        };
        Twin::new(mesh, cfg, SolverConfig::default()).unwrap()
    }

    #[test]
    fn hold_without_gravity_is_constant() {
        let mut mesh = build_grid_shell(3, 3, 0.1).unwrap();
        mesh.grasp(&[8]);
        let n = mesh.particle_count();
        let cfg = TwinConfig {
            true_k_dist: vec![1.0; n],
            true_k_shape: vec![0.005; n],
            noise_sigma: 0.0,
            points_per_frame: 10,
            seed: 1,
            model_mismatch: false,
        };
        let solver = SolverConfig {
            gravity: Vec3::zero(),
            ..SolverConfig::default()
        };
        let mut twin = Twin::new(mesh, cfg, solver).unwrap();
        let before = twin.mesh.positions.clone();
        for _ in 0..5 {
            twin.step(&Control::hold()).unwrap();
        }
        for (a, b) in before.iter().zip(&twin.mesh.positions) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn soft_half_deflects_more() {
        // Soft rows near the pinned edge, stiff rows near the pulled
        // edge; pulling the far edge stretches the soft region more.
        let mut mesh = build_grid_shell(6, 6, 0.1).unwrap();
        mesh.pin(&[0, 1, 2, 3, 4, 5]);
        mesh.grasp(&[30, 31, 32, 33, 34, 35]);
        let n = mesh.particle_count();
        let mut k = vec![5.0; n];
        for (i, kv) in k.iter_mut().enumerate() {
            if i / 6 < 3 {
                *kv = 0.05; // soft half (rows 0..3)
            }
        }
        let cfg = TwinConfig {
            true_k_dist: k,
            true_k_shape: vec![0.001; n],
            noise_sigma: 0.0,
            points_per_frame: 10,
            seed: 7,
            model_mismatch: false,
        };
        let solver = SolverConfig {
            gravity: Vec3::zero(),
            ..SolverConfig::default()
        };
        let mut twin = Twin::new(mesh, cfg, solver).unwrap();
        let traj = scripted_trajectory(TrajectoryKind::EdgePull, 40, 0.05, &twin.mesh);
        for u in &traj {
            twin.step(u).unwrap();
        }
        // The pull shears the sheet, so elongation shows up in the
        // edges that connect consecutive rows; compare region-wise.
        let stretch = |rows: core::ops::Range<usize>, t: &Twin| -> f64 {
            let mut worst = 0.0f64;
            for r in rows {
                for c in 0..6 {
                    let (i, j) = (r * 6 + c, (r + 1) * 6 + c);
                    let now = (t.mesh.positions[i] - t.mesh.positions[j]).norm();
                    let rest = (t.mesh.rest_positions[i] - t.mesh.rest_positions[j]).norm();
                    worst = worst.max(now - rest);
                }
            }
            worst
        };
        let soft = stretch(0..2, &twin);
        let stiff = stretch(3..5, &twin);
        assert!(
            soft > stiff,
            "soft stretch {soft} not larger than stiff {stiff}"
        );
    }

    #[test]
    fn observe_points_on_triangle_planes() {
        let twin = shell_twin(0.0, 500, 1.0);
        let cloud = twin.observe(3);
        // thin shell at rest lies in the z = 0 plane
        for p in &cloud.points {
            assert!(p.z.abs() < 1e-9);
        }
    }

    #[test]
    fn observe_deterministic_per_seed_and_frame() {
        let twin = shell_twin(0.0005, 100, 1.0);
        let a = twin.observe(5);
        let b = twin.observe(5);
        assert_eq!(a.points, b.points);
        let c = twin.observe(6);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn observation_chamfer_decreases_with_density() {
        let twin = shell_twin(0.0, 10, 1.0);
        let dense: Vec<Vec3> = {
            let mut t2 = twin.clone();
            t2.cfg.points_per_frame = 100_000;
            t2.observe(0).points
        };
        let dense_cloud = PointCloud::new(dense).unwrap();
        let mut prev = f64::INFINITY;
        for m in [100usize, 1000, 10_000] {
            let mut t2 = twin.clone();
            t2.cfg.points_per_frame = m;
            let c = chamfer(&t2.observe(0), &dense_cloud);
            assert!(c < prev, "m={m}: {c} vs {prev}");
            prev = c;
        }
    }

    #[test]
    fn trajectory_examples() {
        let mut mesh = build_grid_shell(3, 3, 0.1).unwrap();
        mesh.grasp(&[8]);
        let hold = scripted_trajectory(TrajectoryKind::EdgePull, 10, 0.0, &mesh);
        assert!(hold.iter().all(Control::is_hold));

        let pull = scripted_trajectory(TrajectoryKind::EdgePull, 100, 0.03, &mesh);
        let base = mesh.rest_positions[8];
        let mut prev = -1.0;
        for u in &pull {
            let d = (u.targets[0].1 - base).norm();
            assert!(d >= prev);
            prev = d;
        }
        assert!((prev - 0.03).abs() < 1e-12);

        let poke = scripted_trajectory(TrajectoryKind::Poke, 101, 0.02, &mesh);
        assert_eq!(poke[0].targets[0].1, poke[100].targets[0].1);
        let mid = (poke[50].targets[0].1 - base).norm();
        assert!((mid - 0.02).abs() < 1e-12);
    }

    #[test]
    fn keypoints_prefer_deformed_region() {
        let twin = shell_twin(0.0, 10, 0.5);
        let traj = scripted_trajectory(TrajectoryKind::LiftFold, 30, 0.05, &twin.mesh);
        let kp = select_keypoints(&twin, &traj, 6).unwrap();
        assert_eq!(kp.len(), 6);
        // Grasped row moves the full amplitude; it must dominate the
        // selection over the pinned row, which never moves.
        for i in 0..4 {
            assert!(!kp.contains(&i), "pinned particle {i} selected");
        }
    }

    #[test]
    fn mismatch_twin_still_runs() {
        let mut twin = shell_twin(0.0, 10, 1.0);
        twin.cfg.model_mismatch = true;
        let traj = scripted_trajectory(TrajectoryKind::EdgePull, 5, 0.01, &twin.mesh);
        for u in &traj {
            twin.step(u).unwrap();
        }
        for p in &twin.mesh.positions {
            assert!(p.is_finite());
        }
    }
}
