//! Geometric constraint families (distance, volume, shape matching),
//! their residuals, gradients and energy, and the per-particle stiffness
//! field that maps to per-constraint weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{input_positions, Tape};
use crate::geometry::{one_ring_neighbors, signed_tet_volume, DeformableMesh};
use crate::math::{polar_rotation, sigmoid, sym_eig_min, logit, Mat3, Real, Vec3, M3, V3};

/// Volumetric constraint weight is never optimized.
pub const K_VOL_FIXED: f64 = 1e10;

/// Distance below which two constrained particles count as coincident;
/// the gradient then falls back to a fixed axis instead of producing NaN.
pub const COINCIDENT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintFamily {
    Distance,
    Volume,
    ShapeMatching,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VolumeConstraint {
    pub indices: [usize; 4],
    pub rest_volume: f64,
}

/// Rank classification of a cluster's rest shape; planar clusters (all
/// thin-shell clusters) need a completed third direction before the
/// polar decomposition is meaningful.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ClusterGeometry {
    Full,
    /// Orthonormal rest-plane basis (p, q) and unit normal n.
    Planar { p: Vec3, q: Vec3, n: Vec3 },
    /// Rank < 2 rest shape; the fit is translation-only.
    Degenerate,
}

/// One shape-matching cluster: a particle and its topological 1-ring.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapeCluster {
    pub members: Vec<usize>,
    pub member_masses: Vec<f64>,
    pub total_mass: f64,
    pub rest_centroid: Vec3,
    /// Rest offsets from the rest centroid, one per member.
    pub rest_offsets: Vec<Vec3>,
    pub geometry: ClusterGeometry,
}

#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConstraintSet {
    pub distance: Vec<DistanceConstraint>,
    pub volume: Vec<VolumeConstraint>,
    pub shape: Vec<ShapeCluster>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintError(pub String);

impl core::fmt::Display for ConstraintError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "constraint error: {}", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConstraintError {}

impl ConstraintSet {
    /// Builds the constraint set the simulator uses: one distance
    /// constraint per edge, one volume constraint per tetrahedron, one
    /// shape-matching cluster per particle (itself plus its 1-ring).
    pub fn from_mesh(mesh: &DeformableMesh) -> Result<Self, ConstraintError> {
        let rest = &mesh.rest_positions;
        let mut distance = Vec::with_capacity(mesh.edges.len());
        for e in &mesh.edges {
            let len = (rest[e[0]] - rest[e[1]]).norm();
            if !(len > 0.0) {
                return Err(ConstraintError(format!(
                    "edge ({}, {}) has zero rest length",
                    e[0], e[1]
                )));
            }
            distance.push(DistanceConstraint {
                i: e[0],
                j: e[1],
                rest_length: len,
            });
        }
        let mut volume = Vec::with_capacity(mesh.tetrahedra.len());
        for t in &mesh.tetrahedra {
            let v = signed_tet_volume(rest[t[0]], rest[t[1]], rest[t[2]], rest[t[3]]);
            if !(v > 0.0) {
                return Err(ConstraintError(format!(
                    "tetrahedron {t:?} has non-positive rest volume"
                )));
            }
            volume.push(VolumeConstraint {
                indices: *t,
                rest_volume: v,
            });
        }
        let rings = one_ring_neighbors(mesh);
        let mut shape = Vec::with_capacity(mesh.particle_count());
        for (i, ring) in rings.iter().enumerate() {
            if ring.is_empty() {
                continue; // isolated particle, no shape to preserve
            }
            let mut members = Vec::with_capacity(ring.len() + 1);
            members.push(i);
            members.extend(ring.iter().copied());
            members.sort_unstable();
            shape.push(ShapeCluster::new(members, mesh));
        }
        Ok(Self {
            distance,
            volume,
            shape,
        })
    }

    /// Total number of scalar residuals.
    pub fn scalar_count(&self) -> usize {
        self.distance.len()
            + self.volume.len()
            + self.shape.iter().map(|c| 3 * c.members.len()).sum::<usize>()
    }

    /// Family of the scalar residual at `index` in the flattened layout
    /// `[distance.. | volume.. | shape clusters..]`.
    pub fn family_of(&self, index: usize) -> Option<ConstraintFamily> {
        let d = self.distance.len();
        let v = self.volume.len();
        if index < d {
            return Some(ConstraintFamily::Distance);
        }
        if index < d + v {
            return Some(ConstraintFamily::Volume);
        }
        let rest = index - d - v;
        let shape_total: usize = self.shape.iter().map(|c| 3 * c.members.len()).sum();
        (rest < shape_total).then_some(ConstraintFamily::ShapeMatching)
    }
}

impl ShapeCluster {
    fn new(members: Vec<usize>, mesh: &DeformableMesh) -> Self {
        let masses: Vec<f64> = members.iter().map(|&q| mesh.masses[q]).collect();
        let total: f64 = masses.iter().sum();
        let mut centroid = Vec3::zero();
        for (&q, &m) in members.iter().zip(&masses) {
            centroid = centroid + mesh.rest_positions[q].scale(m);
        }
        centroid = centroid.scale(1.0 / total);
        let offsets: Vec<Vec3> = members
            .iter()
            .map(|&q| mesh.rest_positions[q] - centroid)
            .collect();
        // Rank of the rest shape from the covariance spectrum.
        let mut cov = Mat3::zero();
        for (b, &m) in offsets.iter().zip(&masses) {
            cov = cov.add_mat(Mat3::outer(*b, *b).scale(m));
        }
        let trace = cov.m[0][0] + cov.m[1][1] + cov.m[2][2];
        let (min_eig, normal) = sym_eig_min(cov);
        let geometry = if min_eig > 1e-10 * trace {
            ClusterGeometry::Full
        } else {
            // Deflate the normal direction and test the in-plane rank.
            let deflated = cov.add_mat(Mat3::outer(normal, normal).scale(trace));
            let (second, _) = sym_eig_min(deflated);
            if second > 1e-10 * trace {
                let n = normal.normalized();
                let seed = if n.x.abs() < 0.9 {
                    Vec3::new(1.0, 0.0, 0.0)
                } else {
                    Vec3::new(0.0, 1.0, 0.0)
                };
                let p = n.cross(seed).normalized();
                let q = n.cross(p);
                ClusterGeometry::Planar { p, q, n }
            } else {
                ClusterGeometry::Degenerate
            }
        };
        Self {
            members,
            member_masses: masses,
            total_mass: total,
            rest_centroid: centroid,
            rest_offsets: offsets,
            geometry,
        }
    }

    /// Gathers the member positions out of a full position array.
    pub fn gather<R: Real>(&self, x: &[V3<R>]) -> Vec<V3<R>> {
        self.members.iter().map(|&q| x[q]).collect()
    }

    /// Mass-weighted centroid of the current member positions.
    pub fn centroid<R: Real>(&self, x: &[V3<R>]) -> V3<R> {
        self.centroid_members(&self.gather(x))
    }

    /// As [`centroid`](Self::centroid) but over positions already aligned
    /// with `members`.
    pub fn centroid_members<R: Real>(&self, pos: &[V3<R>]) -> V3<R> {
        let mut c = V3::zero();
        for (p, &m) in pos.iter().zip(&self.member_masses) {
            c = c + p.scale(R::lit(m));
        }
        c.scale(R::lit(1.0 / self.total_mass))
    }

    /// Best-fit rotation of the rest shape onto the current positions.
    ///
    /// Planar rest shapes get their missing direction completed with the
    /// cross product of the two mapped in-plane basis vectors; degenerate
    /// clusters fall back to the identity.
    pub fn rotation<R: Real>(&self, x: &[V3<R>]) -> M3<R> {
        self.rotation_members(&self.gather(x))
    }

    /// As [`rotation`](Self::rotation) but over positions already aligned
    /// with `members`.
    pub fn rotation_members<R: Real>(&self, pos: &[V3<R>]) -> M3<R> {
        let c = self.centroid_members(pos);
        let mut a = M3::zero();
        for ((p, &m), b) in pos.iter().zip(&self.member_masses).zip(&self.rest_offsets) {
            a = a.add_mat(M3::outer((*p - c).scale(R::lit(m)), V3::lit(*b)));
        }
        match &self.geometry {
            ClusterGeometry::Degenerate => M3::identity(),
            ClusterGeometry::Planar { p, q, n } => {
                let ap = a.mul_vec(V3::lit(*p));
                let aq = a.mul_vec(V3::lit(*q));
                let u = ap.cross(aq);
                let u_norm = u.norm();
                // Scale the completed column to the in-plane magnitude so
                // the matrix stays well conditioned regardless of cluster
                // size; the rotation factor only needs the direction.
                let scale = (ap.norm() * aq.norm()).sqrt();
                if u_norm.val() < 1e-12 * scale.val() * scale.val() {
                    return M3::identity();
                }
                let completed =
                    a.add_mat(M3::outer(u.scale(scale * u_norm.recip()), V3::lit(*n)));
                polar_rotation(completed)
            }
            // Degeneracy is detected inside polar_rotation on the
            // normalized matrix, so no scale-dependent guard here.
            ClusterGeometry::Full => polar_rotation(a),
        }
    }

    /// Per-member offsets from the rigidly transformed rest shape,
    /// `x_q - (R b_q + c)`.
    pub fn residuals<R: Real>(&self, x: &[V3<R>]) -> Vec<V3<R>> {
        let c = self.centroid(x);
        let rot = self.rotation(x);
        self.members
            .iter()
            .zip(&self.rest_offsets)
            .map(|(&q, b)| x[q] - (rot.mul_vec(V3::lit(*b)) + c))
            .collect()
    }
}

/// Flattened residual vector `C(x)` in the layout
/// `[distance.. | volume.. | shape clusters..]`.
pub fn constraint_values<R: Real>(cset: &ConstraintSet, x: &[V3<R>]) -> Vec<R> {
    let mut out = Vec::with_capacity(cset.scalar_count());
    for d in &cset.distance {
        out.push(distance_residual(d, x));
    }
    for v in &cset.volume {
        out.push(volume_residual(v, x));
    }
    for cluster in &cset.shape {
        for r in cluster.residuals(x) {
            out.push(r.x);
            out.push(r.y);
            out.push(r.z);
        }
    }
    out
}

fn distance_residual<R: Real>(d: &DistanceConstraint, x: &[V3<R>]) -> R {
    let diff = x[d.i] - x[d.j];
    if diff.norm_sq().val() < COINCIDENT_EPS * COINCIDENT_EPS {
        // Coincident particles: the length is numerically zero and its
        // gradient undefined; report the residual as a constant.
        R::lit(-d.rest_length)
    } else {
        diff.norm() - R::lit(d.rest_length)
    }
}

fn volume_residual<R: Real>(v: &VolumeConstraint, x: &[V3<R>]) -> R {
    let [i, j, k, l] = v.indices;
    let b = x[j] - x[i];
    let c = x[k] - x[i];
    let d = x[l] - x[i];
    b.cross(c).dot(d) * R::lit(1.0 / 6.0) - R::lit(v.rest_volume)
}

/// Per-family constraint weights, one scalar per distance constraint,
/// per tetrahedron, and per shape cluster (shared by the cluster's
/// scalar residuals).
#[derive(Clone, Debug)]
pub struct ConstraintWeights<R> {
    pub distance: Vec<R>,
    pub volume: Vec<R>,
    pub shape: Vec<R>,
}

impl ConstraintWeights<f64> {
    /// Uniform weights per family, used for the physical-realness term.
    pub fn uniform(cset: &ConstraintSet, dist: f64, vol: f64, shape: f64) -> Self {
        Self {
            distance: vec![dist; cset.distance.len()],
            volume: vec![vol; cset.volume.len()],
            shape: vec![shape; cset.shape.len()],
        }
    }
}

impl<R: Real> ConstraintWeights<R> {
    pub fn lift(w: &ConstraintWeights<f64>) -> Self {
        Self {
            distance: w.distance.iter().map(|&v| R::lit(v)).collect(),
            volume: w.volume.iter().map(|&v| R::lit(v)).collect(),
            shape: w.shape.iter().map(|&v| R::lit(v)).collect(),
        }
    }
}

/// Averages per-particle stiffness onto per-constraint weights: each
/// elastic constraint takes the arithmetic mean over its member
/// particles of the matching family; volume constraints keep the fixed
/// `k_vol`.
pub fn stiffness_to_constraint_weights<R: Real>(
    k_dist: &[R],
    k_shape: &[R],
    k_vol: f64,
    cset: &ConstraintSet,
) -> ConstraintWeights<R> {
    let distance = cset
        .distance
        .iter()
        .map(|d| (k_dist[d.i] + k_dist[d.j]) * R::lit(0.5))
        .collect();
    let volume = vec![R::lit(k_vol); cset.volume.len()];
    let shape = cset
        .shape
        .iter()
        .map(|c| {
            let mut s = R::lit(0.0);
            for &q in &c.members {
                s = s + k_shape[q];
            }
            s * R::lit(1.0 / c.members.len() as f64)
        })
        .collect();
    ConstraintWeights {
        distance,
        volume,
        shape,
    }
}

/// Total constraint energy `U(x) = 1/2 C(x)^T diag(k_c) C(x)`.
pub fn energy<R: Real>(cset: &ConstraintSet, weights: &ConstraintWeights<R>, x: &[V3<R>]) -> R {
    let mut u = R::lit(0.0);
    for (d, &k) in cset.distance.iter().zip(&weights.distance) {
        let c = distance_residual(d, x);
        u = u + k * c * c * R::lit(0.5);
    }
    for (v, &k) in cset.volume.iter().zip(&weights.volume) {
        let c = volume_residual(v, x);
        u = u + k * c * c * R::lit(0.5);
    }
    for (cluster, &k) in cset.shape.iter().zip(&weights.shape) {
        for r in cluster.residuals(x) {
            u = u + k * r.norm_sq() * R::lit(0.5);
        }
    }
    u
}

/// Energy gradient used as the descent direction of the residual
/// mapping. Distance and volume terms are exact; for shape-matching
/// clusters the fitted rotation and centroid (the goal positions) are
/// held fixed, which is the classic shape-matching force.
pub fn energy_descent_direction<R: Real>(
    cset: &ConstraintSet,
    weights: &ConstraintWeights<R>,
    x: &[V3<R>],
) -> Vec<V3<R>> {
    let mut grad = vec![V3::zero(); x.len()];
    for (d, &k) in cset.distance.iter().zip(&weights.distance) {
        let diff = x[d.i] - x[d.j];
        if diff.norm_sq().val() < COINCIDENT_EPS * COINCIDENT_EPS {
            continue;
        }
        let len = diff.norm();
        let c = len - R::lit(d.rest_length);
        let dir = diff.scale(len.recip());
        grad[d.i] = grad[d.i] + dir.scale(k * c);
        grad[d.j] = grad[d.j] - dir.scale(k * c);
    }
    for (v, &k) in cset.volume.iter().zip(&weights.volume) {
        let c = volume_residual(v, x);
        let rows = volume_gradient(v, x);
        for (idx, g) in v.indices.iter().zip(rows) {
            grad[*idx] = grad[*idx] + g.scale(k * c);
        }
    }
    for (cluster, &k) in cset.shape.iter().zip(&weights.shape) {
        for (&q, r) in cluster.members.iter().zip(cluster.residuals(x)) {
            grad[q] = grad[q] + r.scale(k);
        }
    }
    grad
}

/// Analytic gradient of the volume residual, one 3-vector per tet corner.
pub fn volume_gradient<R: Real>(v: &VolumeConstraint, x: &[V3<R>]) -> [V3<R>; 4] {
    let [i, j, k, l] = v.indices;
    let b = x[j] - x[i];
    let c = x[k] - x[i];
    let d = x[l] - x[i];
    let sixth = R::lit(1.0 / 6.0);
    let gj = c.cross(d).scale(sixth);
    let gk = d.cross(b).scale(sixth);
    let gl = b.cross(c).scale(sixth);
    let gi = -(gj + gk + gl);
    [gi, gj, gk, gl]
}

/// Analytic gradient of the distance residual as `(particle, grad)`
/// pairs; coincident particles use a fixed unit axis.
pub fn distance_gradient<R: Real>(d: &DistanceConstraint, x: &[V3<R>]) -> [(usize, V3<R>); 2] {
    let diff = x[d.i] - x[d.j];
    let dir = if diff.norm_sq().val() < COINCIDENT_EPS * COINCIDENT_EPS {
        V3::lit(Vec3::new(1.0, 0.0, 0.0))
    } else {
        diff.scale(diff.norm().recip())
    };
    [(d.i, dir), (d.j, -dir)]
}

/// One sparse row of the constraint Jacobian.
#[derive(Clone, Debug)]
pub struct JacobianRow {
    pub entries: Vec<(usize, Vec3)>,
}

/// Rows of `dC/dx` for every scalar residual, in the flattened layout.
///
/// Distance and volume rows are the closed-form gradients; shape-matching
/// rows are exact as well, obtained by reverse-mode differentiation of
/// the cluster residual (including the fitted rotation) on a local tape.
pub fn constraint_jacobian(cset: &ConstraintSet, x: &[Vec3]) -> Vec<JacobianRow> {
    let mut rows = Vec::with_capacity(cset.scalar_count());
    for d in &cset.distance {
        rows.push(JacobianRow {
            entries: distance_gradient(d, x).to_vec(),
        });
    }
    for v in &cset.volume {
        let grads = volume_gradient(v, x);
        rows.push(JacobianRow {
            entries: v.indices.iter().copied().zip(grads).collect(),
        });
    }
    for cluster in &cset.shape {
        rows.extend(shape_cluster_jacobian(cluster, x));
    }
    rows
}

fn shape_cluster_jacobian(cluster: &ShapeCluster, x: &[Vec3]) -> Vec<JacobianRow> {
    let tape = Tape::new();
    let member_positions: Vec<Vec3> = cluster.members.iter().map(|&q| x[q]).collect();
    let vars = input_positions(&tape, &member_positions);
    // Residuals over a dense local copy indexed like the full mesh.
    let mut local = crate::autodiff::const_positions(x);
    for (&q, &v) in cluster.members.iter().zip(&vars) {
        local[q] = v;
    }
    let residuals = cluster.residuals(&local);
    let mut rows = Vec::with_capacity(3 * cluster.members.len());
    for r in residuals {
        for comp in [r.x, r.y, r.z] {
            let grads = tape
                .backward(comp)
                .expect("shape residual recording stays finite");
            let entries = cluster
                .members
                .iter()
                .zip(&vars)
                .map(|(&q, v)| (q, Vec3::new(grads.get(v.x), grads.get(v.y), grads.get(v.z))))
                .filter(|(_, g)| g.norm_sq() > 0.0)
                .collect();
            rows.push(JacobianRow { entries });
        }
    }
    rows
}

/// Bounded per-family stiffness ranges; the mapped value always stays
/// strictly inside the open interval.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StiffnessBounds {
    pub dist_min: f64,
    pub dist_max: f64,
    pub shape_min: f64,
    pub shape_max: f64,
}

impl Default for StiffnessBounds {
    fn default() -> Self {
        Self {
            dist_min: 0.0,
            dist_max: 10.0,
            shape_min: 0.0,
            shape_max: 0.02,
        }
    }
}

/// Per-particle unconstrained stiffness parameters with sigmoid-mapped
/// bounds; these are the optimizer variables.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StiffnessField {
    pub theta_dist: Vec<f64>,
    pub theta_shape: Vec<f64>,
    pub bounds: StiffnessBounds,
    pub k_vol: f64,
}

impl StiffnessField {
    /// Uniform field whose mapped stiffness equals the given values,
    /// which must lie strictly inside the bounds.
    pub fn uniform(
        n: usize,
        k_dist: f64,
        k_shape: f64,
        bounds: StiffnessBounds,
    ) -> Result<Self, ConstraintError> {
        let check = |v: f64, lo: f64, hi: f64, name: &str| -> Result<f64, ConstraintError> {
            if v > lo && v < hi {
                Ok(logit((v - lo) / (hi - lo)))
            } else {
                Err(ConstraintError(format!(
                    "{name} = {v} must lie strictly inside ({lo}, {hi})"
                )))
            }
        };
        let td = check(k_dist, bounds.dist_min, bounds.dist_max, "k_dist")?;
        let ts = check(k_shape, bounds.shape_min, bounds.shape_max, "k_shape")?;
        Ok(Self {
            theta_dist: vec![td; n],
            theta_shape: vec![ts; n],
            bounds,
            k_vol: K_VOL_FIXED,
        })
    }

    pub fn particle_count(&self) -> usize {
        self.theta_dist.len()
    }

    pub fn k_dist(&self) -> Vec<f64> {
        map_stiffness(&self.theta_dist, self.bounds.dist_min, self.bounds.dist_max)
    }

    pub fn k_shape(&self) -> Vec<f64> {
        map_stiffness(&self.theta_shape, self.bounds.shape_min, self.bounds.shape_max)
    }

    /// Per-constraint weights for the current parameters.
    pub fn constraint_weights(&self, cset: &ConstraintSet) -> ConstraintWeights<f64> {
        stiffness_to_constraint_weights(&self.k_dist(), &self.k_shape(), self.k_vol, cset)
    }
}

/// `k(theta) = k_min + (k_max - k_min) * sigmoid(theta)`.
pub fn map_stiffness<R: Real>(theta: &[R], lo: f64, hi: f64) -> Vec<R> {
    theta
        .iter()
        .map(|&t| R::lit(lo) + R::lit(hi - lo) * sigmoid(t))
        .collect()
}
