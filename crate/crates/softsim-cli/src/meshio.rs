//! Mesh file IO: a self-describing JSON document covering every mesh
//! field, plus a minimal OBJ importer for triangle shells.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use softsim_core::{DeformableMesh, MeshKind, Vec3};

/// On-disk mesh document. Positions are `[x, y, z]` triples; all index
/// lists refer into `positions`.
#[derive(Serialize, Deserialize)]
pub struct MeshDoc {
    pub kind: MeshKind,
    pub positions: Vec<[f64; 3]>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub triangles: Vec<[usize; 3]>,
    #[serde(default)]
    pub tetrahedra: Vec<[usize; 4]>,
    #[serde(default)]
    pub surface: Vec<usize>,
    #[serde(default)]
    pub pinned: Vec<usize>,
    #[serde(default)]
    pub grasped: Vec<usize>,
    #[serde(default)]
    pub masses: Vec<f64>,
}

const DEFAULT_MASS: f64 = 0.01;

pub fn save_mesh(mesh: &DeformableMesh, path: &Path) -> Result<()> {
    let doc = MeshDoc {
        kind: mesh.kind,
        positions: mesh.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
        edges: mesh.edges.clone(),
        triangles: mesh.triangles.clone(),
        tetrahedra: mesh.tetrahedra.clone(),
        surface: mesh.surface_indices.clone(),
        pinned: mesh.pinned_indices.clone(),
        grasped: mesh.grasped_indices.clone(),
        masses: mesh.masses.clone(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<DeformableMesh> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: MeshDoc = serde_json::from_str(&text)
        .with_context(|| format!("parsing mesh JSON {}", path.display()))?;
    mesh_from_doc(doc).with_context(|| format!("validating mesh {}", path.display()))
}

fn mesh_from_doc(doc: MeshDoc) -> Result<DeformableMesh> {
    let n = doc.positions.len();
    if n == 0 {
        bail!("positions: mesh must contain at least one particle");
    }
    let check = |i: usize, field: &str| -> Result<usize> {
        if i < n {
            Ok(i)
        } else {
            Err(anyhow!("{field}: index {i} out of range (n = {n})"))
        }
    };
    for e in &doc.edges {
        check(e[0], "edges")?;
        check(e[1], "edges")?;
    }
    for t in &doc.triangles {
        for &i in t {
            check(i, "triangles")?;
        }
    }
    for t in &doc.tetrahedra {
        for &i in t {
            check(i, "tetrahedra")?;
        }
    }
    for &i in doc.surface.iter().chain(&doc.pinned).chain(&doc.grasped) {
        check(i, "surface/pinned/grasped")?;
    }
    if !doc.masses.is_empty() && doc.masses.len() != n {
        bail!("masses: expected {} entries, found {}", n, doc.masses.len());
    }
    if let Some(m) = doc.masses.iter().find(|m| !(**m > 0.0)) {
        bail!("masses: non-positive mass {m}");
    }
    let positions: Vec<Vec3> = doc
        .positions
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]))
        .collect();
    if let Some(p) = positions.iter().find(|p| !p.is_finite()) {
        bail!("positions: non-finite entry ({}, {}, {})", p.x, p.y, p.z);
    }
    let sorted_set = |v: &[usize]| -> Vec<usize> {
        v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    };
    let surface = if doc.surface.is_empty() && doc.kind == MeshKind::ThinShell {
        (0..n).collect()
    } else {
        sorted_set(&doc.surface)
    };
    let masses = if doc.masses.is_empty() {
        vec![DEFAULT_MASS; n]
    } else {
        doc.masses
    };
    Ok(DeformableMesh {
        kind: doc.kind,
        rest_positions: positions.clone(),
        velocities: vec![Vec3::zero(); n],
        positions,
        masses,
        edges: doc.edges,
        triangles: doc.triangles,
        tetrahedra: doc.tetrahedra,
        surface_indices: surface,
        pinned_indices: sorted_set(&doc.pinned),
        grasped_indices: sorted_set(&doc.grasped),
    })
}

/// Imports a Wavefront OBJ triangle shell: only `v` and `f` records are
/// honored; faces with more than three vertices are fan-triangulated.
pub fn import_obj(path: &Path) -> Result<DeformableMesh> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut positions: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut coord = |axis: &str| -> Result<f64> {
                    fields
                        .next()
                        .ok_or_else(|| anyhow!("line {}: missing {axis}", lineno + 1))?
                        .parse()
                        .with_context(|| format!("line {}: bad {axis}", lineno + 1))
                };
                let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
                positions.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for field in fields {
                    // accept v, v/vt, v//vn, v/vt/vn
                    let v = field.split('/').next().unwrap_or("");
                    let i: i64 = v
                        .parse()
                        .with_context(|| format!("line {}: bad face index {field:?}", lineno + 1))?;
                    let i = if i < 0 {
                        positions.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if i < 0 || i as usize >= positions.len() {
                        bail!("line {}: face index {v} out of range", lineno + 1);
                    }
                    idx.push(i as usize);
                }
                if idx.len() < 3 {
                    bail!("line {}: face needs at least 3 vertices", lineno + 1);
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if positions.is_empty() {
        bail!("{}: no vertices found", path.display());
    }
    let mut edge_set: BTreeSet<[usize; 2]> = BTreeSet::new();
    for t in &triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edge_set.insert([a.min(b), a.max(b)]);
        }
    }
    let n = positions.len();
    Ok(DeformableMesh {
        kind: MeshKind::ThinShell,
        rest_positions: positions.clone(),
        velocities: vec![Vec3::zero(); n],
        positions,
        masses: vec![DEFAULT_MASS; n],
        edges: edge_set.into_iter().collect(),
        triangles,
        tetrahedra: Vec::new(),
        surface_indices: (0..n).collect(),
        pinned_indices: Vec::new(),
        grasped_indices: Vec::new(),
    })
}
