//! Point-cloud and control replay IO: ASCII PLY or CSV clouds (one file
//! per frame) and a controls CSV (`frame,particle,x,y,z`).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use softsim_core::solver::Control;
use softsim_core::{PointCloud, Vec3};

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    let points = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => load_ply(path)?,
        Some("csv") => load_csv(path)?,
        other => bail!(
            "{}: unsupported point-cloud extension {:?} (expected .ply or .csv)",
            path.display(),
            other
        ),
    };
    PointCloud::new(points).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_csv(path: &Path) -> Result<Vec<Vec3>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.parse::<f64>().is_err() && !line.contains(|c: char| c.is_ascii_digit())
        {
            continue; // header row
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            bail!(
                "{} line {}: expected 3 fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            );
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .with_context(|| format!("{} line {}: bad number {s:?}", path.display(), lineno + 1))
        };
        points.push(Vec3::new(parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
    }
    Ok(points)
}

fn load_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        bail!("{}: not a PLY file (missing magic)", path.display());
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", kind, _] => {
                if *kind != "ascii" {
                    bail!("{}: only ascii PLY is supported, found {kind}", path.display());
                }
            }
            ["element", "vertex", count] => {
                vertex_count = Some(count.parse().context("bad vertex count")?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", _ty, name] if in_vertex_element => props.push((*name).into()),
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| anyhow!("{}: no vertex element", path.display()))?;
    let axis = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| anyhow!("{}: missing vertex property {name}", path.display()))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let mut points = Vec::with_capacity(count);
    for (k, line) in lines.take(count).enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < props.len() {
            bail!("{} vertex {}: truncated row", path.display(), k);
        }
        let parse = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .with_context(|| format!("{} vertex {}: bad number", path.display(), k))
        };
        points.push(Vec3::new(parse(ix)?, parse(iy)?, parse(iz)?));
    }
    if points.len() != count {
        bail!(
            "{}: expected {count} vertices, found {}",
            path.display(),
            points.len()
        );
    }
    Ok(points)
}

/// Frame-sorted observation files in a replay directory (`controls.csv`
/// excluded).
pub fn observation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?
    {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if matches!(ext, Some("ply") | Some("csv")) && name != "controls.csv" {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("{}: no .ply or .csv observation files found", dir.display());
    }
    Ok(files)
}

/// Loads `controls.csv` (`frame,particle,x,y,z`, 1-based frames) into
/// per-frame controls; frames without entries hold position.
pub fn load_controls(path: &Path, frames: usize, particles: usize) -> Result<Vec<Control>> {
    let mut controls = vec![Control::hold(); frames];
    if !path.exists() {
        return Ok(controls);
    }
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("frame") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            bail!(
                "{} line {}: expected frame,particle,x,y,z",
                path.display(),
                lineno + 1
            );
        }
        let context = || format!("{} line {}", path.display(), lineno + 1);
        let frame: usize = fields[0].parse().with_context(context)?;
        let particle: usize = fields[1].parse().with_context(context)?;
        if frame == 0 || frame > frames {
            bail!("{}: frame {frame} out of range 1..={frames}", context());
        }
        if particle >= particles {
            bail!("{}: particle {particle} out of range (n = {particles})", context());
        }
        let parse = |i: usize| -> Result<f64> { fields[i].parse().with_context(context) };
        controls[frame - 1]
            .targets
            .push((particle, Vec3::new(parse(2)?, parse(3)?, parse(4)?)));
    }
    Ok(controls)
}
