//! Result writers: metrics CSV with a fixed column order and 9
//! significant digits, JSON dumps of the final stiffness and state, and
//! a separate timings file so metric files stay byte-reproducible.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;
use softsim_core::constraints::StiffnessField;
use softsim_core::harness::{ExperimentOutput, FrameRecord, SweepCell, Timings};
use softsim_core::online::StiffnessPreset;

pub const METRICS_COLUMNS: &str = "frame,chamfer_gap,l_gap,l_hist,l_smooth,e_t,e_t_truncated,f_t,\
k_dist_min,k_dist_mean,k_dist_max,k_shape_min,k_shape_mean,k_shape_max,mapping_restarts,error";

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.8e}")
    }
}

pub fn metrics_csv(records: &[FrameRecord]) -> String {
    let mut out = String::from(METRICS_COLUMNS);
    out.push('\n');
    for r in records {
        let error = r
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            num(r.chamfer_gap),
            num(r.l_gap),
            num(r.l_hist),
            num(r.l_smooth),
            num(r.e_t),
            u8::from(r.e_t_truncated),
            num(r.f_t),
            num(r.k_dist_min),
            num(r.k_dist_mean),
            num(r.k_dist_max),
            num(r.k_shape_min),
            num(r.k_shape_mean),
            num(r.k_shape_max),
            r.mapping_restarts,
            error,
        );
    }
    out
}

pub fn preset_name(preset: StiffnessPreset) -> &'static str {
    match preset {
        StiffnessPreset::K1 => "k1",
        StiffnessPreset::K2 => "k2",
        StiffnessPreset::K3 => "k3",
        StiffnessPreset::Custom { .. } => "custom",
    }
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("method,preset,mean_e_t,mean_f_t,mean_chamfer\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.method.name(),
            preset_name(c.preset),
            num(c.mean_e_t),
            num(c.mean_f_t),
            num(c.mean_chamfer),
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_run_outputs(dir: &Path, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.records))?;
    write(
        &dir.join("stiffness_final.json"),
        &stiffness_json(&out.final_stiffness)?,
    )?;
    let state = json!({
        "positions": out.final_state.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
        "keypoint_indices": out.keypoint_indices,
        "sampling_floor": out.sampling_floor,
        "soft_region": out.soft_region,
        "aborted_at": out.aborted_at,
    });
    write(
        &dir.join("state_final.json"),
        &serde_json::to_string_pretty(&state)?,
    )?;
    write(&dir.join("timings.csv"), &timings_csv(&out.timings))?;
    Ok(())
}

pub fn stiffness_json(field: &StiffnessField) -> Result<String> {
    let doc = json!({
        "k_dist": field.k_dist(),
        "k_shape": field.k_shape(),
        "k_vol": field.k_vol,
        "theta_dist": field.theta_dist,
        "theta_shape": field.theta_shape,
        "bounds": field.bounds,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn timings_csv(t: &Timings) -> String {
    format!(
        "stage,seconds\ntwin,{:.3}\nestimator,{:.3}\nmetrics,{:.3}\n",
        t.twin_total, t.estimator_total, t.metrics_total
    )
}
