use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::read_metrics;
use super::HarnessError;
use crate::analysis::GridSpec;
use crate::env2d::reach_boxes;

/// Figure ids understood by [`emit_plotdata`].
pub const FIGURE_IDS: [&str; 9] = ["fig3", "fig4a", "fig4b", "fig4c", "fig4d", "fig4e", "fig4f", "fig6", "fig9"];

fn mode_name(cfg: &ExperimentConfig) -> String {
    serde_json::to_value(cfg.agent.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Copies selected columns of a run CSV, appending constant columns.
/// A missing source yields a header-only file.
fn copy_columns(
    src: &Path,
    dst: &Path,
    columns: &[&str],
    extra: &[(&str, &str)],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(dst)?;
    let header: Vec<&str> = columns.iter().copied().chain(extra.iter().map(|(k, _)| *k)).collect();
    w.write_record(&header)?;
    if src.exists() {
        let mut r = csv::Reader::from_path(src)?;
        let head = r.headers()?.clone();
        let idx: Vec<usize> = columns
            .iter()
            .map(|c| {
                head.iter()
                    .position(|h| h == *c)
                    .ok_or_else(|| HarnessError::Io(format!("{}: missing column `{c}`", src.display())))
            })
            .collect::<Result<_, _>>()?;
        for row in r.records() {
            let row = row?;
            let mut out: Vec<&str> = idx.iter().map(|&i| &row[i]).collect();
            out.extend(extra.iter().map(|(_, v)| *v));
            w.write_record(&out)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn oracle_max(run_dir: &Path) -> String {
    std::fs::read_to_string(run_dir.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("oracle_max_value").and_then(|x| x.as_f64()))
        .map_or_else(|| "NaN".to_string(), |v| v.to_string())
}

/// Writes the long-format CSV for one figure of a completed run into
/// `out_dir` (default `<run_dir>/plotdata`) and returns its path.
pub fn emit_plotdata(run_dir: &Path, figure: &str, out_dir: Option<&Path>) -> Result<PathBuf, HarnessError> {
    if !FIGURE_IDS.contains(&figure) {
        return Err(HarnessError::UnknownFigure(figure.to_string()));
    }
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"), &[])?;
    let out_dir = out_dir.map_or_else(|| run_dir.join("plotdata"), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir)?;
    let dst = out_dir.join(format!("{figure}.csv"));
    let mode = mode_name(&cfg);
    match figure {
        "fig3" => {
            let max_v = oracle_max(run_dir);
            let mut w = csv::Writer::from_path(&dst)?;
            w.write_record(["epoch", "mean_q", "max_q", "oracle_max_value", "mode"])?;
            if run_dir.join("metrics.csv").exists() {
                for r in read_metrics(run_dir)? {
                    w.write_record([
                        r.epoch.to_string(),
                        r.mean_q.to_string(),
                        r.max_q.to_string(),
                        max_v.clone(),
                        mode.clone(),
                    ])?;
                }
            }
            w.flush()?;
        }
        "fig4a" => {
            let reach = reach_boxes(&cfg.env);
            let grid = GridSpec::new(reach.at(cfg.env.rollout_len).expand(1.0), cfg.analysis.map_h)?;
            let mut w = csv::Writer::from_path(&dst)?;
            w.write_record(["x", "y", "reward"])?;
            for i in 0..grid.len() {
                let s = grid.node_at(i);
                w.serialize((s.x, s.y, cfg.env.reward.value(&s)))?;
            }
            w.flush()?;
        }
        "fig4b" | "fig4c" | "fig4d" => copy_columns(
            &run_dir.join("eval_trajectories.csv"),
            &dst,
            &["episode", "t", "x", "y"],
            &[("mode", &mode)],
        )?,
        "fig4e" => copy_columns(&run_dir.join("metrics.csv"), &dst, &["epoch", "eval_return"], &[("mode", &mode)])?,
        "fig4f" => copy_columns(&run_dir.join("metrics.csv"), &dst, &["epoch", "mean_q"], &[("mode", &mode)])?,
        "fig6" => copy_columns(
            &run_dir.join("ensemble_std.csv"),
            &dst,
            &["x", "y", "ensemble_std", "reach"],
            &[],
        )?,
        "fig9" => copy_columns(
            &run_dir.join("trajectories.csv"),
            &dst,
            &["epoch", "traj", "t", "x", "y"],
            &[],
        )?,
        _ => unreachable!("checked against FIGURE_IDS"),
    }
    Ok(dst)
}
