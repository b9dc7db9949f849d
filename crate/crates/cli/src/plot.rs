//! `sves plot-data`: merges per-run metrics into one table for plotting.

use std::path::{Path, PathBuf};

use crate::artifacts::{METRICS, METRICS_HEADER};
use crate::error::CliError;

/// Every run directory that holds metrics: the given directories and
/// their `pop*/` children, in sorted order.
pub fn metric_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for root in roots {
        if root.join(METRICS).exists() {
            out.push(root.clone());
        }
        let entries = std::fs::read_dir(root).map_err(CliError::io(root))?;
        let mut children: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("pop")) && p.join(METRICS).exists()
            })
            .collect();
        children.sort();
        out.extend(children);
    }
    if out.is_empty() {
        return Err(CliError::Config("no metrics.csv found under the given directories".into()));
    }
    Ok(out)
}

/// One CSV with a leading `run` column naming the source directory.
pub fn combined_metrics(roots: &[PathBuf]) -> Result<String, CliError> {
    let mut out = format!("run,{METRICS_HEADER}\n");
    for dir in metric_dirs(roots)? {
        let path = dir.join(METRICS);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(CliError::Config(format!("{} has an unexpected header", path.display())));
        }
        let name = label(&dir);
        for line in lines.filter(|l| !l.is_empty()) {
            out.push_str(&name);
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn label(dir: &Path) -> String {
    dir.display().to_string().replace(',', "_")
}
