//! Files inside a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const MODEL: &str = "model.essm";
pub const ADAPTERS: &str = "adapters.essa";
pub const FINAL_ADAPTERS: &str = "final_adapters.essa";
pub const SFT_DATA: &str = "data/sft.tsv";
pub const ALIGN_DATA: &str = "data/align.tsv";
pub const SFT_REPORT: &str = "sft_report.json";
pub const SFT_CONFIG: &str = "sft.config.toml";
pub const ALIGN_CONFIG: &str = "align.config.toml";
/// Latest search-state checkpoint, replaced atomically.
pub const CMA_CHECKPOINT: &str = "cma.esck";
pub const CMA_FINAL: &str = "cma_final.esck";
pub const METRICS: &str = "metrics.csv";
/// One line per generation: `generation,r0,r1,…` in candidate order.
pub const REWARDS: &str = "rewards.csv";
/// One line per generation: `generation<TAB>hash<TAB>i0,i1,…`.
pub const SUBSETS: &str = "subsets.tsv";
pub const SUMMARY: &str = "summary.json";

pub const METRICS_HEADER: &str =
    "generation,evaluations,best,mean,worst,wall_millis,subset_hash,eval_millis,payload_bytes,frame_bytes";

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(CliError::io(path))
}

pub fn read_required(dir: &Path, name: &str, hint: &str) -> Result<Vec<u8>, CliError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::Config(format!("{} is missing; {hint}", path.display())));
    }
    read(&path)
}

/// Writes through a temporary sibling and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let tmp = tmp_path(path);
    let mut file = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    file.write_all(bytes).map_err(CliError::io(&tmp))?;
    file.sync_all().map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Keeps the first `lines` lines of a text file (all of them if fewer).
pub fn truncate_lines(path: &Path, lines: usize) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let kept: String = text.split_inclusive('\n').take(lines).filter(|l| l.ends_with('\n')).collect();
    write_atomic(path, kept.as_bytes())
}

/// Parses `rewards.csv`. A trailing partial line is ignored.
pub fn parse_rewards(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut out = Vec::new();
    for line in text.split_inclusive('\n').filter(|l| l.ends_with('\n')) {
        let mut fields = line.trim_end().split(',');
        let generation: usize = fields
            .next()
            .and_then(|g| g.parse().ok())
            .ok_or_else(|| CliError::Config(format!("malformed rewards line {:?}", line.trim_end())))?;
        if generation != out.len() {
            return Err(CliError::Config(format!(
                "rewards history jumps from generation {} to {generation}",
                out.len()
            )));
        }
        let rewards = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("malformed reward in generation {generation}: {e}")))?;
        out.push(rewards);
    }
    Ok(out)
}

pub fn rewards_line(generation: u64, rewards: &[f64]) -> String {
    let mut line = generation.to_string();
    for r in rewards {
        // `Display` for f64 prints the shortest string that parses back to
        // the same value.
        line.push(',');
        line.push_str(&r.to_string());
    }
    line.push('\n');
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewards_round_trip_exactly() {
        let rows = vec![vec![0.1 + 0.2, -1e-300, 1.0 / 3.0], vec![0.0, 5e-324, f64::MAX]];
        let text: String = rows.iter().enumerate().map(|(g, r)| rewards_line(g as u64, r)).collect();
        assert_eq!(parse_rewards(&text).unwrap(), rows);
        assert_eq!(parse_rewards(&format!("{text}2,0.5,0.")).unwrap(), rows);
        assert!(parse_rewards("1,0.5\n").is_err());
    }

    #[test]
    fn atomic_write_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/file.txt");
        write_atomic(&path, b"a\nb\nc\npartial").unwrap();
        truncate_lines(&path, 2).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a\nb\n");
        truncate_lines(&path, 10).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a\nb\n");
        assert!(!tmp_path(&path).exists());
    }
}
