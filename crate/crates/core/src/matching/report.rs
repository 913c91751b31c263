use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MatchStrategy;
use crate::error::{Error, Result};
use crate::models::Arch;

/// Losses of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub iteration: usize,
    pub l_g: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub l_total: f64,
    pub strategy: MatchStrategy,
    /// Pool classifier providing the matching signal; absent in GAN-only epochs.
    pub arch: Option<Arch>,
}

/// Append-only JSON-lines log with one [`LossReport`] per line.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Starts an empty log, replacing any previous file.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    /// Reopens a log for appending after dropping records from epochs at or past `epochs_kept`.
    pub fn resume(path: &Path, epochs_kept: usize) -> Result<(Self, Vec<LossReport>)> {
        let kept: Vec<LossReport> = if path.exists() {
            read_loss_log(path)?
                .into_iter()
                .filter(|r| r.epoch < epochs_kept)
                .collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        log.flush()?;
        let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        log.out = BufWriter::new(f);
        Ok((log, kept))
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(report)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::ingestion(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(epoch: usize, iteration: usize) -> LossReport {
        LossReport {
            epoch,
            iteration,
            l_g: 0.7,
            l_d: 0.69,
            l_m: 0.0,
            l_total: 0.7,
            strategy: MatchStrategy::Logits,
            arch: None,
        }
    }

    #[test]
    fn resume_drops_unfinished_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.jsonl");
        let mut log = LossLog::create(&p).unwrap();
        for e in 0..3 {
            for i in 0..2 {
                log.append(&report(e, i)).unwrap();
            }
        }
        log.flush().unwrap();
        drop(log);
        let (mut log, kept) = LossLog::resume(&p, 2).unwrap();
        assert_eq!(kept.len(), 4);
        log.append(&report(2, 0)).unwrap();
        log.flush().unwrap();
        let all = read_loss_log(&p).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all[4], report(2, 0));
    }
}
