use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Loss history of one pretraining (or continual) run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    /// `(global step, training loss)`.
    pub step_losses: Vec<(u64, f64)>,
    /// `(epoch, validation loss)`; empty without a validation set.
    pub val_losses: Vec<(u64, f64)>,
    pub wall_clock_secs: f64,
    pub config_echo: String,
    pub dataset_size: usize,
    pub val_size: usize,
}

pub const STEP_CSV: &str = "losses.csv";
pub const VAL_CSV: &str = "val_losses.csv";
pub const CONFIG_ECHO: &str = "config_echo.toml";
pub const RUN_INFO: &str = "run_info.txt";

impl RunRecord {
    pub fn step_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.step_losses {
            // `{:?}` is the shortest exact round-trip representation
            let _ = writeln!(s, "{step},{loss:?}");
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        for (epoch, loss) in &self.val_losses {
            let _ = writeln!(s, "{epoch},{loss:?}");
        }
        s
    }

    /// Writes the CSVs, the config echo and a small info file with the
    /// wall-clock time (the only non-deterministic output).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = format!(
            "dataset_size={}\nval_size={}\nsteps={}\nwall_clock_secs={:.3}\n",
            self.dataset_size,
            self.val_size,
            self.step_losses.len(),
            self.wall_clock_secs
        );
        for (name, body) in [
            (STEP_CSV, self.step_csv()),
            (VAL_CSV, self.val_csv()),
            (CONFIG_ECHO, self.config_echo.clone()),
            (RUN_INFO, info),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Parses a `step,loss` CSV back into a series.
    pub fn parse_step_csv(text: &str) -> Result<Vec<(u64, f64)>> {
        parse_pairs(text, "step,loss")
    }

    pub fn parse_val_csv(text: &str) -> Result<Vec<(u64, f64)>> {
        parse_pairs(text, "epoch,val_loss")
    }
}

fn parse_pairs(text: &str, header: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Data(format!("expected header `{header}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Data(format!("row {}: cannot parse `{l}`", i + 2));
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let r = RunRecord {
            step_losses: vec![(0, 0.1 + 0.2), (1, 1e-17), (2, 3.0)],
            val_losses: vec![(0, 2.5)],
            ..Default::default()
        };
        assert_eq!(RunRecord::parse_step_csv(&r.step_csv()).unwrap(), r.step_losses);
        assert_eq!(RunRecord::parse_val_csv(&r.val_csv()).unwrap(), r.val_losses);
        assert!(RunRecord::parse_step_csv("epoch,val_loss\n").is_err());
    }
}
