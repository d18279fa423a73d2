//! A training run on disk: metrics CSV, periodic evaluation and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::eval::evaluate;
use super::train::Trainer;
use crate::adversary::LossReport;
use crate::error::Result;
use crate::io::checkpoint;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "last.ckpt";

pub fn metrics_header() -> String {
    format!("{},psnr,ssim", LossReport::CSV_HEADER)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Paths written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub last: PathBuf,
}

/// Trains until `cfg.train.steps`, writing into `dir`. Rows are logged every
/// `log_every` steps; checkpoint steps and the final step also carry held-out
/// PSNR/SSIM. A resumed run appends to an existing metrics file.
pub fn train_to_dir(trainer: &mut Trainer, dir: &Path, mut progress: impl FnMut(&str)) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let metrics = dir.join(METRICS_FILE);
    let mut csv = if trainer.step > 0 && metrics.exists() {
        OpenOptions::new().append(true).open(&metrics)?
    } else {
        let mut f = File::create(&metrics)?;
        writeln!(f, "{}", metrics_header())?;
        f
    };
    let total = trainer.cfg.train.steps;
    let log_every = trainer.cfg.train.log_every.max(1);
    let ckpt_every = trainer.cfg.train.checkpoint_every;
    let mut checkpoints = Vec::new();
    trainer.run(|t, report| {
        let step = t.step;
        let at_ckpt = ckpt_every > 0 && step % ckpt_every == 0;
        let last = step == total;
        if !(step % log_every == 0 || at_ckpt || last) {
            return Ok(());
        }
        let mut row = report.csv_row(step);
        if at_ckpt || last {
            let e = evaluate(&t.model, &t.cfg.mask, t.cfg.eval.scenes, t.cfg.eval.seed)?;
            row.push_str(&format!(",{:?},{:?}", e.psnr, e.ssim));
            progress(&format!(
                "step {step}/{total} d_total {:.4} g_total {:.4} psnr {:.3} (baseline {:.3})",
                report.d_total, report.g_total, e.psnr, e.baseline_psnr
            ));
        } else {
            row.push_str(",,");
        }
        writeln!(csv, "{row}")?;
        if at_ckpt {
            let path = dir.join(checkpoint_name(step));
            checkpoint::save(&path, t)?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    csv.flush()?;
    let last = dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&last, trainer)?;
    Ok(RunFiles {
        metrics,
        checkpoints,
        last,
    })
}
