use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checks::{format_report, run_checks, CheckOptions};
use super::config::RunConfig;
use crate::backbone::Backbone;
use crate::data::{load_checkpoint, save_checkpoint, save_dataset, write_ppm};
use crate::error::{Error, Result};
use crate::sampler::{generate, NetworkVelocity, SampleConfig};
use crate::train::{StepReport, Trainer};

/// Trains per the config; returns the path of the final checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let sched = cfg.stage_schedule()?;
    let data = cfg.dataset()?;
    fs::create_dir_all(&cfg.output.dir)?;

    let mut trainer = match &cfg.output.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.ensure_matches(&cfg.model, &sched)?;
            Trainer::resume(ck, cfg.train)?
        }
        None => Trainer::new(cfg.model, sched, cfg.train)?,
    };

    let log_path = cfg.output.dir.join("loss.csv");
    let fresh_log = trainer.step() == 0 || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)?;
    if fresh_log {
        writeln!(log, "{}", StepReport::CSV_HEADER)?;
    }

    let every = cfg.train.checkpoint_every;
    while trainer.step() < cfg.train.total_steps {
        let report = match trainer.train_step(&data) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let diag = cfg.output.dir.join("diagnostic.pxfc");
                save_checkpoint(&trainer.checkpoint(), &diag)?;
                eprintln!("training aborted; state before the failing step saved to {}", diag.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", report.csv_line())?;
        if every > 0 && report.step % every == 0 && report.step < cfg.train.total_steps {
            save_checkpoint(&trainer.checkpoint(), cfg.output.dir.join(format!("step{:06}.pxfc", report.step)))?;
        }
        if report.step % 50 == 0 {
            eprintln!("step {} loss {:.5}", report.step, report.loss);
        }
    }
    log.flush()?;
    let last = cfg.output.dir.join("final.pxfc");
    save_checkpoint(&trainer.checkpoint(), &last)?;
    Ok(last)
}

/// Output file name for one sample.
pub fn sample_file_name(class: usize, seed: u64) -> String {
    format!("class{class}_seed{seed}.ppm")
}

/// Writes `count` samples of `class` with seeds `sample.seed, sample.seed + 1, ...`, using EMA weights.
pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, class: usize, count: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let sched = cfg.stage_schedule()?;
    let ck = load_checkpoint(ckpt)?;
    ck.ensure_matches(&cfg.model, &sched)?;
    if class >= cfg.model.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            cfg.model.num_classes
        )));
    }
    let backbone = Backbone::new(ck.model)?;
    let model = NetworkVelocity {
        backbone: &backbone,
        params: &ck.ema,
    };
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let seed = cfg.sample.seed.wrapping_add(i as u64);
        let sc = SampleConfig {
            seed,
            ..cfg.sample.clone()
        };
        let img = generate(&model, Some(class), &sched, &sc)?;
        let path = out_dir.join(sample_file_name(class, seed));
        write_ppm(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the self-test suite; returns the report and the number of failures.
pub fn cmd_check(cfg: &RunConfig, opts: &CheckOptions) -> (String, usize) {
    let outcomes = run_checks(cfg, opts);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    (format_report(&outcomes), failed)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    save_dataset(&cfg.generate_dataset()?, out)
}
