//! Runs experiments end to end: dataset, trainer, streaming metrics,
//! checkpoints, plots, and the multi-seed summary.

use std::fs;
use std::path::{Path, PathBuf};

use modnet_core::data::{build_dataset, BuildError};
use modnet_core::il::{Prepared, TrainAbort, Trainer};
use thiserror::Error;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::metrics::{read_metrics, select_best, MetricsError, MetricsRow, MetricsWriter};
use crate::plot;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(#[from] BuildError),
    #[error("training aborted: {0}")]
    Abort(#[from] TrainAbort),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CkptError),
}

/// What one finished run leaves on disk, plus the headline numbers.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub best_step: u64,
    pub best_val_iid: f64,
    /// Val-OOD at the selected step (as evaluated there).
    pub best_val_ood: f64,
    pub final_program_acc: f64,
    pub rows: usize,
}

/// Executes `cfg` inside `out_dir`, writing `config.txt`, `metrics.csv`,
/// `best.ckpt`, `final.ckpt`, and `curves.svg`.
pub fn run_one(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary, DriverError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.echo())?;

    let ds = build_dataset(cfg.dataset_seed, cfg.n_supervised)?;
    let prep = Prepared::from_dataset(&ds);
    let mut trainer = Trainer::new(cfg.to_trainer(), &prep);

    let mut writer = MetricsWriter::open(&out_dir.join("metrics.csv"))?;
    trainer.on_eval = Some(Box::new(move |p| {
        let row = MetricsRow::from(p);
        if let Err(e) = writer.row(&row) {
            eprintln!("metrics write failed: {e}");
        }
    }));

    let outcome = trainer.run()?;
    let best = &outcome.best;
    checkpoint::save(
        &out_dir.join("best.ckpt"),
        cfg,
        &[best.pg.clone(), best.ee.clone()].concat(),
    )?;
    checkpoint::save(
        &out_dir.join("final.ckpt"),
        cfg,
        &checkpoint::model_params(&trainer.pg, &trainer.ee),
    )?;

    let rows: Vec<MetricsRow> = outcome.history.iter().map(MetricsRow::from).collect();
    plot::write_svg(&out_dir.join("curves.svg"), &rows)?;

    let best_row = rows
        .iter()
        .find(|r| r.global_step == best.global_step)
        .expect("best step comes from the history");
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        best_step: best.global_step,
        best_val_iid: best.val_iid_acc,
        best_val_ood: best_row.val_ood_acc,
        final_program_acc: rows.last().map(|r| r.program_acc).unwrap_or(0.0),
        rows: rows.len(),
    })
}

pub struct SeedStats {
    pub seeds: Vec<u64>,
    pub summaries: Vec<RunSummary>,
    pub val_iid_mean: f64,
    pub val_iid_std: f64,
    pub val_ood_mean: f64,
    pub val_ood_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the config once per seed (sequentially), then writes `summary.txt`
/// with mean and standard deviation of the selected checkpoints' accuracies.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64], out_root: &Path) -> Result<SeedStats, DriverError> {
    assert!(!seeds.is_empty());
    fs::create_dir_all(out_root)?;
    let mut summaries = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        summaries.push(run_one(&c, &out_root.join(format!("seed_{s}")))?);
    }
    let iid: Vec<f64> = summaries.iter().map(|s| s.best_val_iid).collect();
    let ood: Vec<f64> = summaries.iter().map(|s| s.best_val_ood).collect();
    let (val_iid_mean, val_iid_std) = mean_std(&iid);
    let (val_ood_mean, val_ood_std) = mean_std(&ood);
    let mut report = String::new();
    report.push_str(&format!("seeds = {seeds:?}\n"));
    report.push_str(&format!("val_iid = {val_iid_mean:.4} +- {val_iid_std:.4}\n"));
    report.push_str(&format!("val_ood = {val_ood_mean:.4} +- {val_ood_std:.4}\n"));
    for (s, summary) in seeds.iter().zip(&summaries) {
        report.push_str(&format!(
            "seed {s}: best step {} val_iid {:.4} val_ood {:.4}\n",
            summary.best_step, summary.best_val_iid, summary.best_val_ood
        ));
    }
    fs::write(out_root.join("summary.txt"), &report)?;
    print!("{report}");
    Ok(SeedStats { seeds: seeds.to_vec(), summaries, val_iid_mean, val_iid_std, val_ood_mean, val_ood_std })
}

/// Re-plots an existing metrics file (the `plot` subcommand).
pub fn replot(metrics: &Path, out: &Path) -> Result<(), DriverError> {
    let rows = read_metrics(metrics)?;
    if rows.is_empty() {
        return Err(DriverError::Metrics(MetricsError::Parse {
            line: 0,
            detail: "no complete rows".into(),
        }));
    }
    plot::write_svg(out, &rows)?;
    Ok(())
}

/// Loads a checkpoint and scores one split (the `eval` subcommand).
pub fn eval_checkpoint(ckpt: &Path, split: &str) -> Result<(f64, f64), DriverError> {
    let loaded = checkpoint::load(ckpt)?;
    let (pg, ee) = loaded.into_models()?;
    let ds = build_dataset(loaded.config.dataset_seed, loaded.config.n_supervised)?;
    let prep = Prepared::from_dataset(&ds);
    let part = match split {
        "train" => &prep.train,
        "val_iid" => &prep.val_iid,
        "val_ood" => &prep.val_ood,
        other => {
            return Err(DriverError::Metrics(MetricsError::Parse {
                line: 0,
                detail: format!("unknown split {other:?} (train|val_iid|val_ood)"),
            }))
        }
    };
    let task = crate::metrics::task_accuracy(&pg, &ee, part);
    let prog = crate::metrics::program_accuracy(&pg, part);
    Ok((task, prog))
}

/// `select_best` over a metrics file; used by tests and tooling.
pub fn best_of_metrics(path: &Path) -> Result<Option<MetricsRow>, DriverError> {
    let rows = read_metrics(path)?;
    Ok(select_best(&rows).map(|i| rows[i].clone()))
}
