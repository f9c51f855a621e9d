//! Metrics rows, the append-only CSV, model selection, and the accuracy
//! measurements exported by `modnet eval`.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use modnet_core::ee::ExecutionEngine;
use modnet_core::il::{EvalPoint, PreparedSplit};
use modnet_core::lang::{parse_prefix, ProgramTree};
use modnet_core::pg::ProgramGenerator;
use rayon::prelude::*;
use thiserror::Error;

pub const CSV_HEADER: &str =
    "global_step,generation,phase,train_acc,val_iid_acc,val_ood_acc,program_acc,wallclock_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub global_step: u64,
    pub generation: u32,
    pub phase: String,
    pub train_acc: f64,
    pub val_iid_acc: f64,
    pub val_ood_acc: f64,
    pub program_acc: f64,
    pub wallclock_s: f64,
}

impl From<&EvalPoint> for MetricsRow {
    fn from(p: &EvalPoint) -> Self {
        MetricsRow {
            global_step: p.global_step,
            generation: p.generation,
            phase: p.phase.as_str().to_string(),
            train_acc: p.train_acc,
            val_iid_acc: p.val_iid_acc,
            val_ood_acc: p.val_ood_acc,
            program_acc: p.program_acc,
            wallclock_s: p.wallclock_s,
        }
    }
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.global_step,
            self.generation,
            self.phase,
            self.train_acc,
            self.val_iid_acc,
            self.val_ood_acc,
            self.program_acc,
            self.wallclock_s
        )
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Appends one row per evaluation and flushes after each so a crash never
/// loses completed measurements and the file stays parseable.
pub struct MetricsWriter {
    out: File,
}

impl MetricsWriter {
    /// Creates the file with a header, or appends to an existing one.
    pub fn open(path: &Path) -> Result<Self, MetricsError> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut out = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
            out.flush()?;
        }
        Ok(MetricsWriter { out })
    }

    pub fn row(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        writeln!(self.out, "{}", row.to_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads rows back, ignoring a trailing line with no terminator (a write cut
/// short by a crash).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let complete = match text.rfind('\n') {
        Some(p) => &text[..p],
        None => "",
    };
    let mut rows = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if i == 0 {
            if line != CSV_HEADER {
                return Err(MetricsError::Parse { line: 1, detail: format!("bad header {line:?}") });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(MetricsError::Parse {
                line: i + 1,
                detail: format!("expected 8 fields, got {}", f.len()),
            });
        }
        let num = |j: usize| -> Result<f64, MetricsError> {
            f[j].parse().map_err(|_| MetricsError::Parse {
                line: i + 1,
                detail: format!("bad number {:?}", f[j]),
            })
        };
        rows.push(MetricsRow {
            global_step: f[0].parse().map_err(|_| MetricsError::Parse {
                line: i + 1,
                detail: format!("bad step {:?}", f[0]),
            })?,
            generation: f[1].parse().map_err(|_| MetricsError::Parse {
                line: i + 1,
                detail: format!("bad generation {:?}", f[1]),
            })?,
            phase: f[2].to_string(),
            train_acc: num(3)?,
            val_iid_acc: num(4)?,
            val_ood_acc: num(5)?,
            program_acc: num(6)?,
            wallclock_s: num(7)?,
        });
    }
    Ok(rows)
}

/// Index of the row with the highest Val-IID accuracy; ties go to the
/// earliest step. Val-OOD never participates.
pub fn select_best(rows: &[MetricsRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.map_or(true, |b| r.val_iid_acc > rows[b].val_iid_acc) {
            best = Some(i);
        }
    }
    best
}

/// Argmax programs for each unique question of a split, by question index.
fn argmax_trees(pg: &ProgramGenerator<f32>, split: &PreparedSplit) -> Vec<Option<ProgramTree>> {
    split
        .questions
        .iter()
        .map(|q| parse_prefix(&pg.decode_argmax(&q.tokens).seq).ok())
        .collect()
}

/// Fraction of examples answered correctly by executing the argmax-decoded
/// program on the image. Undecodable programs count as wrong.
pub fn task_accuracy(
    pg: &ProgramGenerator<f32>,
    ee: &ExecutionEngine<f32>,
    split: &PreparedSplit,
) -> f64 {
    assert!(!split.is_empty(), "task_accuracy on an empty split");
    let trees = argmax_trees(pg, split);
    let correct: usize = (0..split.len())
        .into_par_iter()
        .filter(|&i| match &trees[split.q_of[i]] {
            Some(t) => ee.predict(t, &split.images[i]) == split.answers[i],
            None => false,
        })
        .count();
    correct as f64 / split.len() as f64
}

/// Fraction of the split's unique questions whose argmax decode matches the
/// ground-truth program token for token.
pub fn program_accuracy(pg: &ProgramGenerator<f32>, split: &PreparedSplit) -> f64 {
    assert!(!split.questions.is_empty(), "program_accuracy on an empty split");
    let hits = split
        .questions
        .iter()
        .filter(|q| pg.decode_argmax(&q.tokens).seq == q.program)
        .count();
    hits as f64 / split.questions.len() as f64
}
