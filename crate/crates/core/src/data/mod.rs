//! Benchmark synthesis: balanced per-question example streams over rendered
//! 3x3 grids, with train/val-iid splits on the training templates and a
//! held-out-template val-ood split.

pub mod exec;
pub mod format;
pub mod grid;
pub mod render;
pub mod template;

use crate::lang::{self, parse_prefix, ProgramSeq, ProgramTree};
use exec::{answer_reachable, execute_tree};
use grid::{sample_grid, GridSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use render::{render, ChannelStats, ImageRaster};
use serde::Serialize;
use std::collections::HashSet;
use template::{enumerate_questions, mix_seed, supervised_picks, supervised_quota, QuestionInst};
use thiserror::Error;

pub use grid::P_EMPTY;

/// Examples per unique question, by split membership of its template.
pub const TRAIN_PER_QUESTION: usize = 56;
pub const VAL_IID_PER_QUESTION: usize = 8;
pub const VAL_OOD_PER_QUESTION: usize = 64;

pub const N_TRAIN_QUESTIONS: usize = 135;
pub const N_EVAL_QUESTIONS: usize = 109;

/// Rejection budget per requested example before the builder aborts.
pub const REJECTIONS_PER_EXAMPLE: usize = 10_000;

/// Environment variable bounding dataset-generation worker threads.
pub const GEN_WORKERS_ENV: &str = "MODNET_GEN_WORKERS";

/// Question-word vocabulary: 4 specials plus the 14 surface words.
pub const Q_WORDS: [&str; 18] = [
    "<NULL>", "<START>", "<END>", "<UNK>", "is", "a", "shape", "red", "green", "blue", "circle",
    "triangle", "square", "above", "below", "left", "right", "of",
];
pub const Q_VOCAB_SIZE: usize = Q_WORDS.len();
/// Longest question in words ("is a circle above left of a green shape").
pub const MAX_Q_LEN: usize = 10;

pub fn q_word_id(word: &str) -> Option<u16> {
    Q_WORDS.iter().position(|&w| w == word).map(|i| i as u16)
}

pub fn tokenize_question(text: &str) -> Vec<u16> {
    text.split_whitespace()
        .map(|w| q_word_id(w).unwrap_or(lang::TOK_UNK as u16))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    ValIID,
    ValOOD,
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::ValIID, Split::ValOOD];

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::ValIID => 1,
            Split::ValOOD => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::ValIID),
            2 => Some(Split::ValOOD),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValIID => "val_iid",
            Split::ValOOD => "val_ood",
        }
    }
}

/// One unique question shared by all its examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub uid: u16,
    pub template: u8,
    pub text: String,
    pub tokens: Vec<u16>,
    pub program: ProgramSeq,
    pub supervised: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub question: u16,
    pub grid: GridSpec,
    pub image: ImageRaster,
    pub answer: bool,
    pub split: Split,
    pub supervised: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub n_supervised: u32,
    pub p_empty: f32,
    pub questions: Vec<Question>,
    /// Split-major order: all Train, then Val-IID, then Val-OOD; within a
    /// split, ascending question uid; within a question, generation order.
    pub examples: Vec<Example>,
    pub stats: ChannelStats,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(
        "balance infeasible for question {uid} ({text:?}): needed {need_yes} yes / {need_no} no, \
         found {found_yes}/{found_no} after {rejections} rejections"
    )]
    BalanceInfeasible {
        uid: u16,
        text: String,
        need_yes: usize,
        need_no: usize,
        found_yes: usize,
        found_no: usize,
        rejections: usize,
    },
    #[error("ground-truth program for question {uid} does not parse: {err}")]
    BadProgram { uid: u16, err: lang::ParseError },
}

/// Build the benchmark with the default empty-cell probability.
pub fn build_dataset(seed: u64, n_supervised: usize) -> Result<Dataset, BuildError> {
    build_dataset_with(seed, n_supervised, P_EMPTY)
}

/// All question instances in uid order (train templates 1-7, then eval
/// templates 8-12; enumeration order within a template).
pub fn question_instances(seed: u64) -> Vec<QuestionInst> {
    let mut insts = Vec::with_capacity(N_TRAIN_QUESTIONS + N_EVAL_QUESTIONS);
    for t in 1..=12u8 {
        insts.extend(enumerate_questions(t, seed));
    }
    insts
}

struct Demand {
    split: Split,
    yes: usize,
    no: usize,
}

/// As `build_dataset`, honoring the worker-count environment override.
pub fn build_dataset_with(
    seed: u64,
    n_supervised: usize,
    p_empty: f32,
) -> Result<Dataset, BuildError> {
    let workers = std::env::var(GEN_WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    build_dataset_opts(seed, n_supervised, p_empty, workers)
}

/// Fully explicit builder; `workers` bounds the generation thread pool (None
/// uses the global pool). The output is identical for every worker count.
pub fn build_dataset_opts(
    seed: u64,
    n_supervised: usize,
    p_empty: f32,
    workers: Option<usize>,
) -> Result<Dataset, BuildError> {
    build_dataset_cap(seed, n_supervised, p_empty, workers, REJECTIONS_PER_EXAMPLE)
}

/// As `build_dataset_opts` with an explicit per-example rejection budget.
pub fn build_dataset_cap(
    seed: u64,
    n_supervised: usize,
    p_empty: f32,
    workers: Option<usize>,
    rejections_per_example: usize,
) -> Result<Dataset, BuildError> {
    let insts = question_instances(seed);
    assert_eq!(insts.len(), N_TRAIN_QUESTIONS + N_EVAL_QUESTIONS);

    // Supervision flags: proportional quota over train templates, seeded
    // picks within each template's kept list.
    let quota = supervised_quota(n_supervised);
    let mut supervised_flags = vec![false; insts.len()];
    let mut base = 0usize;
    for t in 1..=7u8 {
        let kept = template::unique_count(t);
        for i in supervised_picks(t, quota[(t - 1) as usize], kept, seed) {
            supervised_flags[base + i] = true;
        }
        base += kept;
    }

    let questions: Vec<Question> = insts
        .iter()
        .enumerate()
        .map(|(uid, inst)| Question {
            uid: uid as u16,
            template: inst.template,
            text: inst.text(),
            tokens: tokenize_question(&inst.text()),
            program: inst.gt_program(),
            supervised: supervised_flags[uid],
        })
        .collect();

    let trees: Vec<ProgramTree> = questions
        .iter()
        .map(|q| parse_prefix(&q.program).map_err(|err| BuildError::BadProgram { uid: q.uid, err }))
        .collect::<Result<_, _>>()?;

    let demands = plan_demands(&questions, &trees);

    // Per-question generation; streams are seeded by uid so the result is
    // identical for any worker count.
    let gen = || -> Vec<Result<Vec<Vec<Example>>, BuildError>> {
        questions
            .par_iter()
            .zip(trees.par_iter())
            .zip(demands.par_iter())
            .map(|((q, tree), dem)| {
                sample_question_examples(q, tree, dem, seed, p_empty, rejections_per_example)
            })
            .collect()
    };
    let per_question = match workers {
        Some(n) if n >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
            .install(gen),
        _ => gen(),
    };

    let mut by_split: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for result in per_question {
        for (i, portion) in result?.into_iter().enumerate() {
            debug_assert!(portion.iter().all(|e| e.split.tag() as usize == i));
            by_split[i].extend(portion);
        }
    }
    let [train, val_iid, val_ood] = by_split;
    let mut examples = train;
    examples.extend(val_iid);
    examples.extend(val_ood);

    let stats = ChannelStats::compute(
        examples
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.image.as_slice()),
    );

    Ok(Dataset { seed, n_supervised: n_supervised as u32, p_empty, questions, examples, stats })
}

/// Per-question yes/no demands. Questions whose ground-truth program can
/// only ever produce one answer (decided by exhaustive small-grid search)
/// emit that answer for their whole portion; the resulting split-level
/// imbalance is repaid by giving other questions a one-example skew toward
/// the missing answer, each question skewed in at most one split portion.
fn plan_demands(questions: &[Question], trees: &[ProgramTree]) -> Vec<Vec<Demand>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Sidedness {
        TwoSided,
        YesOnly,
        NoOnly,
    }
    let sided: Vec<Sidedness> = trees
        .iter()
        .map(|t| match (answer_reachable(t, true), answer_reachable(t, false)) {
            (true, true) => Sidedness::TwoSided,
            (true, false) => Sidedness::YesOnly,
            (false, true) => Sidedness::NoOnly,
            (false, false) => unreachable!("program with no reachable answer"),
        })
        .collect();

    let is_train = |uid: usize| uid < N_TRAIN_QUESTIONS;
    let portion = |uid: usize, split: Split| match split {
        Split::Train => TRAIN_PER_QUESTION,
        Split::ValIID => VAL_IID_PER_QUESTION,
        Split::ValOOD => {
            debug_assert!(!is_train(uid));
            VAL_OOD_PER_QUESTION
        }
    };

    // Base demand: half/half for two-sided questions, everything on the
    // reachable side otherwise.
    let base = |uid: usize, split: Split| -> (usize, usize) {
        let n = portion(uid, split);
        match sided[uid] {
            Sidedness::TwoSided => (n / 2, n - n / 2),
            Sidedness::YesOnly => (n, 0),
            Sidedness::NoOnly => (0, n),
        }
    };

    let mut skew: Vec<i8> = vec![0; questions.len()]; // per (uid, its skewed split)
    let mut skew_split: Vec<Option<Split>> = vec![None; questions.len()];

    // Smallest splits first so each gets first pick of unskewed questions.
    for split in [Split::ValIID, Split::Train, Split::ValOOD] {
        let uids: Vec<usize> = (0..questions.len())
            .filter(|&u| if split == Split::ValOOD { !is_train(u) } else { is_train(u) })
            .collect();
        let total: usize = uids.iter().map(|&u| portion(u, split)).sum();
        let base_yes: i64 = uids.iter().map(|&u| base(u, split).0 as i64).sum();
        let mut deficit = total as i64 / 2 - base_yes;
        for &u in &uids {
            if deficit == 0 {
                break;
            }
            if sided[u] != Sidedness::TwoSided || skew_split[u].is_some() {
                continue;
            }
            skew[u] = if deficit > 0 { 1 } else { -1 };
            skew_split[u] = Some(split);
            deficit -= skew[u] as i64;
        }
    }

    (0..questions.len())
        .map(|u| {
            let splits: &[Split] = if is_train(u) {
                &[Split::Train, Split::ValIID]
            } else {
                &[Split::ValOOD]
            };
            splits
                .iter()
                .map(|&split| {
                    let (mut yes, mut no) = base(u, split);
                    if skew_split[u] == Some(split) {
                        if skew[u] > 0 {
                            yes += 1;
                            no -= 1;
                        } else {
                            yes -= 1;
                            no += 1;
                        }
                    }
                    Demand { split, yes, no }
                })
                .collect()
        })
        .collect()
}

/// Draw unique grids for one question until every portion's yes/no demand is
/// met. Returns one vector per split tag (empty for splits the question does
/// not feed). Duplicates and unneeded answers count toward the rejection cap.
fn sample_question_examples(
    q: &Question,
    tree: &ProgramTree,
    demands: &[Demand],
    seed: u64,
    p_empty: f32,
    rejections_per_example: usize,
) -> Result<Vec<Vec<Example>>, BuildError> {
    let total: usize = demands.iter().map(|d| d.yes + d.no).sum();
    let cap = rejections_per_example * total;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6e1d_5a17, q.uid as u64));
    let mut seen: HashSet<[u8; 9]> = HashSet::with_capacity(2 * total);
    let mut pools: Vec<(Vec<GridSpec>, Vec<GridSpec>)> =
        demands.iter().map(|_| (Vec::new(), Vec::new())).collect();
    let mut rejections = 0usize;
    loop {
        let done = pools
            .iter()
            .zip(demands)
            .all(|((y, n), d)| y.len() == d.yes && n.len() == d.no);
        if done {
            break;
        }
        if rejections > cap {
            let (fy, fn_) = pools.iter().fold((0, 0), |(a, b), (y, n)| (a + y.len(), b + n.len()));
            return Err(BuildError::BalanceInfeasible {
                uid: q.uid,
                text: q.text.clone(),
                need_yes: demands.iter().map(|d| d.yes).sum(),
                need_no: demands.iter().map(|d| d.no).sum(),
                found_yes: fy,
                found_no: fn_,
                rejections,
            });
        }
        let grid = sample_grid(&mut rng, p_empty);
        if !seen.insert(grid.to_bytes()) {
            rejections += 1;
            continue;
        }
        let answer = execute_tree(tree, &grid);
        // First portion still missing this answer takes the grid.
        let slot = pools.iter_mut().zip(demands).find_map(|((y, n), d)| {
            if answer && y.len() < d.yes {
                Some(y)
            } else if !answer && n.len() < d.no {
                Some(n)
            } else {
                None
            }
        });
        match slot {
            Some(pool) => pool.push(grid),
            None => rejections += 1,
        }
    }

    let mut out: Vec<Vec<Example>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for ((yes, no), d) in pools.into_iter().zip(demands) {
        let supervised = q.supervised && d.split == Split::Train;
        let portion = &mut out[d.split.tag() as usize];
        let mut yes = yes.into_iter();
        let mut no = no.into_iter();
        let mut take_yes = true;
        // Alternate answers while both remain, then drain the leftovers.
        for _ in 0..d.yes + d.no {
            let grid = if take_yes {
                yes.next().or_else(|| no.next()).unwrap()
            } else {
                no.next().or_else(|| yes.next()).unwrap()
            };
            take_yes = !take_yes;
            portion.push(Example {
                question: q.uid,
                image: render(&grid),
                answer: execute_tree(tree, &grid),
                grid,
                split: d.split,
                supervised,
            });
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let start = self.examples.iter().position(|e| e.split == split);
        match start {
            None => 0..0,
            Some(s) => {
                let end = self.examples[s..]
                    .iter()
                    .position(|e| e.split != split)
                    .map(|off| s + off)
                    .unwrap_or(self.examples.len());
                s..end
            }
        }
    }

    pub fn split_examples(&self, split: Split) -> &[Example] {
        &self.examples[self.split_range(split)]
    }

    pub fn question(&self, uid: u16) -> &Question {
        &self.questions[uid as usize]
    }

    pub fn manifest(&self) -> SplitManifest {
        let mut splits = Vec::new();
        for split in SPLITS {
            let ex = self.split_examples(split);
            let yes = ex.iter().filter(|e| e.answer).count();
            let uniq: HashSet<u16> = ex.iter().map(|e| e.question).collect();
            splits.push(SplitSummary {
                name: split.name(),
                examples: ex.len(),
                unique_questions: uniq.len(),
                yes,
                no: ex.len() - yes,
            });
        }
        let templates = (1..=12u8)
            .map(|t| {
                let uids: Vec<u16> = self
                    .questions
                    .iter()
                    .filter(|q| q.template == t)
                    .map(|q| q.uid)
                    .collect();
                TemplateSummary {
                    id: t,
                    unique_questions: uids.len(),
                    questions: uids
                        .iter()
                        .map(|&u| self.questions[u as usize].text.clone())
                        .collect(),
                    uids,
                }
            })
            .collect();
        SplitManifest {
            seed: self.seed,
            n_supervised: self.n_supervised,
            p_empty: self.p_empty,
            splits,
            templates,
            supervised_uids: self
                .questions
                .iter()
                .filter(|q| q.supervised)
                .map(|q| q.uid)
                .collect(),
            mean: self.stats.mean,
            std: self.stats.std,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub name: &'static str,
    pub examples: usize,
    pub unique_questions: usize,
    pub yes: usize,
    pub no: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TemplateSummary {
    pub id: u8,
    pub unique_questions: usize,
    pub uids: Vec<u16>,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub n_supervised: u32,
    pub p_empty: f32,
    pub splits: Vec<SplitSummary>,
    pub templates: Vec<TemplateSummary>,
    pub supervised_uids: Vec<u16>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}
