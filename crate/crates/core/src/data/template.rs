//! Question templates: instantiation, surface text, tokenization, and the
//! ground-truth program grammar. Templates 1-7 are the training family,
//! 8-12 the held-out evaluation family.

use super::grid::{Color, Shape, COLORS, SHAPES};
use crate::lang::{self, ProgramSeq};
use rand::{seq::index::sample as index_sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_TEMPLATES: usize = 12;
pub const TRAIN_TEMPLATES: std::ops::RangeInclusive<u8> = 1..=7;
pub const EVAL_TEMPLATES: std::ops::RangeInclusive<u8> = 8..=12;

/// Positional relation between a subject cell and an object cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rel {
    Above,
    Below,
    LeftOf,
    RightOf,
}

pub const RELS: [Rel; 4] = [Rel::Above, Rel::Below, Rel::LeftOf, Rel::RightOf];

impl Rel {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Rel::Above => &["above"],
            Rel::Below => &["below"],
            Rel::LeftOf => &["left", "of"],
            Rel::RightOf => &["right", "of"],
        }
    }

    pub fn transform_token(self) -> u8 {
        match self {
            Rel::Above => lang::TOK_ABOVE,
            Rel::Below => lang::TOK_BELOW,
            Rel::LeftOf => lang::TOK_LEFT_OF,
            Rel::RightOf => lang::TOK_RIGHT_OF,
        }
    }

    fn vertical(self) -> bool {
        matches!(self, Rel::Above | Rel::Below)
    }
}

/// Ordered pairs of perpendicular relations ("above left of", ...), first
/// relation outermost, in RELS-major order.
pub fn rel2_pairs() -> Vec<(Rel, Rel)> {
    let mut out = Vec::with_capacity(8);
    for &r1 in &RELS {
        for &r2 in &RELS {
            if r1.vertical() != r2.vertical() {
                out.push((r1, r2));
            }
        }
    }
    out
}

/// A single attribute constraint on one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attr {
    Color(Color),
    Shape(Shape),
}

impl Attr {
    fn noun_words(self) -> Vec<&'static str> {
        // "a red shape" vs "a circle"
        match self {
            Attr::Color(c) => vec![c.word(), "shape"],
            Attr::Shape(s) => vec![s.word()],
        }
    }

    /// Bare-adjective form used when the attribute is a predicate
    /// ("is a circle red", "is a red shape blue").
    fn predicate_words(self) -> Vec<&'static str> {
        match self {
            Attr::Color(c) => vec![c.word()],
            Attr::Shape(s) => vec![s.word()],
        }
    }

    fn filter_token(self) -> u8 {
        match self {
            Attr::Color(c) => lang::TOK_COLOR_RED + c.index() as u8,
            Attr::Shape(s) => lang::TOK_SHAPE_CIRCLE + s.index() as u8,
        }
    }
}

/// One instantiated question: subject attribute, zero/one/two relations
/// (surface order, outermost first), object attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuestionInst {
    pub template: u8,
    pub subject: Attr,
    pub rels: Vec<Rel>,
    pub object: Attr,
    /// Whether the object is phrased as a noun ("a circle") or a bare
    /// predicate ("red" in "is a circle red").
    object_is_predicate: bool,
}

impl QuestionInst {
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["is", "a"];
        w.extend(self.subject.noun_words());
        for r in &self.rels {
            w.extend(r.words());
        }
        if self.object_is_predicate {
            w.extend(self.object.predicate_words());
        } else {
            w.push("a");
            w.extend(self.object.noun_words());
        }
        w
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    /// Ground-truth program: and(subject-filter(scene),
    /// transform[r1](transform[r2](object-filter(scene)))) with the
    /// right-hand relation applied first.
    pub fn gt_program(&self) -> ProgramSeq {
        let mut p = vec![lang::TOK_AND, self.subject.filter_token(), lang::TOK_SCENE];
        for r in &self.rels {
            p.push(r.transform_token());
        }
        p.push(self.object.filter_token());
        p.push(lang::TOK_SCENE);
        p
    }
}

fn color_attrs() -> impl Iterator<Item = Attr> {
    COLORS.iter().map(|&c| Attr::Color(c))
}

fn shape_attrs() -> impl Iterator<Item = Attr> {
    SHAPES.iter().map(|&s| Attr::Shape(s))
}

/// Full combinatorial instantiation of one template, in fixed nested order
/// (subject outermost, then relations, then object).
pub fn instantiate_template(template: u8) -> Vec<QuestionInst> {
    let mut out = Vec::new();
    let mut push = |subject: Attr, rels: Vec<Rel>, object: Attr, pred: bool| {
        out.push(QuestionInst { template, subject, rels, object, object_is_predicate: pred });
    };
    match template {
        // is a COLOR shape RELATIVE(1) a COLOR shape
        1 => {
            for s in color_attrs() {
                for r in RELS {
                    for o in color_attrs() {
                        push(s, vec![r], o, false);
                    }
                }
            }
        }
        // is a SHAPE RELATIVE(1) a COLOR shape
        2 => {
            for s in shape_attrs() {
                for r in RELS {
                    for o in color_attrs() {
                        push(s, vec![r], o, false);
                    }
                }
            }
        }
        // is a SHAPE RELATIVE(2) a COLOR shape
        3 => {
            for s in shape_attrs() {
                for (r1, r2) in rel2_pairs() {
                    for o in color_attrs() {
                        push(s, vec![r1, r2], o, false);
                    }
                }
            }
        }
        // is a SHAPE RELATIVE(2) a SHAPE
        4 => {
            for s in shape_attrs() {
                for (r1, r2) in rel2_pairs() {
                    for o in shape_attrs() {
                        push(s, vec![r1, r2], o, false);
                    }
                }
            }
        }
        // is a COLOR shape a SHAPE
        5 => {
            for s in color_attrs() {
                for o in shape_attrs() {
                    push(s, vec![], o, false);
                }
            }
        }
        // is a SHAPE COLOR
        6 => {
            for s in shape_attrs() {
                for o in color_attrs() {
                    push(s, vec![], o, true);
                }
            }
        }
        // is a SHAPE a SHAPE
        7 => {
            for s in shape_attrs() {
                for o in shape_attrs() {
                    push(s, vec![], o, false);
                }
            }
        }
        // is a COLOR shape RELATIVE(2) a COLOR shape
        8 => {
            for s in color_attrs() {
                for (r1, r2) in rel2_pairs() {
                    for o in color_attrs() {
                        push(s, vec![r1, r2], o, false);
                    }
                }
            }
        }
        // is a COLOR shape RELATIVE(1) a SHAPE
        9 => {
            for s in color_attrs() {
                for r in RELS {
                    for o in shape_attrs() {
                        push(s, vec![r], o, false);
                    }
                }
            }
        }
        // is a COLOR shape RELATIVE(2) a SHAPE
        10 => {
            for s in color_attrs() {
                for (r1, r2) in rel2_pairs() {
                    for o in shape_attrs() {
                        push(s, vec![r1, r2], o, false);
                    }
                }
            }
        }
        // is a SHAPE RELATIVE(1) a SHAPE
        11 => {
            for s in shape_attrs() {
                for r in RELS {
                    for o in shape_attrs() {
                        push(s, vec![r], o, false);
                    }
                }
            }
        }
        // is a COLOR shape COLOR
        12 => {
            for s in color_attrs() {
                for o in color_attrs() {
                    push(s, vec![], o, true);
                }
            }
        }
        t => panic!("template id {t} out of range 1..=12"),
    }
    out
}

/// Unique-question budget per template; templates whose combinatorial space
/// is larger are subsampled down to this count with the dataset seed.
pub fn unique_count(template: u8) -> usize {
    match template {
        1 | 2 | 9 | 11 => 36,
        3 | 8 => 15,
        4 => 21,
        10 => 13,
        5 | 6 | 7 | 12 => 9,
        t => panic!("template id {t} out of range 1..=12"),
    }
}

/// Kept instances of a template: the full instantiation when it fits the
/// budget, otherwise a seeded uniform subsample preserving enumeration order.
pub fn enumerate_questions(template: u8, seed: u64) -> Vec<QuestionInst> {
    let all = instantiate_template(template);
    let keep = unique_count(template);
    if all.len() <= keep {
        assert_eq!(all.len(), keep, "template {template} full space below budget");
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7e3a_11ce, template as u64));
    let mut idx = index_sample(&mut rng, all.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

/// Proportional allotment of supervised questions across the train
/// templates by largest remainder (ties broken by template id).
pub fn supervised_quota(n_supervised: usize) -> [usize; 7] {
    let uniq: [usize; 7] = [36, 36, 15, 21, 9, 9, 9];
    let total: usize = uniq.iter().sum();
    assert!(n_supervised <= total, "n_supervised {n_supervised} exceeds {total}");
    let mut quota = [0usize; 7];
    let mut rem = [(0u64, 0usize); 7];
    let mut assigned = 0;
    for t in 0..7 {
        let num = n_supervised as u64 * uniq[t] as u64;
        quota[t] = (num / total as u64) as usize;
        assigned += quota[t];
        rem[t] = (num % total as u64, t);
    }
    // Hand out the remainder to the largest fractional parts.
    let mut order: Vec<usize> = (0..7).collect();
    order.sort_by_key(|&t| (std::cmp::Reverse(rem[t].0), t));
    for &t in order.iter().take(n_supervised - assigned) {
        quota[t] += 1;
    }
    quota
}

/// Which question indices (into the kept list) of train template `t`
/// carry ground-truth supervision, chosen with the dataset seed.
pub fn supervised_picks(template: u8, quota: usize, kept: usize, seed: u64) -> Vec<usize> {
    assert!(quota <= kept);
    if quota == kept {
        return (0..kept).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x51b5_ed00, template as u64));
    let mut idx = index_sample(&mut rng, kept, quota).into_vec();
    idx.sort_unstable();
    idx
}

/// SplitMix64-style seed derivation so parallel per-question streams are
/// independent of worker scheduling.
pub fn mix_seed(seed: u64, salt: u64, lane: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ lane.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
