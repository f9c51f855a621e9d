//! Test-side oracles, kept independent of the library's executor: explicit
//! set comprehensions over (row, col) coordinates instead of bitmask
//! arithmetic, and question semantics derived from template parameters
//! without touching programs or the parser.

#![allow(dead_code)]

use modnet_core::data::grid::{Cell, GridSpec, COLORS, GRID_DIM, SHAPES};
use modnet_core::data::template::{Attr, QuestionInst, Rel};
use modnet_core::lang::{self, arity, ProgramTree};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

pub type Pos = (usize, usize);

pub fn all_coords() -> impl Iterator<Item = Pos> {
    (0..GRID_DIM).flat_map(|r| (0..GRID_DIM).map(move |c| (r, c)))
}

/// "x is r-related to y": x lies in relation r to the reference cell y.
pub fn rel_holds(r: Rel, x: Pos, y: Pos) -> bool {
    match r {
        Rel::Above => x.1 == y.1 && y.0 > x.0,
        Rel::Below => x.1 == y.1 && y.0 < x.0,
        Rel::LeftOf => x.0 == y.0 && y.1 > x.1,
        Rel::RightOf => x.0 == y.0 && y.1 < x.1,
    }
}

pub fn attr_matches(cell: Cell, attr: Attr) -> bool {
    match (cell, attr) {
        (Some((_, c)), Attr::Color(want)) => c == want,
        (Some((s, _)), Attr::Shape(want)) => s == want,
        (None, _) => false,
    }
}

pub fn cells_matching(grid: &GridSpec, attr: Attr) -> Vec<Pos> {
    all_coords().filter(|&(r, c)| attr_matches(grid.cell(r, c), attr)).collect()
}

/// Question truth straight from the template parameters: relation-free
/// templates ask for one cell satisfying both attributes; relational
/// templates ask for a subject cell related (through intermediate
/// coordinates, for two-step relations) to an object cell.
pub fn question_oracle(q: &QuestionInst, grid: &GridSpec) -> bool {
    let subj = cells_matching(grid, q.subject);
    let obj = cells_matching(grid, q.object);
    match q.rels.as_slice() {
        [] => subj.iter().any(|p| obj.contains(p)),
        [r] => subj.iter().any(|&x| obj.iter().any(|&y| rel_holds(*r, x, y))),
        [r1, r2] => subj.iter().any(|&x| {
            obj.iter().any(|&y| {
                all_coords().any(|z| rel_holds(*r1, x, z) && rel_holds(*r2, z, y))
            })
        }),
        more => panic!("unexpected relation chain of length {}", more.len()),
    }
}

/// Set-comprehension evaluator for arbitrary program trees.
pub fn set_eval(tree: &ProgramTree, grid: &GridSpec) -> HashSet<Pos> {
    match tree.token {
        lang::TOK_SCENE => all_coords().filter(|&(r, c)| grid.cell(r, c).is_some()).collect(),
        lang::TOK_AND => {
            let a = set_eval(&tree.children[0], grid);
            let b = set_eval(&tree.children[1], grid);
            a.intersection(&b).copied().collect()
        }
        t if (lang::TOK_COLOR_RED..=lang::TOK_COLOR_BLUE).contains(&t) => {
            let attr = Attr::Color(COLORS[(t - lang::TOK_COLOR_RED) as usize]);
            set_eval(&tree.children[0], grid)
                .into_iter()
                .filter(|&(r, c)| attr_matches(grid.cell(r, c), attr))
                .collect()
        }
        t if (lang::TOK_SHAPE_CIRCLE..=lang::TOK_SHAPE_SQUARE).contains(&t) => {
            let attr = Attr::Shape(SHAPES[(t - lang::TOK_SHAPE_CIRCLE) as usize]);
            set_eval(&tree.children[0], grid)
                .into_iter()
                .filter(|&(r, c)| attr_matches(grid.cell(r, c), attr))
                .collect()
        }
        t => {
            let rel = match t {
                lang::TOK_ABOVE => Rel::Above,
                lang::TOK_BELOW => Rel::Below,
                lang::TOK_LEFT_OF => Rel::LeftOf,
                lang::TOK_RIGHT_OF => Rel::RightOf,
                other => panic!("unexpected token {other} in tree"),
            };
            let child = set_eval(&tree.children[0], grid);
            all_coords().filter(|&p| child.iter().any(|&q| rel_holds(rel, p, q))).collect()
        }
    }
}

pub fn set_answer(tree: &ProgramTree, grid: &GridSpec) -> bool {
    !set_eval(tree, grid).is_empty()
}

/// Random program tree over the operator vocabulary, at most `budget` tokens.
pub fn random_tree(rng: &mut ChaCha8Rng, budget: usize) -> ProgramTree {
    let ops: Vec<u8> = (0..lang::VOCAB_SIZE as u8).filter(|&t| arity(t).is_some()).collect();
    loop {
        let tok = ops[rng.gen_range(0..ops.len())];
        let a = arity(tok).unwrap() as usize;
        if a == 0 {
            return ProgramTree::leaf(tok);
        }
        if budget < 1 + a {
            continue;
        }
        let mut children = Vec::with_capacity(a);
        let mut left = budget - 1;
        for i in 0..a {
            let reserve = a - 1 - i;
            let child_budget =
                if reserve == 0 { left } else { rng.gen_range(1..=left - reserve) };
            children.push(random_tree(rng, child_budget));
            left -= children.last().unwrap().len();
        }
        return ProgramTree::node(tok, children);
    }
}

/// Uniform random grid including empty cells (may be all-empty).
pub fn random_grid(rng: &mut ChaCha8Rng, p_empty: f64) -> GridSpec {
    let mut g = GridSpec::EMPTY;
    for cell in g.cells.iter_mut() {
        if rng.gen::<f64>() >= p_empty {
            let v = rng.gen_range(0..9usize);
            *cell = Some((SHAPES[v / 3], COLORS[v % 3]));
        }
    }
    g
}
