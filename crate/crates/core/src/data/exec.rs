//! Symbolic executor: evaluates a program bottom-up over 9-bit cell masks.
//!
//! Mask bit r*3+c covers grid cell (row r, col c), row 0 at the top. The
//! transform ops are bit-shift images of the relations:
//!   above(M)    = cells with an M-cell strictly below in the same column
//!   below(M)    = cells with an M-cell strictly above in the same column
//!   left_of(M)  = cells with an M-cell strictly right in the same row
//!   right_of(M) = cells with an M-cell strictly left in the same row
//! `and` intersects, `scene` is the non-empty mask, attribute filters AND the
//! child with the attribute mask. The answer is yes iff the root mask is
//! non-empty.

use super::grid::{GridSpec, COLORS, GRID_CELLS, GRID_DIM, SHAPES};
use crate::lang::{self, parse_prefix, ParseError, ProgramTree};

pub type Mask = u16;

pub const MASK_ALL: Mask = 0b1_1111_1111;
const COL0: Mask = 0b001_001_001;
const COL2: Mask = 0b100_100_100;

pub fn scene_mask(grid: &GridSpec) -> Mask {
    let mut m = 0;
    for (i, c) in grid.cells.iter().enumerate() {
        if c.is_some() {
            m |= 1 << i;
        }
    }
    m
}

pub fn color_mask(grid: &GridSpec, color_index: usize) -> Mask {
    let mut m = 0;
    for (i, c) in grid.cells.iter().enumerate() {
        if matches!(c, Some((_, k)) if k.index() == color_index) {
            m |= 1 << i;
        }
    }
    m
}

pub fn shape_mask(grid: &GridSpec, shape_index: usize) -> Mask {
    let mut m = 0;
    for (i, c) in grid.cells.iter().enumerate() {
        if matches!(c, Some((s, _)) if s.index() == shape_index) {
            m |= 1 << i;
        }
    }
    m
}

/// Cells strictly above some child cell: shift child rows up.
pub fn above(m: Mask) -> Mask {
    ((m >> GRID_DIM) | (m >> (2 * GRID_DIM))) & MASK_ALL
}

pub fn below(m: Mask) -> Mask {
    ((m << GRID_DIM) | (m << (2 * GRID_DIM))) & MASK_ALL
}

/// Cells strictly left of some child cell: shift within rows, guarding the
/// row boundary with column masks.
pub fn left_of(m: Mask) -> Mask {
    ((m & !COL0) >> 1) | ((m & COL2) >> 2)
}

pub fn right_of(m: Mask) -> Mask {
    (((m & !COL2) << 1) | ((m & COL0) << 2)) & MASK_ALL
}

pub fn eval_mask(tree: &ProgramTree, grid: &GridSpec) -> Mask {
    match tree.token {
        lang::TOK_SCENE => scene_mask(grid),
        lang::TOK_AND => {
            eval_mask(&tree.children[0], grid) & eval_mask(&tree.children[1], grid)
        }
        lang::TOK_COLOR_RED..=lang::TOK_COLOR_BLUE => {
            let idx = (tree.token - lang::TOK_COLOR_RED) as usize;
            eval_mask(&tree.children[0], grid) & color_mask(grid, idx)
        }
        lang::TOK_SHAPE_CIRCLE..=lang::TOK_SHAPE_SQUARE => {
            let idx = (tree.token - lang::TOK_SHAPE_CIRCLE) as usize;
            eval_mask(&tree.children[0], grid) & shape_mask(grid, idx)
        }
        lang::TOK_ABOVE => above(eval_mask(&tree.children[0], grid)),
        lang::TOK_BELOW => below(eval_mask(&tree.children[0], grid)),
        lang::TOK_LEFT_OF => left_of(eval_mask(&tree.children[0], grid)),
        lang::TOK_RIGHT_OF => right_of(eval_mask(&tree.children[0], grid)),
        t => unreachable!("non-operator token {t} in parsed tree"),
    }
}

/// Execute a prefix-serialized program against a grid.
pub fn symbolic_execute(program: &[u8], grid: &GridSpec) -> Result<bool, ParseError> {
    let tree = parse_prefix(program)?;
    Ok(eval_mask(&tree, grid) != 0)
}

pub fn execute_tree(tree: &ProgramTree, grid: &GridSpec) -> bool {
    eval_mask(tree, grid) != 0
}

/// Whether any grid makes the program answer `want`. Ground-truth programs
/// relate at most two cells, so exhaustive search over all grids with one or
/// two occupied cells decides reachability for the whole language fragment we
/// generate. Used to spot structurally one-sided questions before balancing.
pub fn answer_reachable(tree: &ProgramTree, want: bool) -> bool {
    let mut grid = GridSpec::EMPTY;
    for pos in 0..GRID_CELLS {
        for v in 0..9usize {
            grid.cells = [None; GRID_CELLS];
            grid.cells[pos] = Some((SHAPES[v / 3], COLORS[v % 3]));
            if execute_tree(tree, &grid) == want {
                return true;
            }
            for pos2 in pos + 1..GRID_CELLS {
                for v2 in 0..9usize {
                    grid.cells[pos2] = Some((SHAPES[v2 / 3], COLORS[v2 % 3]));
                    if execute_tree(tree, &grid) == want {
                        return true;
                    }
                }
                grid.cells[pos2] = None;
            }
        }
    }
    false
}
