//! Grid specifications: a 3x3 arrangement of optionally-empty colored shapes.

use rand::Rng;

pub const GRID_DIM: usize = 3;
pub const GRID_CELLS: usize = GRID_DIM * GRID_DIM;

/// Default cell-empty probability; chosen so every two-sided question can
/// realize both answers with workable frequency.
pub const P_EMPTY: f32 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Triangle,
    Square,
}

pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Triangle, Shape::Square];

impl Color {
    pub fn index(self) -> usize {
        match self {
            Color::Red => 0,
            Color::Green => 1,
            Color::Blue => 2,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

impl Shape {
    pub fn index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Triangle => 1,
            Shape::Square => 2,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
        }
    }
}

/// One cell: empty or a (shape, color) pair.
pub type Cell = Option<(Shape, Color)>;

/// Row-major 3x3 grid, row 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub cells: [Cell; GRID_CELLS],
}

impl GridSpec {
    pub const EMPTY: GridSpec = GridSpec { cells: [None; GRID_CELLS] };

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * GRID_DIM + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cell: Cell) {
        self.cells[row * GRID_DIM + col] = cell;
    }

    pub fn non_empty(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Byte encoding used by the dataset file: 0 = empty, else
    /// 1 + shape_index * 3 + color_index (1..=9).
    pub fn to_bytes(&self) -> [u8; GRID_CELLS] {
        let mut out = [0u8; GRID_CELLS];
        for (b, c) in out.iter_mut().zip(self.cells.iter()) {
            *b = match c {
                None => 0,
                Some((s, k)) => 1 + (s.index() * 3 + k.index()) as u8,
            };
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; GRID_CELLS]) -> Option<GridSpec> {
        let mut g = GridSpec::EMPTY;
        for (i, &b) in bytes.iter().enumerate() {
            g.cells[i] = match b {
                0 => None,
                1..=9 => {
                    let v = (b - 1) as usize;
                    Some((SHAPES[v / 3], COLORS[v % 3]))
                }
                _ => return None,
            };
        }
        Some(g)
    }
}

/// Sample a grid: each cell independently empty with probability `p_empty`,
/// otherwise uniform over the 9 shape-color pairs; all-empty grids are
/// resampled. `p_empty` must leave a non-empty grid reachable.
pub fn sample_grid<R: Rng>(rng: &mut R, p_empty: f32) -> GridSpec {
    assert!(
        (0.0..1.0).contains(&p_empty),
        "p_empty must be in [0, 1): all-empty grids are resampled"
    );
    // At p_empty < 1 an all-empty draw has probability p^9; the cap only
    // guards against RNG misuse.
    for _ in 0..100_000 {
        let mut g = GridSpec::EMPTY;
        for cell in g.cells.iter_mut() {
            if rng.gen::<f32>() >= p_empty {
                let v = rng.gen_range(0..9usize);
                *cell = Some((SHAPES[v / 3], COLORS[v % 3]));
            }
        }
        if g.non_empty() > 0 {
            return g;
        }
    }
    unreachable!("grid resampling failed 100000 times; p_empty = {p_empty}");
}
