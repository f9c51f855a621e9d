//! Procedural renderer: 30x30 RGB rasters, channel-major planes, one 10x10
//! cell per grid slot with a 1-pixel margin. Shapes are filled in pure RGB on
//! a black background.

use super::grid::{Color, GridSpec, Shape, GRID_DIM};

pub const CELL_PX: usize = 10;
pub const IMG_SIDE: usize = GRID_DIM * CELL_PX;
pub const CHANNELS: usize = 3;
pub const IMG_BYTES: usize = CHANNELS * IMG_SIDE * IMG_SIDE;

/// Channel-major raw image: plane 0 red, 1 green, 2 blue; within a plane,
/// row-major pixels, row 0 at the top.
pub type ImageRaster = Vec<u8>;

fn rgb(color: Color) -> [u8; 3] {
    match color {
        Color::Red => [255, 0, 0],
        Color::Green => [0, 255, 0],
        Color::Blue => [0, 0, 255],
    }
}

/// Whether local pixel (px, py) of a 10x10 cell is inside the shape. Both
/// coordinates index pixels; tests are on pixel centers. All shapes respect
/// the 1-pixel margin, so the drawable interior is [1, 9) x [1, 9).
fn inside(shape: Shape, px: usize, py: usize) -> bool {
    if !(1..CELL_PX - 1).contains(&px) || !(1..CELL_PX - 1).contains(&py) {
        return false;
    }
    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    match shape {
        Shape::Square => true,
        // Radius test around the interior center.
        Shape::Circle => {
            let (dx, dy) = (x - 5.0, y - 5.0);
            dx * dx + dy * dy <= 16.0
        }
        // Upward triangle: two half-planes through the apex widening toward
        // the base at the bottom of the interior.
        Shape::Triangle => {
            let half_width = y / 2.0;
            (x - 5.0) <= half_width && (5.0 - x) <= half_width
        }
    }
}

pub fn render(grid: &GridSpec) -> ImageRaster {
    let mut img = vec![0u8; IMG_BYTES];
    let plane = IMG_SIDE * IMG_SIDE;
    for row in 0..GRID_DIM {
        for col in 0..GRID_DIM {
            let Some((shape, color)) = grid.cell(row, col) else { continue };
            let rgb = rgb(color);
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    if inside(shape, px, py) {
                        let y = row * CELL_PX + py;
                        let x = col * CELL_PX + px;
                        for (ch, &val) in rgb.iter().enumerate() {
                            img[ch * plane + y * IMG_SIDE + x] = val;
                        }
                    }
                }
            }
        }
    }
    img
}

/// Per-channel standardization statistics computed over the Train split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl ChannelStats {
    /// Population mean/std of pixel intensities (u8 scaled to [0, 1]).
    pub fn compute<'a>(images: impl Iterator<Item = &'a [u8]>) -> ChannelStats {
        let plane = IMG_SIDE * IMG_SIDE;
        let mut sum = [0f64; CHANNELS];
        let mut sum_sq = [0f64; CHANNELS];
        let mut count = 0usize;
        for img in images {
            assert_eq!(img.len(), IMG_BYTES);
            for ch in 0..CHANNELS {
                for &b in &img[ch * plane..(ch + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
            count += 1;
        }
        assert!(count > 0, "standardization stats need at least one image");
        let n = (count * plane) as f64;
        let mut mean = [0f32; CHANNELS];
        let mut std = [0f32; CHANNELS];
        for ch in 0..CHANNELS {
            let m = sum[ch] / n;
            mean[ch] = m as f32;
            let var = (sum_sq[ch] / n - m * m).max(0.0);
            std[ch] = var.sqrt() as f32;
        }
        ChannelStats { mean, std }
    }

    pub fn std_clamped(&self, ch: usize) -> f32 {
        // Degenerate channels (constant pixels) divide by 1e-6 instead of 0.
        self.std[ch].max(1e-6)
    }
}

/// (x - mean) / std per channel into an f32 buffer of the same layout.
pub fn standardize_into(image: &[u8], stats: &ChannelStats, out: &mut [f32]) {
    assert_eq!(image.len(), IMG_BYTES);
    assert_eq!(out.len(), IMG_BYTES);
    let plane = IMG_SIDE * IMG_SIDE;
    for ch in 0..CHANNELS {
        let mean = stats.mean[ch];
        let inv = 1.0 / stats.std_clamped(ch);
        for (o, &b) in out[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(&image[ch * plane..(ch + 1) * plane])
        {
            *o = (b as f32 / 255.0 - mean) * inv;
        }
    }
}

pub fn standardize(image: &[u8], stats: &ChannelStats) -> Vec<f32> {
    let mut out = vec![0f32; IMG_BYTES];
    standardize_into(image, stats, &mut out);
    out
}
