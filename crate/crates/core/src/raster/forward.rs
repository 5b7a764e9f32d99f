use rayon::prelude::*;

use super::{composite_pixel, project_all, RenderOutput, Replay, ReplayKey, Splat, TILE_SIZE};
use crate::frame::Image;
use crate::geometry::{Intrinsics, Pose};
use crate::scene::GaussianScene;

/// Renders color, depth, and alpha of `scene` seen from `pose`.
pub fn render(scene: &GaussianScene, pose: &Pose, k: &Intrinsics) -> RenderOutput {
    let splats = project_all(scene, pose, k);
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let tiles = bin_tiles(&splats, tiles_x, tiles_y);

    let per_tile: Vec<TilePixels> = tiles
        .par_iter()
        .enumerate()
        .map(|(tid, list)| render_tile(&splats, list, tid % tiles_x, tid / tiles_x, k))
        .collect();

    let n = k.num_pixels();
    let mut color = Image::new(k.width, k.height);
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut final_t = vec![1.0; n];
    let mut last = vec![0u32; n];
    let mut n_contrib = vec![0u32; n];
    let mut n_clipped = vec![0u32; n];
    for (tid, tile) in per_tile.into_iter().enumerate() {
        let (tx, ty) = (tid % tiles_x, tid / tiles_x);
        for (p, (x, y)) in tile_pixels(tx, ty, k).enumerate() {
            let i = y * k.width + x;
            let r = &tile.pixels[p];
            color.data[i * 3..i * 3 + 3].copy_from_slice(&r.color);
            depth[i] = r.depth;
            alpha[i] = 1.0 - r.transmittance;
            final_t[i] = r.transmittance;
            last[i] = r.last;
            n_contrib[i] = r.n_contrib;
            n_clipped[i] = r.n_clipped;
        }
    }

    RenderOutput {
        color,
        depth,
        alpha,
        replay: Replay {
            key: ReplayKey::new(scene, pose, k),
            splats,
            tiles,
            tiles_x,
            tile_size: TILE_SIZE,
            final_t,
            last,
            n_contrib,
            n_clipped,
        },
    }
}

struct TilePixels {
    pixels: Vec<super::PixelResult>,
}

fn render_tile(splats: &[Splat], list: &[u32], tx: usize, ty: usize, k: &Intrinsics) -> TilePixels {
    let pixels = tile_pixels(tx, ty, k)
        .map(|(x, y)| composite_pixel(splats, list.iter().copied(), x as f64, y as f64))
        .collect();
    TilePixels { pixels }
}

/// Pixels of tile `(tx, ty)` in row-major order.
pub(crate) fn tile_pixels(tx: usize, ty: usize, k: &Intrinsics) -> impl Iterator<Item = (usize, usize)> {
    tile_pixels_sized(tx, ty, TILE_SIZE, k.width, k.height)
}

pub(crate) fn tile_pixels_sized(
    tx: usize,
    ty: usize,
    size: usize,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let x0 = tx * size;
    let y0 = ty * size;
    let x1 = (x0 + size).min(width);
    let y1 = (y0 + size).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Assigns each splat to every tile its 3σ rectangle overlaps, keeping the
/// global front-to-back order inside each tile.
fn bin_tiles(splats: &[Splat], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (sid, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.rect;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(sid as u32);
            }
        }
    }
    tiles
}
