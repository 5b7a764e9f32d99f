use super::{composite_pixel, project_splat, RenderOutput, Replay, ReplayKey, Splat};
use crate::frame::Image;
use crate::geometry::{Intrinsics, Pose};
use crate::scene::GaussianScene;

/// Brute-force renderer: every splat is tested at every pixel after one
/// global depth sort. No tiling and no rectangle culling.
///
/// Its output also carries replay data (a single image-sized tile), so the
/// backward pass accepts it as well.
pub fn render_reference(scene: &GaussianScene, pose: &Pose, k: &Intrinsics) -> RenderOutput {
    let rot = pose.rotation_matrix();
    let mut splats: Vec<Splat> = (0..scene.len())
        .filter_map(|i| project_splat(scene, i, &rot, pose, k))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let order: Vec<u32> = (0..splats.len() as u32).collect();

    let n = k.num_pixels();
    let mut color = Image::new(k.width, k.height);
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut final_t = vec![1.0; n];
    let mut last = vec![0u32; n];
    let mut n_contrib = vec![0u32; n];
    let mut n_clipped = vec![0u32; n];
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let r = composite_pixel(&splats, order.iter().copied(), x as f64, y as f64);
            color.data[i * 3..i * 3 + 3].copy_from_slice(&r.color);
            depth[i] = r.depth;
            alpha[i] = 1.0 - r.transmittance;
            final_t[i] = r.transmittance;
            last[i] = r.last;
            n_contrib[i] = r.n_contrib;
            n_clipped[i] = r.n_clipped;
        }
    }
    let tile_size = k.width.max(k.height);
    RenderOutput {
        color,
        depth,
        alpha,
        replay: Replay {
            key: ReplayKey::new(scene, pose, k),
            splats,
            tiles: vec![order],
            tiles_x: 1,
            tile_size,
            final_t,
            last,
            n_contrib,
            n_clipped,
        },
    }
}
