//! Files: images, masks, checkpoints and the dataset cache.

pub mod checkpoint;
pub mod pnm;

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::harness::scene::{held_out_seed, render_scene};

/// Writes the first `count` held-out scenes as `scene_<seed>.ppm` with a
/// `scene_<seed>.txt` caption beside each.
pub fn write_dataset_cache(dir: &Path, count: usize, size: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for k in 0..count as u64 {
        let scene = render_scene(held_out_seed(k), size);
        let stem = format!("scene_{:05}", scene.seed);
        pnm::write_ppm(&dir.join(format!("{stem}.ppm")), &scene.image)?;
        fs::write(dir.join(format!("{stem}.txt")), format!("{}\n", scene.caption))?;
    }
    Ok(())
}
