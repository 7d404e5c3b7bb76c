//! Render the middle slice of a phantom along each axis with its label
//! overlay.
//!
//! cargo run --example render_overlay -- [out_dir]

use std::path::PathBuf;

use aniso_cascade::render::render_overlay;
use aniso_cascade::volume::{phantom_generate, PhantomParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("aniso-render-example"), PathBuf::from);
    std::fs::create_dir_all(&out)?;
    let (volume, labels) = phantom_generate(&PhantomParams::with_seed(3))?;
    // t1c shows the enhancing rim best
    let channel = 1;
    for (axis, name) in ["sagittal", "coronal", "axial"].iter().enumerate() {
        let index = volume.dims()[axis] / 2;
        let img = render_overlay(&volume, channel, Some(&labels), axis, index)?;
        let path = out.join(format!("{name}.png"));
        std::fs::write(&path, img.to_png()?)?;
        println!("{name}: {}x{} -> {}", img.width, img.height, path.display());
    }
    Ok(())
}
