//! Generate one phantom, print its tissue statistics and write it as a case
//! directory.
//!
//! cargo run --example phantom -- [seed] [out_dir]

use std::path::PathBuf;

use aniso_cascade::pipeline::write_case;
use aniso_cascade::volume::{phantom_generate, PhantomParams, RegionId, MODALITIES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let out = args.next().map(PathBuf::from);

    let params = PhantomParams::with_seed(seed);
    let (volume, labels) = phantom_generate(&params)?;
    let voxels = volume.voxels() as f64;
    println!("extents {:?}, seed {seed}", volume.dims());
    for r in RegionId::ALL {
        let n = labels.binarize(r).count();
        println!("{r}: {n} voxels ({:.2}%)", 100.0 * n as f64 / voxels);
    }
    println!("nested: {}", labels.is_nested());
    for (c, name) in MODALITIES.iter().enumerate() {
        let ch = volume.channel(c);
        let brain: Vec<f32> = ch.iter().copied().filter(|&v| v != 0.0).collect();
        let mean = brain.iter().sum::<f32>() / brain.len() as f32;
        println!("{name}: mean intensity over the brain {mean:.3}");
    }
    if let Some(dir) = out {
        write_case(&dir, &volume, Some(&labels))?;
        println!("written to {}", dir.display());
    }
    Ok(())
}
