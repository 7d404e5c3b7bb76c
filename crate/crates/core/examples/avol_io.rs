//! Write a phantom to AVOL files, read them back and confirm the bytes
//! survive a second save.
//!
//! cargo run --example avol_io

use aniso_cascade::volume::{phantom_generate, read_avol, write_avol, Avol, PhantomParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (volume, labels) = phantom_generate(&PhantomParams::with_seed(5))?;
    let dir = std::env::temp_dir().join("aniso-avol-example");
    std::fs::create_dir_all(&dir)?;

    let vol_path = dir.join("volume.avol");
    let lab_path = dir.join("labels.avol");
    write_avol(&vol_path, &Avol::from(&volume))?;
    write_avol(&lab_path, &Avol::from(&labels))?;

    let back = read_avol(&vol_path)?;
    println!("header: {:?}", back.header);
    let restored = back.into_volume()?;
    assert_eq!(restored, volume);
    let labels_back = read_avol(&lab_path)?.into_labels()?;
    assert_eq!(labels_back, labels);

    let again = Avol::from(&restored).to_bytes();
    println!(
        "volume file {} bytes, labels file {} bytes, resave identical: {}",
        std::fs::metadata(&vol_path)?.len(),
        std::fs::metadata(&lab_path)?.len(),
        again == std::fs::read(&vol_path)?
    );

    let mut corrupt = std::fs::read(&vol_path)?;
    corrupt.truncate(corrupt.len() - 1);
    match Avol::from_bytes(&corrupt) {
        Err(e) => println!("truncated file rejected: {e}"),
        Ok(_) => unreachable!("a truncated payload must not parse"),
    }
    Ok(())
}
