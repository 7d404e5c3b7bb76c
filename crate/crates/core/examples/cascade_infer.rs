//! Train the nine networks briefly and segment a held-out phantom with the
//! full cascade, printing what each stage contributed.
//!
//! cargo run --release --example cascade_infer -- [iterations]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use aniso_cascade::cascade::{bbox_of_mask, run_cascade_detailed, CascadeParams, ViewId, DEFAULT_MARGIN};
use aniso_cascade::net::NetKind;
use aniso_cascade::pipeline::{evaluate_labels, generate_cases, models_from_checkpoints, train_all};
use aniso_cascade::train::{Dataset, TrainConfig};
use aniso_cascade::volume::{normalize, PhantomParams, RegionId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let phantom = PhantomParams::default();
    let dataset = Dataset::normalized(generate_cases(&phantom, 0, 6)?)?;
    let template = TrainConfig { iterations, base_channels: 8, ..TrainConfig::new(NetKind::WNet, ViewId::Axial) };
    let outcomes = train_all(&template, &dataset, 1, &|k, v, r| {
        if r.iteration == iterations {
            println!("{k}/{v}: final loss {:.4}", r.loss);
        }
    })?;
    let models = models_from_checkpoints(
        outcomes.into_iter().map(|(k, v, o)| (k, v, o.checkpoint)).collect(),
        [[1.0 / 3.0; 3]; 3],
    )?;

    let case = &generate_cases(&phantom, 900, 1)?[0];
    let volume = normalize(case.volume.clone(), dataset.norm.as_ref().expect("normalized"))?;
    let out = run_cascade_detailed(&models, &volume, &CascadeParams::default())?;
    for (kind, region) in NetKind::ALL.into_iter().zip(RegionId::ALL) {
        let mask = out.labels.binarize(region);
        let bbox = bbox_of_mask(&mask, DEFAULT_MARGIN).map_or("none".to_string(), |b| b.to_string());
        println!(
            "{kind}: ran {}, {region} {} voxels, next crop {bbox}",
            out.probabilities[kind as usize].is_some(),
            mask.count()
        );
    }
    for row in evaluate_labels(&case.id, &out.labels, &case.labels, volume.spacing())? {
        println!("{} Dice {:.4} Hausdorff {:?}", row.region, row.dice, row.hausdorff_mm);
    }
    Ok(())
}
