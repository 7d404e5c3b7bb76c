//! Full desk-scale run: 20 training and 5 test phantoms, nine networks,
//! cascade inference with and without multi-view fusion.
//!
//! cargo run --release --example desk_experiment -- [iterations] [base_channels]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;

use aniso_cascade::cascade::ViewId;
use aniso_cascade::cascade::{run_cascade, CascadeParams};
use aniso_cascade::net::NetKind;
use aniso_cascade::pipeline::{evaluate_labels, generate_cases, mean_dice, models_from_checkpoints, train_all};
use aniso_cascade::train::{Dataset, TrainConfig};
use aniso_cascade::volume::{normalize, PhantomParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(2000), |s| s.parse())?;
    let base_channels: usize = args.next().map_or(Ok(8), |s| s.parse())?;
    let start = Instant::now();

    let phantom = PhantomParams::default();
    let train_set = Dataset::normalized(generate_cases(&phantom, 0, 20)?)?;
    let norm = train_set.norm.clone().expect("normalized dataset");
    let test = generate_cases(&phantom, 1000, 5)?;

    let template = TrainConfig { iterations, base_channels, seed: 7, ..TrainConfig::new(NetKind::WNet, ViewId::Axial) };
    let outcomes = train_all(&template, &train_set, 1, &|k, v, r| {
        if r.iteration % 500 == 0 {
            eprintln!("{k}/{v} iteration {} loss {:.4}", r.iteration, r.loss);
        }
    })?;
    let train_secs = start.elapsed().as_secs_f64();
    let models = models_from_checkpoints(
        outcomes.into_iter().map(|(k, v, o)| (k, v, o.checkpoint)).collect(),
        [[1.0 / 3.0; 3]; 3],
    )?;
    let axial = models.with_fusion([[1.0, 0.0, 0.0]; 3])?;
    let params = CascadeParams::default();
    let (mut fused_rows, mut axial_rows) = (Vec::new(), Vec::new());
    for case in &test {
        let volume = normalize(case.volume.clone(), &norm)?;
        let spacing = volume.spacing();
        fused_rows.extend(evaluate_labels(&case.id, &run_cascade(&models, &volume, &params)?, &case.labels, spacing)?);
        axial_rows.extend(evaluate_labels(&case.id, &run_cascade(&axial, &volume, &params)?, &case.labels, spacing)?);
    }
    let [fw, ft, fe] = mean_dice(&fused_rows);
    let [aw, at, ae] = mean_dice(&axial_rows);
    println!("training {:.0} s, total {:.0} s", train_secs, start.elapsed().as_secs_f64());
    println!("fused Dice  WT {fw:.4} TC {ft:.4} EN {fe:.4}");
    println!("axial Dice  WT {aw:.4} TC {at:.4} EN {ae:.4}");
    Ok(())
}
