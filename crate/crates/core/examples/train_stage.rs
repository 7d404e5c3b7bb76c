//! Train one (stage, view) network on a few phantoms, save the checkpoint
//! and loss log, and reload it.
//!
//! cargo run --release --example train_stage -- [stage] [view] [iterations]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use aniso_cascade::cascade::ViewId;
use aniso_cascade::net::NetKind;
use aniso_cascade::pipeline::generate_cases;
use aniso_cascade::train::{load_checkpoint, loss_log_csv, save_checkpoint, train, Dataset, TrainConfig};
use aniso_cascade::volume::PhantomParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let stage: NetKind = args.next().map_or(Ok(NetKind::TNet), |s| s.parse())?;
    let view: ViewId = args.next().map_or(Ok(ViewId::Axial), |s| s.parse())?;
    let iterations: usize = args.next().map_or(Ok(200), |s| s.parse())?;

    let dataset = Dataset::normalized(generate_cases(&PhantomParams::default(), 0, 4)?)?;
    let config = TrainConfig { iterations, base_channels: 8, seed: 1, ..TrainConfig::new(stage, view) };
    print!("{}", config.to_text());
    let outcome = train(&config, &dataset, |r| {
        if r.iteration % 50 == 0 {
            println!("iteration {:>5}  loss {:.4}  {:.1} s", r.iteration, r.loss, r.wall_ms / 1e3);
        }
    })?;

    let dir = std::env::temp_dir().join("aniso-train-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{stage}_{view}.ackp"));
    save_checkpoint(&outcome.checkpoint, &path)?;
    std::fs::write(dir.join("loss.csv"), loss_log_csv(&outcome.log))?;
    let back = load_checkpoint(&path)?;
    println!(
        "saved {} ({} parameters, normalized: {}, rejected steps: {})",
        path.display(),
        back.network.param_count(),
        back.is_normalized(),
        outcome.rejected_steps
    );
    Ok(())
}
