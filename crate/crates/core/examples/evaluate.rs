//! Score a perturbed segmentation against ground truth and print the CSV
//! report with its summary block.
//!
//! cargo run --example evaluate

use aniso_cascade::metrics::report_csv;
use aniso_cascade::pipeline::{evaluate_labels, generate_cases};
use aniso_cascade::volume::{LabelMap, PhantomParams};

/// Shifts every label one voxel along x, a crude stand-in for a prediction.
fn shifted(labels: &LabelMap) -> LabelMap {
    let [nx, ny, nz] = labels.dims();
    let mut data = vec![0; nx * ny * nz];
    for x in 1..nx {
        for y in 0..ny {
            for z in 0..nz {
                data[(x * ny + y) * nz + z] = labels.get([x - 1, y, z]);
            }
        }
    }
    LabelMap::new(labels.dims(), data).expect("same domain")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rows = Vec::new();
    for case in generate_cases(&PhantomParams::default(), 40, 3)? {
        rows.extend(evaluate_labels(&case.id, &shifted(&case.labels), &case.labels, case.volume.spacing())?);
    }
    print!("{}", report_csv(&rows)?);
    Ok(())
}
