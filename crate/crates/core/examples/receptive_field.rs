//! Receptive field of the three networks, layer by layer along the trunk.
//!
//! cargo run --example receptive_field

use aniso_cascade::net::{receptive_field, receptive_field_of, trunk_layers, NetKind, Network, NetworkConfig};

fn main() {
    for kind in NetKind::ALL {
        let config = NetworkConfig::canonical(kind, 32);
        let params = Network::<f32>::build(config.clone(), 0).expect("canonical config").param_count();
        let layers = trunk_layers(&config);
        println!("{kind}: {} trunk layers, {params} parameters at 32 channels", layers.len());
        for n in (4..layers.len()).step_by(4) {
            let [x, y, z] = receptive_field_of(&layers[..n]);
            println!("  after {n:>2} layers: {x} x {y} x {z}");
        }
        let [x, y, z] = receptive_field(&config);
        println!("  total: {x} x {y} x {z}");
    }
}
