//! Trains every mode on a synthetic corpus and prints MAP per task.
//!
//! `cargo run --release --example desk_experiment -- [sigma] [seed] [epochs] [modes] [min_separation]`

use std::time::Instant;

use xmash::adversarial::{net_seeds, train, Mode, TrainConfig};
use xmash::dataio::{generate_synthetic, Split, SyntheticConfig};
use xmash::eval::{evaluate_task, knn_classifier_accuracy};
use xmash::graph::build_knn_graph;
use xmash::net::{HashNet, NetDims};
use xmash::Direction;

fn main() -> xmash::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let sigma: f64 = arg(0, "1.6").parse().expect("sigma");
    let seed: u64 = arg(1, "0").parse().expect("seed");
    let epochs: usize = arg(2, "30").parse().expect("epochs");
    let modes: Vec<Mode> = arg(3, "baseline,baseline-gan,ugach")
        .split(',')
        .map(|m| m.parse().expect("mode"))
        .collect();
    let min_separation: f64 = arg(4, "0").parse().expect("min_separation");

    let data = generate_synthetic(&SyntheticConfig { noise_sigma: sigma, min_separation, seed, ..Default::default() })?;
    let labels = data.labels().expect("synthetic data is labeled");
    println!(
        "sigma {sigma}: 5-NN accuracy image {:.3} text {:.3}",
        knn_classifier_accuracy(data.image(), labels, 5)?,
        knn_classifier_accuracy(data.text(), labels, 5)?
    );

    let split = Split::random(data.len(), 0.05, seed)?;
    let db = data.subset(&split.db)?;
    let base = TrainConfig { bits: 16, dim_common: 128, epochs, seed, ..Default::default() };
    let gi = build_knn_graph(db.image(), base.graph_k, base.graph_metric)?;
    let gt = build_knn_graph(db.text(), base.graph_k, base.graph_metric)?;

    let maps = |net: &HashNet| -> xmash::Result<Vec<f64>> {
        Direction::BOTH
            .iter()
            .map(|&d| Ok(evaluate_task(net, &data, &split, d, &[])?.map))
            .collect()
    };
    let dims = NetDims { dim_image: 64, dim_text: 32, dim_common: 128, bits: 16 };
    println!("{:>13} {:.4?}", "untrained", maps(&HashNet::init(dims, net_seeds(seed).0)?)?);
    for mode in modes {
        let start = Instant::now();
        let out = train(&data, &split, (&gi, &gt), &TrainConfig { mode, ..base.clone() })?;
        println!("{mode:>13} {:.4?} in {:.1?}", maps(&out.disc)?, start.elapsed());
    }
    Ok(())
}
