//! End-to-end synthetic run: synthesize, pretrain, train jointly, encode, evaluate.
//!
//! Extra arguments are `key=value` config overrides, e.g.
//! `cargo run --release --example synthetic_pipeline -- adversarial_weight=10`.

use std::time::Instant;

use advbin::config::ExperimentConfig;
use advbin::dataset::{generate_synthetic, split_query_gallery};
use advbin::retrieval::{evaluate_codes, evaluate_features};
use advbin::trainer::{encode_features, extract_features, pretrain, quantization_fraction, train_joint};

fn main() -> advbin::Result<()> {
    let mut cfg = ExperimentConfig::default();
    for arg in std::env::args().skip(1) {
        cfg.apply_str(&arg)?;
    }
    cfg.validate()?;
    let start = Instant::now();
    let ds = generate_synthetic(&cfg.synth)?;
    let split = split_query_gallery(&ds, &cfg.split, cfg.seed)?;
    let t = &cfg.train;
    let ext = t.new_extractor(ds.dim())?;
    let (ext, pre) = pretrain(&ext, &ds, t)?;
    if let (Some(a), Some(b)) = (pre.records.first(), pre.records.last()) {
        println!("pretrain ce {:.4} -> {:.4}, acc {:.3}", a.cross_entropy, b.cross_entropy, b.accuracy);
    }
    let (ext, _, report) = train_joint(&ext, &t.new_critic()?, &ds, t)?;
    let lambda = t.lambda()?;
    let z = extract_features(&ext, &ds)?;
    let codes = encode_features(&z, lambda)?;
    let labels = ds.labels();
    let bin = evaluate_codes(&codes, &labels, &split, cfg.eval.cmc_depth)?;
    let real = evaluate_features(&z, &labels, &split, cfg.eval.cmc_depth)?;
    let early = report.mean_critic_estimate(0.0, 0.1);
    let late = report.mean_critic_estimate(0.9, 1.0);
    println!("binary rank1 {:.4} map {:.4}", bin.rank1(), bin.map);
    println!("real   rank1 {:.4} map {:.4}", real.rank1(), real.map);
    println!("quantized fraction {:.4}", quantization_fraction(&z, lambda, 0.25));
    println!("bit balance {:?}", report.bit_balance);
    println!("critic estimate first 10% {early:.6} last 10% {late:.6}");
    let last = report.records.last().expect("records");
    println!("final triplet {:.4} gen {:.6} margin {}", last.triplet_loss, last.generator_objective, last.margin);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
