//! Runs the DGConv vs plain-conv robustness comparison and prints one row per
//! model and seed.
//!
//! Usage: `cargo run --release --example robustness -- [seeds] [config.toml] [first_seed]`

use std::time::Instant;

use dgfn_core::experiments::{robustness_run, RobustnessConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let cfg: RobustnessConfig = match args.next() {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
        None => RobustnessConfig::default(),
    };
    let first: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    println!("seed,model,params,clean_auc,deform_auc,clean_acc,noisy_acc,seconds");
    let (mut gap, mut drop) = (0.0, 0.0);
    for seed in first..first + seeds {
        let t = Instant::now();
        let r = robustness_run(&cfg, seed)?;
        let secs = t.elapsed().as_secs_f64();
        for (name, m) in [("dgconv", &r.dgconv), ("plain", &r.plain)] {
            println!(
                "{seed},{name},{},{:.4},{:.4},{:.4},{:.4},{secs:.1}",
                m.params, m.clean_auc, m.deform_auc, m.clean_accuracy, m.noisy_accuracy
            );
        }
        gap += r.dgconv.deform_auc - r.plain.deform_auc;
        drop += r.plain.noise_drop() - r.dgconv.noise_drop();
    }
    let n = seeds as f64;
    println!(
        "mean deform AUC gap {:.4}, mean noise-drop advantage {:.4}",
        gap / n,
        drop / n
    );
    Ok(())
}
