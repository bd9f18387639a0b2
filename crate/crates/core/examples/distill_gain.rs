//! Paired-seed comparison of point-only training against training with the
//! image branch and distillation, on the synthetic colour-cue task.
//!
//! `cargo run --release -p lidarpass --example distill_gain -- [seeds] [epochs] [lr]`

use std::time::Instant;

use lidarpass::config::{RunConfig, TrainMode};
use lidarpass::dataio::SynthConfig;
use lidarpass::pipeline::{load_scenes, split_validation, train};

fn main() -> lidarpass::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let verbose = std::env::var_os("VERBOSE").is_some();
    let base = RunConfig {
        scales: 2,
        hidden_dim: 64,
        base_voxel_size: 0.1,
        crop_width: 48,
        crop_height: 32,
        epochs,
        batch_size: 1,
        learning_rate: lr,
        momentum: 0.9,
        synthetic_scenes: 50,
        val_scenes: 10,
        synthetic: SynthConfig {
            num_points: 5000,
            num_classes: 3,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    let mut gains = Vec::new();
    for seed in 0..seeds {
        let cfg = RunConfig { seed, synthetic: SynthConfig { seed: 1000 * seed, ..base.synthetic.clone() }, ..base.clone() };
        let (tr, va) = split_validation(load_scenes(&cfg)?, cfg.val_scenes)?;
        let mut res = Vec::new();
        for mode in [TrainMode::Baseline, TrainMode::TwoDPass] {
            let t = Instant::now();
            let out = train(&cfg, mode, &tr, &va, &mut |l| {
                if verbose && l.step % 10 == 0 {
                    println!("  {}", serde_json::to_string(l).unwrap());
                }
                Ok(())
            })?;
            let miou = out.validation.as_ref().map_or(f64::NAN, |r| r.miou);
            println!("seed {seed} {mode:<8} val mIoU {:.4}  train seg3d {:.4}  {:.1}s", miou, out.final_seg3d, t.elapsed().as_secs_f64());
            res.push(miou);
        }
        gains.push(100.0 * (res[1] - res[0]));
    }
    let wins = gains.iter().filter(|&&g| g > 0.0).count();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    println!("gains {gains:.2?}  wins {wins}/{}  mean {mean:.2} points", gains.len());
    Ok(())
}
