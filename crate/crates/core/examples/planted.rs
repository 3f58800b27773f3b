//! Train on the planted dataset and report localization quality.
//!
//! cargo run --release -p avloc-core --example planted -- [epochs] [lambda_acl_i] [lambda_acl_f] [lambda_reg]

use avloc_core::encoders::{Backends, ToyConfig};
use avloc_core::evaluation::sample_iou;
use avloc_core::inference::{InferenceConfig, Localizer};
use avloc_core::synth::{planted_pairs, prepare_planted, PlantedConfig};
use avloc_core::training::{train, TrainConfig};

fn main() -> avloc_core::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let arg = |k: usize, d: f64| args.get(k).copied().unwrap_or(d);

    let toy = ToyConfig::default();
    let planted = PlantedConfig::default();
    let backends = Backends::toy(&toy, planted.image_size, planted.sample_rate)?;
    let pairs = planted_pairs(&planted, &toy)?;
    let samples = prepare_planted(&pairs, &planted, &backends)?;

    let mut cfg = TrainConfig {
        epochs: arg(0, 20.0) as usize,
        ..TrainConfig::default()
    };
    cfg.loss.lambda_acl_i = arg(1, 1.0);
    cfg.loss.lambda_acl_f = arg(2, 1.0);
    cfg.loss.lambda_reg = arg(3, 1.0);

    let start = std::time::Instant::now();
    let ck = train(cfg, &backends, &samples, None, &mut |r| {
        println!(
            "epoch {:2} step {:3} loss {:8.4} acl_i {:.4} acl_f {:.4} reg {:8.4} area {:.3}",
            r.epoch, r.step, r.loss, r.acl_i, r.acl_f, r.reg, r.mask_area_pos_mean
        );
        Ok(())
    })?;
    println!(
        "trained in {:.1?}; w={:.4} b={:.4}",
        start.elapsed(),
        ck.params.w,
        ck.params.b
    );

    let loc = Localizer::from_checkpoint(&ck, &backends, InferenceConfig::default())?;
    let mut per_class = vec![0usize; planted.classes];
    let mut area = 0.0;
    for (p, s) in pairs.iter().zip(&samples) {
        let map = loc.localize_prepared(s)?;
        if sample_iou(&map.binary, &p.region)? >= 0.5 {
            per_class[p.class] += 1;
        }
        area += map.binary.iter().filter(|v| **v).count() as f64 / map.binary.len() as f64;
    }
    let hits: usize = per_class.iter().sum();
    println!(
        "IoU >= 0.5: {hits}/{} (per class {per_class:?}); mean binary area {:.3}",
        pairs.len(),
        area / pairs.len() as f64
    );
    Ok(())
}
