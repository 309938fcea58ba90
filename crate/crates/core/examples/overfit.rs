//! Overfits a small model to two phantoms and reports training-set PSNR.
//!
//! `cargo run --release --example overfit -- [steps] [key=value ...]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlrm_core::geometry::ScannerGeometry;
use xlrm_core::model::ModelConfig;
use xlrm_core::phantom::{rasterize_phantom, PhantomSpec};
use xlrm_core::projector::NoiseModel;
use xlrm_core::trainer::{training_psnr, TrainConfig, TrainSample, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut mc = ModelConfig::desk();
    let mut tc = TrainConfig::desk();
    tc.total_steps = steps.max(tc.warmup_iters + 1);
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("expected key=value")?;
        match k {
            "enc_width" => mc.encoder.width = v.parse()?,
            "enc_layers" => mc.encoder.layers = v.parse()?,
            "enc_heads" => mc.encoder.heads = v.parse()?,
            "dec_width" => mc.decoder.width = v.parse()?,
            "dec_layers" => mc.decoder.layers = v.parse()?,
            "dec_heads" => mc.decoder.heads = v.parse()?,
            "token_grid" => mc.decoder.token_grid = v.parse()?,
            "plane_channels" => mc.decoder.plane_channels = v.parse()?,
            "inf_hidden" => mc.decoder.inf_hidden = v.parse()?,
            "residual" => {
                mc.encoder.residual = v.parse()?;
                mc.decoder.residual = v.parse()?;
            }
            "lr" => tc.lr_init = v.parse()?,
            "warmup" => tc.warmup_iters = v.parse()?,
            "points" => tc.points_per_step = v.parse()?,
            "wd" => tc.weight_decay = v.parse()?,
            _ => return Err(format!("unknown key {k}").into()),
        }
    }
    let geom = ScannerGeometry::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<TrainSample> = (0..2)
        .map(|i| {
            let vol = rasterize_phantom(&PhantomSpec::random(&mut rng), 32).unwrap();
            let nm = NoiseModel { seed: 100 + i, ..NoiseModel::default() };
            TrainSample::render(vol, &geom, Some(&nm), &tc.view_counts).unwrap()
        })
        .collect();
    let mut tr = Trainer::new(&mc, tc.clone())?;
    println!("params {}", xlrm_core::nn::Params::param_count(&tr.model));
    let t0 = Instant::now();
    while tr.step() < steps {
        let s = tr.train_step(&data)?;
        if s.step % 10 == 0 {
            println!("{} lr {:.2e} loss {:.3e} psnr {:.2} |g| {:.3} ({:.2}s/step)", s.step, s.lr, s.loss, s.psnr_train, s.grad_norm, t0.elapsed().as_secs_f64() / s.step as f64);
        }
    }
    let p = training_psnr(&tr.model, &data, &tc.view_counts)?;
    println!("train psnr {p:.2?} total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
