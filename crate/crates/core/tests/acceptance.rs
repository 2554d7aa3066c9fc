//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs with `cargo test --test acceptance`.

use std::time::{Duration, Instant};

use irunet_core::data::{corrupt, Dataset, NoiseSpec, RgbImage, Sample};
use irunet_core::layers::{ConvSpec, Padding};
use irunet_core::metrics::{evaluate, mae, psnr, ssim, MetricDomain};
use irunet_core::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use irunet_core::model::{param_count, Irunet, ModelConfig, REFERENCE_PARAM_COUNT};
use irunet_core::parallel;
use irunet_core::rng::SplitMix64;
use irunet_core::train::{gradcheck, train, GradcheckOptions, GradcheckTarget, TrainConfig, Trainer};
use irunet_core::{Tape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_layer: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    let mut failures = Vec::new();
    for target in GradcheckTarget::ALL {
        for e in gradcheck(target, &GradcheckOptions::default()).expect("gradcheck runs") {
            if target == GradcheckTarget::TinyModel {
                worst_model = worst_model.max(e.max_rel_error);
            } else {
                worst_layer = worst_layer.max(e.max_rel_error);
            }
            if !e.passed {
                failures.push(e.to_string());
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "max rel err layers/blocks {worst_layer:.2e} (<1e-6), tiny model {worst_model:.2e} (<1e-4), {:.1}s (<120s)",
        elapsed.as_secs_f64()
    );
    for f in failures {
        detail.push_str(&format!("\n      {f}"));
    }
    outcome(passed, detail)
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.next_gaussian())
}

fn apply(spec: &ConvSpec, x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let geom = spec.geometry(x.shape()).unwrap();
    let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
    let y = if spec.transposed {
        tape.conv_transpose2d(xv, wv, None, geom)
    } else {
        tape.conv2d(xv, wv, None, geom)
    };
    tape.value(y.unwrap()).clone()
}

fn criterion_2() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 100 {
        let k = 1 + rng.below(3) as usize;
        let (ci, co) = (1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let (s, d) = (1 + rng.below(2) as usize, 1 + rng.below(2) as usize);
        let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
        let (h, w) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        let fwd = ConvSpec::new(ci, co, k).with_stride(s).with_dilation(d).with_padding(padding);
        let back = ConvSpec::new(co, ci, k)
            .with_stride(s)
            .with_dilation(d)
            .with_padding(padding)
            .into_transposed();
        let Ok(geom) = fwd.geometry(&[1, ci, h, w]) else { continue };
        if back.output_size(geom.out_size).ok() != Some((h, w)) {
            continue;
        }
        let x = random(&[1, ci, h, w], &mut rng);
        let y = random(&[1, co, geom.out_size.0, geom.out_size.1], &mut rng);
        let weight = random(&fwd.weight_shape(), &mut rng);
        let lhs = apply(&fwd, &x, &weight).dot(&y).unwrap();
        let rhs = x.dot(&apply(&back, &y, &weight)).unwrap();
        worst = worst.max((lhs - rhs).abs());
        trials += 1;
    }
    outcome(worst <= 1e-10, format!("100 trials, max |<conv x, y> - <x, tconv y>| = {worst:.2e} (<=1e-10)"))
}

fn criterion_3() -> Outcome {
    let model = Irunet::<f32>::new(ModelConfig::default(), 3).unwrap();
    let mut rng = SplitMix64::new(3);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_fn(vec![1, 3, 96, 96], |_| rng.next_f64() as f32));
    let pass = model.forward(&mut tape, x).unwrap();
    let out = tape.value(pass.output);
    let latent = tape.value(pass.latent).shape().to_vec();
    let in_range = out.data().iter().all(|&v| v > 0.0 && v < 1.0);
    let passed = out.shape() == [1, 3, 96, 96] && latent[2..] == [6, 6] && in_range;
    outcome(
        passed,
        format!("output {:?}, latent {:?}, all outputs in (0,1): {in_range}", out.shape(), latent),
    )
}

const GOLDEN_PARAM_COUNT: usize = 123_627;

fn criterion_4() -> Outcome {
    let config = ModelConfig::default();
    let n = param_count(&config);
    let again = Irunet::<f32>::new(config, 0).unwrap().params().param_count();
    let passed = n <= 150_000 && n == GOLDEN_PARAM_COUNT && n == again;
    outcome(
        passed,
        format!("default config total {n} (golden {GOLDEN_PARAM_COUNT}, <=150000; reference network {REFERENCE_PARAM_COUNT})"),
    )
}

fn criterion_5() -> Outcome {
    let gray = RgbImage::filled(96, 96, [128, 128, 128]);
    let spec = NoiseSpec::new(25.0, 5).unwrap();
    let noisy = corrupt(&gray, &spec);
    let d: Vec<f64> = noisy.pixels().iter().map(|&p| f64::from(p) - 128.0).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let zero_ok = corrupt(&gray, &NoiseSpec::new(0.0, 5).unwrap()).pixels() == gray.pixels();
    let repeat_ok = corrupt(&gray, &spec).pixels() == noisy.pixels();
    let passed = (-0.5..=0.5).contains(&mean) && (24.5..=25.5).contains(&std) && zero_ok && repeat_ok;
    outcome(
        passed,
        format!("mean {mean:.3} in [-0.5,0.5], std {std:.3} in [24.5,25.5], sigma 0 identical: {zero_ok}, regeneration identical: {repeat_ok}"),
    )
}

fn criterion_6() -> Outcome {
    let a = RgbImage::filled(32, 32, [90, 90, 90]);
    let b = RgbImage::filled(32, 32, [91, 91, 91]);
    let p = psnr(&a, &b).unwrap();
    let mut rng = SplitMix64::new(6);
    let mut img = || RgbImage::new(32, 32, (0..32 * 32 * 3).map(|_| rng.below(256) as u8).collect()).unwrap();
    let (x, y) = (img(), img());
    let self_sim = ssim(&x, &x).unwrap();
    let asym = (ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs();
    let passed = (p - 48.1308).abs() <= 5e-4 && (self_sim - 1.0).abs() <= 1e-9 && asym <= 1e-12;
    outcome(
        passed,
        format!("PSNR(diff 1) {p:.4} dB (48.1308±0.0005), SSIM(a,a) {self_sim:.12}, |SSIM(a,b)-SSIM(b,a)| {asym:.1e}"),
    )
}

/// Eight smooth colour-gradient images, 32×32.
fn smoke_images() -> Vec<RgbImage> {
    let mut rng = SplitMix64::new(7);
    (0..8)
        .map(|_| {
            let base: Vec<f64> = (0..3).map(|_| rng.uniform(40.0, 215.0)).collect();
            let gx: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let gy: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut px = Vec::with_capacity(32 * 32 * 3);
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        let v = base[c] + gx[c] * (x as f64 - 15.5) + gy[c] * (y as f64 - 15.5);
                        px.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            RgbImage::new(32, 32, px).unwrap()
        })
        .collect()
}

fn smoke_dataset(sigmas: &[f64]) -> Dataset {
    Dataset::from_samples(
        smoke_images()
            .into_iter()
            .enumerate()
            .map(|(i, clean)| Sample {
                clean,
                noise: NoiseSpec::new(sigmas[i % sigmas.len()], 100 + i as u64).unwrap(),
                source: None,
            })
            .collect(),
    )
}

/// (mean MAE in [0,1], mean PSNR of output, mean PSNR of noisy input).
fn score(model: &Irunet<f32>, data: &Dataset) -> (f64, f64, f64) {
    let (mut m, mut pd, mut pn) = (0.0, 0.0, 0.0);
    for s in data.samples() {
        let noisy = s.noisy();
        let x = noisy.to_tensor::<f32>().reshape(vec![1, 3, 32, 32]).unwrap();
        let out = model.predict(&x).unwrap();
        let clean = s.clean.to_tensor::<f32>().reshape(vec![1, 3, 32, 32]).unwrap();
        m += mae(&out, &clean).unwrap();
        pd += psnr(&RgbImage::from_tensor(&out).unwrap(), &s.clean).unwrap();
        pn += psnr(&noisy, &s.clean).unwrap();
    }
    let n = data.len() as f64;
    (m / n, pd / n, pn / n)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = smoke_dataset(&[25.0]);
    let config = TrainConfig {
        learning_rate: 1e-4,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-7,
        batch_size: 8,
        max_steps: 300,
        checkpoint_every: 0,
        init_seed: 0,
        epoch_seed: 0,
    };
    let initial = Irunet::<f32>::new(ModelConfig::tiny(), config.init_seed).unwrap();
    let (mae0, psnr0, noisy_psnr) = score(&initial, &data);
    let (trainer, _) = train::<f32>(ModelConfig::tiny(), config, &data, &mut std::io::sink(), None).unwrap();
    let (mae1, psnr1, _) = score(trainer.model(), &data);
    let elapsed = start.elapsed();
    let ratio = mae1 / mae0;
    let passed = ratio <= 0.5 && psnr1 >= noisy_psnr + 2.0 && elapsed < Duration::from_secs(300);
    outcome(
        passed,
        format!(
            "MAE {mae0:.4} -> {mae1:.4} (ratio {ratio:.3}, need <=0.5); PSNR denoised {psnr1:.2} dB (initial {psnr0:.2}) vs noisy {noisy_psnr:.2} dB (need >= +2.00); {:.1}s (<300s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    parallel::set_enabled(false);
    let data = smoke_dataset(&[10.0, 25.0, 50.0]);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        batch_size: 3,
        max_steps: 10,
        checkpoint_every: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (full_trainer, full) =
        train::<f32>(ModelConfig::tiny(), config.clone(), &data, &mut std::io::sink(), Some(dir.path())).unwrap();
    let (_, repeat) = train::<f32>(ModelConfig::tiny(), config.clone(), &data, &mut std::io::sink(), None).unwrap();
    let trace_ok = bits(&full.losses) == bits(&repeat.losses);

    let final_ckpt = load_checkpoint::<f32>(dir.path().join("final.irun")).unwrap();
    let restored = Irunet::from_parts(final_ckpt.config, final_ckpt.params).unwrap();
    let x = smoke_images()[0].to_tensor::<f32>().reshape(vec![1, 3, 32, 32]).unwrap();
    let out_bits = |m: &Irunet<f32>| m.predict(&x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let roundtrip_ok = out_bits(full_trainer.model()) == out_bits(&restored);

    let plain = Checkpoint {
        config: restored.config().clone(),
        params: restored.params().clone(),
        training: None,
    };
    let plain_path = dir.path().join("plain.irun");
    save_checkpoint(&plain, &plain_path).unwrap();
    let reloaded = load_checkpoint::<f32>(&plain_path).unwrap();
    let roundtrip_ok = roundtrip_ok && reloaded.params == *restored.params();

    let mid = load_checkpoint::<f32>(dir.path().join("step_00000004.irun")).unwrap();
    let mut resumed = Trainer::from_checkpoint(mid, config).unwrap();
    let rest = resumed.run(&data, &mut std::io::sink(), None).unwrap();
    let resume_ok = bits(&rest.losses) == bits(&full.losses[4..]);
    parallel::set_enabled(true);
    outcome(
        trace_ok && roundtrip_ok && resume_ok,
        format!("loss trace repeatable: {trace_ok}; checkpoint round trip bit-exact: {roundtrip_ok}; resume from step 4 matches: {resume_ok}"),
    )
}

fn criterion_9() -> Outcome {
    let data = smoke_dataset(&[10.0, 25.0, 50.0]);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        batch_size: 4,
        max_steps: 4,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    train::<f32>(ModelConfig::tiny(), config, &data, &mut std::io::sink(), Some(dir.path())).unwrap();
    let ckpt = load_checkpoint::<f32>(dir.path().join("final.irun")).unwrap();
    let model = Irunet::from_parts(ckpt.config, ckpt.params).unwrap();
    let report = evaluate(&model, &data, MetricDomain::Byte).unwrap();
    let tsv = report.to_tsv();
    let sigmas: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    let passed = tsv.starts_with("sigma\tn\tpsnr_mean\tssim_mean\tmae_mean\n") && sigmas == ["10", "25", "50", "ALL"];
    let mut detail = String::from(
        "per-sigma report emitted (reference values 42.20/39.64/33.31 dB, SSIM 0.9977/0.9925/0.9655 not reproduced at desk scale)",
    );
    for line in tsv.lines() {
        detail.push_str("\n      ");
        detail.push_str(line);
    }
    outcome(passed, detail)
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("gradient correctness", criterion_1),
        ("adjoint identity", criterion_2),
        ("shape and range contract", criterion_3),
        ("parameter budget", criterion_4),
        ("noise statistics", criterion_5),
        ("metric oracles", criterion_6),
        ("learning smoke test", criterion_7),
        ("determinism and persistence", criterion_8),
        ("per-sigma evaluation report", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!("[{}] {}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
