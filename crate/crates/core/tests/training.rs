use std::path::Path;

use irunet_core::data::{Dataset, NoiseSpec, RgbImage, Sample};
use irunet_core::metrics::mae_loss;
use irunet_core::model::checkpoint::load_checkpoint;
use irunet_core::model::{Irunet, ModelConfig};
use irunet_core::rng::SplitMix64;
use irunet_core::train::{train, TrainConfig, Trainer};
use irunet_core::{Error, Tape, Tensor};

fn dataset(n: usize, size: usize) -> Dataset {
    let mut rng = SplitMix64::new(4);
    let samples = (0..n)
        .map(|i| {
            let base: Vec<u64> = (0..3).map(|_| 30 + rng.below(200)).collect();
            let pixels = (0..size * size * 3)
                .map(|k| (base[k % 3] + (k / 3 % size) as u64) as u8)
                .collect();
            Sample {
                clean: RgbImage::new(size, size, pixels).unwrap(),
                noise: NoiseSpec::new(25.0, i as u64).unwrap(),
                source: None,
            }
        })
        .collect();
    Dataset::from_samples(samples)
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_steps: steps,
        checkpoint_every: 4,
        init_seed: 5,
        epoch_seed: 6,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn fixed_seeds_reproduce_the_loss_trace() {
    let data = dataset(5, 16);
    let (_, a) = train::<f32>(ModelConfig::tiny(), config(9), &data, &mut Vec::new(), None).unwrap();
    let (_, b) = train::<f32>(ModelConfig::tiny(), config(9), &data, &mut Vec::new(), None).unwrap();
    assert_eq!(a.losses.len(), 9);
    assert_eq!(bits(&a.losses), bits(&b.losses));
    let other = TrainConfig { epoch_seed: 7, ..config(9) };
    let (_, c) = train::<f32>(ModelConfig::tiny(), other, &data, &mut Vec::new(), None).unwrap();
    assert_ne!(bits(&a.losses), bits(&c.losses));
}

#[test]
fn resume_continues_the_uninterrupted_trace() {
    let data = dataset(5, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let (_, full) = train::<f32>(ModelConfig::tiny(), config(11), &data, &mut log, Some(dir.path())).unwrap();
    let names: Vec<String> = full
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step_00000004.irun", "step_00000008.irun", "final.irun"]);

    // Step 4 falls mid-epoch (3 batches per epoch), exercising the skip.
    let ckpt = load_checkpoint::<f32>(dir.path().join("step_00000004.irun")).unwrap();
    assert_eq!(ckpt.training.as_ref().unwrap().step, 4);
    assert_eq!(ckpt.training.as_ref().unwrap().adam.t, 4);
    let mut resumed = Trainer::from_checkpoint(ckpt, config(11)).unwrap();
    let rest = resumed.run(&data, &mut Vec::new(), None).unwrap();
    assert_eq!(bits(&rest.losses), bits(&full.losses[4..]));

    let log = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 11);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields[0], "1");
    assert_eq!(fields[1].parse::<f64>().unwrap(), full.losses[0]);
    assert!(fields[2].parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_state() {
    let data = dataset(2, 16);
    let dir = tempfile::tempdir().unwrap();
    let model = Irunet::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let mut trainer = Trainer::new(model, config(3)).unwrap();
    let mut batch = data.batches::<f32>(2, 0).unwrap().next().unwrap().unwrap();
    let before = trainer.model().params().clone();
    let mut noisy = batch.noisy.into_data();
    noisy[0] = f32::NAN;
    batch.noisy = Tensor::new(batch.clean.shape().to_vec(), noisy).unwrap();
    match trainer.train_step(&batch) {
        Err(Error::NonFiniteLoss { step: 1, .. }) => {}
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
    assert_eq!(trainer.step(), 0);
    assert_eq!(trainer.model().params(), &before);
    // A healthy run afterwards still works and saves.
    trainer.run(&data, &mut Vec::new(), Some(dir.path())).unwrap();
    assert!(Path::new(&dir.path().join("final.irun")).exists());
}

#[test]
fn training_lowers_the_loss_on_a_fixed_batch() {
    let data = dataset(2, 16);
    let cfg = TrainConfig {
        max_steps: 60,
        learning_rate: 3e-3,
        ..config(60)
    };
    let (_, out) = train::<f32>(ModelConfig::tiny(), cfg, &data, &mut Vec::new(), None).unwrap();
    let first = out.losses[0];
    let last = *out.losses.last().unwrap();
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn empty_training_split_rejected() {
    let model = Irunet::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let mut trainer = Trainer::new(model, config(3)).unwrap();
    assert!(trainer.run(&Dataset::default(), &mut Vec::new(), None).is_err());
}

/// d/dz mean|z − x| = sign(z − x) / count, away from ties.
#[test]
fn mae_gradient_is_sign_over_count() {
    let mut rng = SplitMix64::new(2);
    let z = Tensor::from_fn(vec![2, 3, 2, 2], |_| rng.next_f64());
    let x = Tensor::from_fn(vec![2, 3, 2, 2], |_| rng.next_f64());
    let mut tape = Tape::<f64>::new();
    let zv = tape.variable(z.clone());
    let xv = tape.input(x.clone());
    let loss = mae_loss(&mut tape, zv, xv).unwrap();
    let g = tape.backward(loss).unwrap();
    let n = z.len() as f64;
    for ((&gz, &a), &b) in g.get(zv).unwrap().data().iter().zip(z.data()).zip(x.data()) {
        assert_eq!(gz, (a - b).signum() / n);
    }
    let h = 1e-6;
    for i in 0..z.len() {
        let eval = |d: f64| {
            let mut zz = z.clone().into_data();
            zz[i] += d;
            zz.iter().zip(x.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((numeric - g.get(zv).unwrap().data()[i]).abs() < 1e-8);
    }
}
