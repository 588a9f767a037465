use std::collections::BTreeSet;

use presslm::gradcheck::{check_params, TOLERANCE};
use presslm::model::{DecodeMode, ModelConfig, SitModel};
use presslm::pressure::SensorGeometry;
use presslm::prompt::{StreamItem, TaskType};
use presslm::train::{encode_sample, evaluate_loss, pretrain, synthetic_samples, train, PretrainConfig, TrainConfig, TrainSample};

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.geometry = SensorGeometry {
        rows: 8,
        cols: 8,
        ..SensorGeometry::default()
    };
    cfg.embedding.patch_size = 4;
    cfg.lm.hidden = 32;
    cfg
}

fn samples(n: usize, seed: u64) -> Vec<TrainSample> {
    synthetic_samples(n, &small_config().geometry, &[TaskType::Description, TaskType::Analysis], seed).unwrap()
}

fn quick(lr: f64, batch: usize, accum: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs: 1,
        batch_size: batch,
        accum_steps: accum,
        max_len: 2048,
        seed: 4,
        ..TrainConfig::desk()
    }
}

fn snapshot(m: &SitModel) -> Vec<Vec<f64>> {
    m.store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn micro_batches_sum_to_the_same_first_step() {
    let data = samples(4, 1);
    let mut whole = SitModel::new(small_config(), 9).unwrap();
    let mut split = SitModel::new(small_config(), 9).unwrap();
    train(&mut whole, &data, &quick(1e-3, 4, 1)).unwrap();
    train(&mut split, &data, &quick(1e-3, 2, 2)).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in snapshot(&whole).iter().zip(snapshot(&split)) {
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-5, "parameters differ by {worst}");
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let data = samples(4, 2);
    let mut m = SitModel::new(small_config(), 5).unwrap();
    let before = evaluate_loss(&m, &data, 2048).unwrap();
    let report = train(&mut m, &data, &quick(1e-4, 4, 1)).unwrap();
    assert_eq!(report.step_losses.len(), 1);
    let after = evaluate_loss(&m, &data, 2048).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn trajectories_repeat_bit_for_bit() {
    let data = samples(6, 3);
    let run = || {
        let mut m = SitModel::new(small_config(), 2).unwrap();
        let r = train(&mut m, &data, &TrainConfig { epochs: 2, ..quick(1e-3, 2, 1) }).unwrap();
        r.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}

#[test]
fn step_count_follows_accumulation() {
    let data = samples(5, 3);
    let mut m = SitModel::new(small_config(), 2).unwrap();
    let r = train(&mut m, &data, &TrainConfig { epochs: 2, ..quick(1e-3, 2, 2) }).unwrap();
    // Five samples, four per optimizer step: two steps per epoch.
    assert_eq!(r.step_losses.len(), 4);
    assert_eq!(r.epoch_losses.len(), 2);
}

#[test]
fn backbone_gets_no_gradient_and_adapters_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let mut model = SitModel::new(cfg.clone(), 6).unwrap();
    model.set_finetuning_mode();
    // Nonzero B so that A receives gradient too.
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).name.ends_with(".b") && model.store.get(id).name.starts_with("lora.") {
            let shape = model.store.value(id).shape().to_vec();
            model.store.get_mut(id).value = presslm::rng::normal_tensor(&shape, 0.3, &mut presslm::rng::seeded(id.index() as u64));
        }
    }
    let sample = synthetic_samples(1, &cfg.geometry, &[TaskType::Description], 8).unwrap().remove(0);
    let enc = encode_sample(&model, &sample, 4096, 0).unwrap();
    let loss = |t: &mut presslm::autodiff::Tape, s: &presslm::autodiff::ParamStore| {
        let soft = model.sensor_features_with(s, t, &sample.map, false, &mut presslm::rng::seeded(0))?;
        let x = model.lm.embed(t, s, &enc.inputs, &[soft])?;
        let logits = model.lm.logits(t, s, x)?;
        t.cross_entropy(logits, &enc.targets, &enc.mask)
    };

    let mut store = model.store.clone();
    store.zero_grad();
    let mut tape = presslm::autodiff::Tape::new();
    let l = loss(&mut tape, &store).unwrap();
    let grads = tape.backward(l).unwrap();
    store.accumulate(&tape, &grads).unwrap();
    let mut lora = 0;
    for (_, p) in store.iter() {
        if p.name.starts_with("lm.") || p.name == "align.vocab" {
            assert!(!p.trainable, "{} should be frozen", p.name);
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{} has gradient", p.name);
        }
        if p.name.starts_with("lora.") {
            lora += 1;
            assert!(p.grad.max_abs() > 0.0, "{} has no gradient", p.name);
        }
    }
    assert!(lora >= 4);

    // Finite differences over the adapters only.
    let mut adapters = model.store.clone();
    adapters.set_trainable("", false);
    adapters.set_trainable("lora.", true);
    let check = check_params("lora", &adapters, loss).unwrap();
    assert!(check.max_rel_error < TOLERANCE, "{check:?}");
}

fn bigrams(s: &str) -> BTreeSet<[u8; 2]> {
    s.as_bytes().windows(2).map(|w| [w[0], w[1]]).collect()
}

#[test]
fn smoke_training_memorizes_a_training_answer() {
    let data = samples(2, 7);
    let mut m = SitModel::new(small_config(), 3).unwrap();
    let texts: Vec<String> = data.iter().map(|s| s.answer.clone()).collect();
    pretrain(
        &mut m,
        &texts,
        &PretrainConfig {
            steps: 500,
            batch_size: 4,
            seq_len: 64,
            lr: 1e-2,
            seed: 1,
        },
    )
    .unwrap();
    train(&mut m, &data, &TrainConfig { epochs: 20, ..quick(3e-3, 2, 1) }).unwrap();

    let s = &data[0];
    let prompt = m.prompt(&s.map, &s.instruction).unwrap();
    let out = m.generate(&prompt, s.answer.len() + 16, DecodeMode::Greedy, 4096).unwrap();
    let reference = bigrams(&s.answer);
    let shared = bigrams(&out).intersection(&reference).count() as f64 / reference.len() as f64;
    assert!(shared >= 0.3, "overlap {shared:.3}: {out:?} vs {:?}", s.answer);
}

#[test]
fn encoded_targets_supervise_only_the_answer() {
    let m = SitModel::new(small_config(), 1).unwrap();
    let s = &samples(1, 4)[0];
    let enc = encode_sample(&m, s, 4096, 0).unwrap();
    let supervised: Vec<u8> = enc.targets.iter().zip(&enc.mask).filter(|(_, &k)| k).map(|(&t, _)| t as u8).collect();
    let mut expect = s.answer.as_bytes().to_vec();
    expect.push(presslm::prompt::ByteTokenizer::EOT as u8);
    assert_eq!(supervised, expect);
    assert_eq!(enc.inputs.iter().filter(|i| matches!(i, StreamItem::Soft { .. })).count(), m.config.n_patches());
    let err = encode_sample(&m, s, 10, 7).unwrap_err().to_string();
    assert!(err.contains("sample 7"), "{err}");
}
