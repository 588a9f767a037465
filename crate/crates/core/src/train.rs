//! Supervised fine-tuning, backbone pretraining and the loss they share.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::model::SitModel;
use crate::ops;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pressure::{random_posture, synth_posture, PressureMap, SensorGeometry};
use crate::prompt::{render_token_stream, ByteTokenizer, StreamItem, TaskInstruction, TaskType};
use crate::rng::{self, Rng};
use crate::synth;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::config(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            epochs: 5,
            batch_size: 4,
            accum_steps: 2,
            max_len: 512,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 3e-5,
            epochs: 5,
            batch_size: 4,
            accum_steps: 8,
            max_len: 4096,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 || self.max_len == 0 {
            return Err(Error::config("epochs, batch size, accumulation steps and max length must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub map: PressureMap,
    pub instruction: TaskInstruction,
    pub answer: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Kept out of the serialized report so repeated runs compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Mean cross-entropy over the masked positions.
pub fn supervised_loss(logits: &Tensor, targets: &[usize], answer_mask: &[bool]) -> Result<f64> {
    Ok(ops::masked_cross_entropy(logits, targets, answer_mask)?.0)
}

/// A fully tokenized training example.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub inputs: Vec<StreamItem>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Prompt stream plus answer bytes and end-of-text, shifted into input/target
/// pairs. Only positions that predict answer bytes are supervised.
pub fn encode_sample(model: &SitModel, sample: &TrainSample, max_len: usize, index: usize) -> Result<Encoded> {
    let n = model.config.n_patches();
    let placeholder = crate::align::AlignedFeatures {
        values: Tensor::zeros(&[n, model.config.lm.hidden]),
    };
    let prompt = model.prompt_with(&sample.map, placeholder, &sample.instruction)?;
    let tok = ByteTokenizer;
    let mut items = render_token_stream(&prompt, &tok, usize::MAX)?.items;
    let prompt_len = items.len();
    items.extend(tok.encode(&sample.answer).into_iter().map(StreamItem::Hard));
    items.push(StreamItem::Hard(ByteTokenizer::EOT));
    if items.len() > max_len {
        return Err(Error::Length {
            what: format!("training sample {index}"),
            needed: items.len(),
            limit: max_len,
        });
    }
    let targets = items[1..]
        .iter()
        .map(|i| match i {
            StreamItem::Hard(id) => *id,
            StreamItem::Soft { .. } => 0,
        })
        .collect();
    let mask = (1..items.len()).map(|t| t >= prompt_len).collect();
    items.pop();
    Ok(Encoded {
        inputs: items,
        targets,
        mask,
    })
}

/// Builds the loss for one sample on a fresh tape, scaled by `weight`, and
/// runs the backward pass. Returns the unscaled loss.
fn sample_gradients(
    model: &SitModel,
    sample: &TrainSample,
    enc: &Encoded,
    weight: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(f64, Tape, Gradients)> {
    let mut tape = Tape::new();
    let soft = model.sensor_features(&mut tape, &sample.map, training, rng)?;
    let x = model.lm.embed(&mut tape, &model.store, &enc.inputs, &[soft])?;
    let logits = model.lm.logits(&mut tape, &model.store, x)?;
    let ce = tape.cross_entropy(logits, &enc.targets, &enc.mask)?;
    let loss = tape.value(ce).data()[0];
    let scaled = tape.scale(ce, weight);
    let grads = tape.backward(scaled)?;
    Ok((loss, tape, grads))
}

/// Mean supervised loss over `samples` with dropout and noise disabled.
pub fn evaluate_loss(model: &SitModel, samples: &[TrainSample], max_len: usize) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let enc = encode_sample(model, s, max_len, i)?;
            let mut tape = Tape::new();
            let soft = model.sensor_features(&mut tape, &s.map, false, &mut rng::seeded(0))?;
            let x = model.lm.embed(&mut tape, &model.store, &enc.inputs, &[soft])?;
            let logits = model.lm.logits(&mut tape, &model.store, x)?;
            supervised_loss(tape.value(logits), &enc.targets, &enc.mask)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

const SHUFFLE_STREAM: u64 = 0x5348;
const SAMPLE_STREAM: u64 = 0x534d;

/// Fine-tunes LoRA adapters, the sensor encoder and the alignment module.
/// Each optimizer step covers `batch_size · accum_steps` samples and uses the
/// summed gradient of their losses divided by the step's sample count.
pub fn train(model: &mut SitModel, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let started = std::time::Instant::now();
    let encoded: Vec<Encoded> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| encode_sample(model, s, cfg.max_len, i))
        .collect::<Result<_>>()?;
    model.set_finetuning_mode();
    model.store.zero_grad();
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut report = TrainReport {
        samples: samples.len(),
        seed: cfg.seed,
        ..TrainReport::default()
    };
    let per_step = cfg.batch_size * cfg.accum_steps;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut rng::stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]),
        );
        let mut epoch_total = 0.0;
        for step in order.chunks(per_step) {
            let weight = 1.0 / step.len() as f64;
            let mut step_total = 0.0;
            for micro in step.chunks(cfg.batch_size) {
                let store = &*model;
                let results: Vec<(f64, Tape, Gradients)> = micro
                    .par_iter()
                    .map(|&i| {
                        let mut r = rng::stream(cfg.seed, &[SAMPLE_STREAM, epoch as u64, i as u64]);
                        sample_gradients(store, &samples[i], &encoded[i], weight, true, &mut r)
                    })
                    .collect::<Result<_>>()?;
                for (loss, tape, grads) in &results {
                    model.store.accumulate(tape, grads)?;
                    step_total += loss;
                }
            }
            adam_step(&mut model.store, &mut adam, cfg.lr)?;
            if !step_total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            report.step_losses.push(step_total / step.len() as f64);
            epoch_total += step_total;
        }
        report.epoch_losses.push(epoch_total / samples.len() as f64);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            seq_len: 128,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Next-byte training of the backbone on plain text. Documents are joined with
/// end-of-text bytes and random windows are drawn each step. Returns the
/// per-step losses.
pub fn pretrain(model: &mut SitModel, texts: &[String], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let tok = ByteTokenizer;
    let mut stream = Vec::new();
    for t in texts {
        stream.extend(tok.encode(t));
        stream.push(ByteTokenizer::EOT);
    }
    let window = cfg.seq_len + 1;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 || cfg.seq_len == 0 || stream.len() < window {
        return Err(Error::config("pretraining corpus is shorter than one window"));
    }
    model.set_pretraining_mode();
    model.store.zero_grad();
    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    let weight = 1.0 / cfg.batch_size as f64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, &[0x5052, step as u64]);
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::random_range(&mut r, 0..=stream.len() - window))
            .collect();
        let m = &*model;
        let results: Vec<(f64, Tape, Gradients)> = starts
            .par_iter()
            .map(|&s| {
                let w = &stream[s..s + window];
                let items: Vec<StreamItem> = w[..cfg.seq_len].iter().map(|&b| StreamItem::Hard(b)).collect();
                let mask = vec![true; cfg.seq_len];
                let mut tape = Tape::new();
                let x = m.lm.embed(&mut tape, &m.store, &items, &[])?;
                let logits = m.lm.logits(&mut tape, &m.store, x)?;
                let ce = tape.cross_entropy(logits, &w[1..], &mask)?;
                let loss = tape.value(ce).data()[0];
                let scaled = tape.scale(ce, weight);
                let grads = tape.backward(scaled)?;
                Ok((loss, tape, grads))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (loss, tape, grads) in &results {
            model.store.accumulate(tape, grads)?;
            total += loss;
        }
        adam_step(&mut model.store, &mut adam, cfg.lr)?;
        losses.push(total * weight);
    }
    Ok(losses)
}

/// One line of a training corpus. `question` is accepted for `instruction`
/// so corpora written by the dataset pipeline load directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub pressure_file: String,
    pub task_type: TaskType,
    #[serde(alias = "question")]
    pub instruction: String,
    pub answer: String,
}

/// Parses a JSONL corpus. Map paths are resolved against `base_dir`.
pub fn read_corpus<R: std::io::BufRead>(
    source: R,
    base_dir: &std::path::Path,
    geometry: &SensorGeometry,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| crate::error::ParseError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        let path = base_dir.join(&rec.pressure_file);
        let file = std::fs::File::open(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let map = crate::pressure::load_pressure_map(
            std::io::BufReader::new(file),
            crate::pressure::MapFormat::from_path(&path),
            geometry,
        )?;
        out.push(TrainSample {
            map,
            instruction: TaskInstruction::new(rec.task_type, rec.instruction),
            answer: rec.answer,
        });
    }
    Ok(out)
}

/// Backbone pretraining documents: general knowledge records plus answers
/// written in the domain's own phrasing, drawn from maps disjoint from any
/// fine-tuning set built with the same seed.
pub fn pretraining_corpus(n_knowledge: usize, n_domain: usize, geometry: &SensorGeometry, seed: u64) -> Result<Vec<String>> {
    let mut texts = synth::pretraining_texts(n_knowledge, seed);
    let domain = synthetic_samples(n_domain, geometry, &TaskType::ALL, rng::derive_seed(seed, &[0x5054]))?;
    texts.extend(domain.into_iter().map(|s| s.answer));
    Ok(texts)
}

/// Synthetic supervised samples cycling through `tasks`, with reference answers
/// derived from each map's posture label.
pub fn synthetic_samples(n: usize, geometry: &SensorGeometry, tasks: &[TaskType], seed: u64) -> Result<Vec<TrainSample>> {
    if tasks.is_empty() {
        return Err(Error::config("no task types requested"));
    }
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x5359, i as u64]);
            let spec = random_posture(geometry, &mut r);
            let map = synth_posture(&spec, geometry, rng::derive_seed(seed, &[0x4d50, i as u64]))?;
            let stats = crate::pressure::compute_stats(&map);
            let task = tasks[i % tasks.len()];
            Ok(TrainSample {
                instruction: TaskInstruction::new(task, synth::random_instruction(task, &mut r)),
                answer: synth::reference_answer(task, &spec.posture_label, &map, &stats),
                map,
            })
        })
        .collect()
}
