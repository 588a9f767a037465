//! The full sensor-to-text model: patch encoder, vocabulary alignment and a small
//! causal byte-level language model with LoRA adapters on its query and value
//! projections. All parameters live in one [`ParamStore`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align::{
    load_vocab_embeddings, AlignConfig, AlignedFeatures, AlignmentWeights, AttentionScale, VocabEmbedding, VocabSource,
};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, BlockConfig, LayerNorm, LoraAdapter, TransformerBlock};
use crate::pressure::{compute_stats, PressureMap, SensorGeometry};
use crate::prompt::{
    assemble_prompt, build_stat_context, build_structure_context, render_token_stream, ByteTokenizer, CompositePrompt,
    StreamItem, TaskInstruction,
};
use crate::rng::{self, Rng};
use crate::sensor::{patch_count, patchify, perturb, EmbeddingConfig, SensorEncoder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    #[serde(default)]
    pub activation: Activation,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: ByteTokenizer::VOCAB_SIZE,
            hidden: 64,
            depth: 2,
            heads: 4,
            ff_multiplier: 4,
            activation: Activation::Gelu,
            lora_rank: 8,
            lora_alpha: 32.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VocabChoice {
    #[default]
    Backbone,
    Random {
        seed: u64,
    },
    File {
        path: std::path::PathBuf,
        #[serde(default)]
        tensor: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: SensorGeometry,
    pub embedding: EmbeddingConfig,
    pub align_heads: usize,
    pub align_dropout: f64,
    #[serde(default)]
    pub align_scale: AttentionScale,
    #[serde(default)]
    pub align_top_m: Option<usize>,
    #[serde(default)]
    pub vocab: VocabChoice,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: SensorGeometry::default(),
            embedding: EmbeddingConfig::default(),
            align_heads: 4,
            align_dropout: 0.1,
            align_scale: AttentionScale::ModelWidth,
            align_top_m: None,
            vocab: VocabChoice::Backbone,
            lm: LmConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk defaults, or the same model with the reference LoRA setting
    /// (rank 64, alpha 16) for the full-scale profile.
    pub fn for_profile(profile: crate::train::Profile) -> Self {
        let mut cfg = Self::default();
        if profile == crate::train::Profile::Paper {
            cfg.lm.lora_rank = 64;
            cfg.lm.lora_alpha = 16.0;
        }
        cfg
    }

    /// Small dimensions for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            geometry: SensorGeometry {
                rows: 4,
                cols: 4,
                ..SensorGeometry::default()
            },
            embedding: EmbeddingConfig {
                patch_size: 2,
                embed_dim: 8,
                noise_std: 0.05,
                encoder_depth: 1,
                encoder_heads: 2,
                ff_multiplier: 2,
                activation: Activation::Gelu,
            },
            align_heads: 2,
            align_dropout: 0.0,
            align_scale: AttentionScale::ModelWidth,
            align_top_m: None,
            vocab: VocabChoice::Backbone,
            lm: LmConfig {
                hidden: 16,
                depth: 1,
                heads: 2,
                ff_multiplier: 2,
                lora_rank: 2,
                lora_alpha: 4.0,
                ..LmConfig::default()
            },
        }
    }

    pub fn n_patches(&self) -> usize {
        patch_count(self.geometry.rows, self.geometry.cols, self.embedding.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.embedding.validate()?;
        let lm = &self.lm;
        if lm.vocab_size == 0 || lm.hidden == 0 || lm.depth == 0 || lm.ff_multiplier == 0 {
            return Err(Error::config("language model sizes must be positive"));
        }
        if lm.heads == 0 || !lm.hidden.is_multiple_of(lm.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide hidden width {}",
                lm.heads, lm.hidden
            )));
        }
        if self.embedding.patch_size > self.geometry.rows.min(self.geometry.cols) {
            return Err(Error::config("patch size exceeds the sensor grid"));
        }
        crate::nn::check_lora_rank(lm.lora_rank, lm.hidden, lm.hidden)
    }
}

pub struct ToyLm {
    pub config: LmConfig,
    pub tok_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl ToyLm {
    /// Registers `lm.*` and `lora.*` parameters.
    pub fn new(store: &mut ParamStore, config: LmConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.hidden;
        let tok_emb = store.add("lm.tok_emb", rng::normal_tensor(&[config.vocab_size, d], 0.1, rng), true)?;
        let block_cfg = BlockConfig {
            dim: d,
            heads: config.heads,
            ff_multiplier: config.ff_multiplier,
            causal: true,
            activation: config.activation,
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut block = TransformerBlock::new(store, &format!("lm.layer{i}"), block_cfg, rng)?;
            block.attn.alibi = true;
            let (r, a) = (config.lora_rank, config.lora_alpha);
            block.attn.lora_q = Some(LoraAdapter::new(store, &format!("lora.layer{i}.q"), d, d, r, a, rng)?);
            block.attn.lora_v = Some(LoraAdapter::new(store, &format!("lora.layer{i}.v"), d, d, r, a, rng)?);
            blocks.push(block);
        }
        let final_norm = LayerNorm::new(store, "lm.final_norm", d)?;
        Ok(Self {
            config,
            tok_emb,
            blocks,
            final_norm,
        })
    }

    /// Input rows for a stream: token embeddings for hard ids and rows of
    /// `soft[segment]` for soft items. Position enters through the attention bias.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, items: &[StreamItem], soft: &[Var]) -> Result<Var> {
        let e = tape.param(store, self.tok_emb);
        let mut src = Vec::with_capacity(items.len());
        for item in items {
            src.push(match *item {
                StreamItem::Hard(id) if id < self.config.vocab_size => (e, id),
                StreamItem::Hard(id) => return Err(Error::data(format!("token id {id} outside the vocabulary"))),
                StreamItem::Soft { segment, row } => {
                    let v = soft
                        .get(segment)
                        .ok_or_else(|| Error::shape(format!("no soft segment {segment}")))?;
                    (*v, row)
                }
            });
        }
        tape.gather_rows(&src)
    }

    /// `L × V` logits from embedded inputs; the output head is the token table.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        let h = self.final_norm.forward(tape, store, x)?;
        let e = tape.param(store, self.tok_emb);
        tape.matmul_t(h, false, e, true)
    }

    /// Detaches every LoRA adapter (diagnostics and identity checks).
    pub fn without_adapters(&self) -> ToyLm {
        ToyLm {
            config: self.config.clone(),
            tok_emb: self.tok_emb,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let mut b = b.clone();
                    b.attn.lora_q = None;
                    b.attn.lora_v = None;
                    b
                })
                .collect(),
            final_norm: self.final_norm.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

pub struct SitModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: SensorEncoder,
    pub align: AlignmentWeights,
    pub vocab: VocabEmbedding,
    pub lm: ToyLm,
}

impl SitModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let lm = ToyLm::new(&mut store, config.lm.clone(), &mut rng::stream(seed, &[1]))?;
        let encoder = SensorEncoder::new(
            &mut store,
            config.embedding.clone(),
            config.n_patches(),
            &mut rng::stream(seed, &[2]),
        )?;
        let source = match &config.vocab {
            VocabChoice::Backbone => VocabSource::Backbone(lm.tok_emb),
            VocabChoice::Random { seed } => VocabSource::Random { seed: *seed },
            VocabChoice::File { path, tensor } => VocabSource::File {
                path: path.clone(),
                tensor: tensor.clone(),
            },
        };
        let vocab = load_vocab_embeddings(&source, &mut store, config.lm.vocab_size, config.lm.hidden)?;
        let align_cfg = AlignConfig {
            heads: config.align_heads,
            embed_dim: config.embedding.embed_dim,
            hidden_dim: config.lm.hidden,
            dropout: config.align_dropout,
            scale: config.align_scale,
            top_m: config.align_top_m,
        };
        let align = AlignmentWeights::new(&mut store, align_cfg, vocab.width, &mut rng::stream(seed, &[3]))?;
        Ok(Self {
            config,
            store,
            encoder,
            align,
            vocab,
            lm,
        })
    }

    /// Backbone pretraining: only `lm.*` learns.
    pub fn set_pretraining_mode(&mut self) {
        self.store.set_trainable("", false);
        self.store.set_trainable("lm.", true);
    }

    /// Fine-tuning: LoRA, sensor encoder and alignment learn; backbone and
    /// vocabulary stay frozen.
    pub fn set_finetuning_mode(&mut self) {
        self.store.set_trainable("", false);
        for prefix in ["lora.", "sensor.", "align."] {
            self.store.set_trainable(prefix, true);
        }
        self.store.set_trainable("align.vocab", false);
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer
    }

    /// Soft tokens for one map on the tape.
    pub fn sensor_features(&self, tape: &mut Tape, map: &PressureMap, training: bool, rng: &mut Rng) -> Result<Var> {
        self.sensor_features_with(&self.store, tape, map, training, rng)
    }

    /// Same as [`Self::sensor_features`] but reading weights from `store`.
    pub fn sensor_features_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        map: &PressureMap,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let grid = patchify(map, self.config.embedding.patch_size)?;
        let grid = perturb(&grid, self.config.embedding.noise_std, training, rng)?;
        let x = self.encoder.forward(tape, store, &grid)?;
        Ok(self.align.forward(tape, store, x, &self.vocab, training, rng)?.features)
    }

    pub fn features(&self, map: &PressureMap) -> Result<AlignedFeatures> {
        let mut tape = Tape::new();
        let v = self.sensor_features(&mut tape, map, false, &mut rng::seeded(0))?;
        Ok(AlignedFeatures {
            values: tape.value(v).clone(),
        })
    }

    pub fn prompt_with(&self, map: &PressureMap, features: AlignedFeatures, instruction: &TaskInstruction) -> Result<CompositePrompt> {
        let structure = build_structure_context(&self.config.geometry);
        let stats = build_stat_context(&compute_stats(map));
        assemble_prompt(&features, &structure, &stats, instruction)
    }

    /// Inference-mode prompt for a map and instruction.
    pub fn prompt(&self, map: &PressureMap, instruction: &TaskInstruction) -> Result<CompositePrompt> {
        let f = self.features(map)?;
        self.prompt_with(map, f, instruction)
    }

    /// Logits for a rendered stream whose soft rows are already known.
    pub fn stream_logits(&self, items: &[StreamItem], soft: &[Tensor], lm: Option<&ToyLm>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let soft: Vec<Var> = soft.iter().map(|t| tape.constant(t.clone())).collect();
        let lm = lm.unwrap_or(&self.lm);
        let x = lm.embed(&mut tape, &self.store, items, &soft)?;
        let logits = lm.logits(&mut tape, &self.store, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Autoregressive decoding after the answer delimiter. Stops at end-of-text,
    /// after `max_new_tokens`, or when the stream reaches `max_len`.
    pub fn generate(&self, prompt: &CompositePrompt, max_new_tokens: usize, mode: DecodeMode, max_len: usize) -> Result<String> {
        let tok = ByteTokenizer;
        let stream = render_token_stream(prompt, &tok, max_len)?;
        let mut items = stream.items;
        let mut out = Vec::new();
        let mut rng = match mode {
            DecodeMode::TopK { seed, .. } => Some(rng::stream(seed, &[0x6465])),
            DecodeMode::Greedy => None,
        };
        while out.len() < max_new_tokens && items.len() < max_len {
            let logits = self.stream_logits(&items, &stream.soft, None)?;
            let last = logits.row(logits.rows() - 1);
            let next = match (mode, rng.as_mut()) {
                (DecodeMode::TopK { k, .. }, Some(r)) => sample_top_k(last, k, r),
                _ => argmax(last),
            };
            if next == ByteTokenizer::EOT {
                break;
            }
            out.push(next);
            items.push(StreamItem::Hard(next));
        }
        Ok(tok.decode(&out))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    let top = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in idx.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    idx[idx.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pressure::{random_posture, synth_posture};
    use crate::prompt::TaskType;

    fn tiny_map(cfg: &ModelConfig, seed: u64) -> PressureMap {
        let spec = random_posture(&cfg.geometry, &mut rng::seeded(seed));
        synth_posture(&spec, &cfg.geometry, seed).unwrap()
    }

    #[test]
    fn backbone_vocab_is_the_token_table() {
        let m = SitModel::new(ModelConfig::tiny(), 1).unwrap();
        assert_eq!(m.vocab.table, m.lm.tok_emb);
    }

    #[test]
    fn causal_logits_ignore_the_future() {
        let m = SitModel::new(ModelConfig::tiny(), 2).unwrap();
        let items: Vec<StreamItem> = b"abcdefgh".iter().map(|&b| StreamItem::Hard(b as usize)).collect();
        let base = m.stream_logits(&items, &[], None).unwrap();
        let mut changed = items.clone();
        changed[5] = StreamItem::Hard(b'z' as usize);
        let other = m.stream_logits(&changed, &[], None).unwrap();
        for t in 0..5 {
            assert_eq!(base.row(t), other.row(t));
        }
        assert_ne!(base.row(5), other.row(5));
    }

    #[test]
    fn zero_new_tokens_is_empty_and_greedy_repeats() {
        let cfg = ModelConfig::tiny();
        let m = SitModel::new(cfg.clone(), 3).unwrap();
        let map = tiny_map(&cfg, 3);
        let p = m.prompt(&map, &TaskInstruction::new(TaskType::Description, "go")).unwrap();
        assert_eq!(m.generate(&p, 0, DecodeMode::Greedy, 512).unwrap(), "");
        let a = m.generate(&p, 5, DecodeMode::Greedy, 512).unwrap();
        assert_eq!(a, m.generate(&p, 5, DecodeMode::Greedy, 512).unwrap());
        let k = DecodeMode::TopK { k: 5, seed: 9 };
        assert_eq!(m.generate(&p, 5, k, 512).unwrap(), m.generate(&p, 5, k, 512).unwrap());
        assert!(matches!(m.generate(&p, 5, DecodeMode::Greedy, 10), Err(Error::Length { .. })));
    }

    #[test]
    fn trainable_sets() {
        let mut m = SitModel::new(ModelConfig::tiny(), 4).unwrap();
        m.set_finetuning_mode();
        for (_, p) in m.store.iter() {
            let expect = ["lora.", "sensor.", "align."].iter().any(|s| p.name.starts_with(s));
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
        m.set_pretraining_mode();
        assert!(m.store.iter().all(|(_, p)| p.trainable == p.name.starts_with("lm.")));
    }
}
