//! Vocabulary reprogramming.
//!
//! Sensor tokens act as queries against the language model's token-embedding
//! table: each head projects sensor tokens to queries and vocabulary rows to
//! keys and values, so every output row is a softmax-weighted mixture of projected
//! word embeddings. Heads are concatenated back to the sensor width, projected to
//! the backbone width, layer-normalized and passed through dropout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Denominator inside the attention softmax: `√d` (full sensor width) or `√d_h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    #[default]
    ModelWidth,
    HeadWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub heads: usize,
    /// Sensor embedding width `d`.
    pub embed_dim: usize,
    /// Backbone hidden width `D`.
    pub hidden_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub scale: AttentionScale,
    /// Attend only to the `m` vocabulary rows of largest norm.
    #[serde(default)]
    pub top_m: Option<usize>,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} alignment heads do not divide width {}",
                self.heads, self.embed_dim
            )));
        }
        crate::ops::check_dropout_rate(self.dropout)?;
        if self.top_m == Some(0) {
            return Err(Error::config("top_m must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn inv_sqrt_scale(&self) -> f64 {
        let s = match self.scale {
            AttentionScale::ModelWidth => self.embed_dim,
            AttentionScale::HeadWidth => self.head_dim(),
        };
        1.0 / (s as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSourceKind {
    Backbone,
    File,
    Random,
}

/// Where to find the vocabulary table.
#[derive(Clone, Debug)]
pub enum VocabSource {
    /// Share an existing parameter (the language model's token embeddings).
    Backbone(ParamId),
    /// A checkpoint file; `tensor` names the record (first record when `None`).
    File { path: PathBuf, tensor: Option<String> },
    Random { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct VocabEmbedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub width: usize,
    pub source: VocabSourceKind,
}

impl VocabEmbedding {
    pub fn frozen(&self, store: &ParamStore) -> bool {
        !store.get(self.table).trainable
    }
}

/// Resolves a vocabulary table of shape `vocab_size × width`. File and random
/// tables are registered as the frozen parameter `align.vocab`.
pub fn load_vocab_embeddings(
    source: &VocabSource,
    store: &mut ParamStore,
    vocab_size: usize,
    width: usize,
) -> Result<VocabEmbedding> {
    let check = |t: &Tensor| -> Result<()> {
        let (v, w) = t.dims2()?;
        if v != vocab_size || w != width {
            return Err(Error::config(format!(
                "vocabulary table is {v}x{w}, configuration expects {vocab_size}x{width}"
            )));
        }
        if !t.all_finite() {
            return Err(Error::config("vocabulary table contains non-finite entries"));
        }
        Ok(())
    };
    let (table, kind) = match source {
        VocabSource::Backbone(id) => {
            check(store.value(*id))?;
            (*id, VocabSourceKind::Backbone)
        }
        VocabSource::File { path, tensor } => {
            let t = read_vocab_file(path, tensor.as_deref())?;
            check(&t)?;
            (store.add("align.vocab", t, false)?, VocabSourceKind::File)
        }
        VocabSource::Random { seed } => {
            if vocab_size == 0 || width == 0 {
                return Err(Error::config("empty vocabulary"));
            }
            let t = rng::normal_tensor(&[vocab_size, width], 0.02, &mut rng::seeded(*seed));
            (
                store.add("align.vocab", checkpoint::to_stored_precision(&t), false)?,
                VocabSourceKind::Random,
            )
        }
    };
    Ok(VocabEmbedding {
        table,
        vocab_size,
        width,
        source: kind,
    })
}

fn read_vocab_file(path: &Path, name: Option<&str>) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let records = checkpoint::read_tensors(std::fs::File::open(path)?)?;
    let found = match name {
        Some(n) => records.into_iter().find(|(rn, _)| rn == n),
        None => records.into_iter().next(),
    };
    found
        .map(|(_, t)| t)
        .ok_or_else(|| Error::config(format!("no vocabulary tensor in {}", path.display())))
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct AlignmentWeights {
    pub config: AlignConfig,
    pub heads: Vec<HeadWeights>,
    pub out_proj: ParamId,
    pub norm: LayerNorm,
    /// Present only when the vocabulary width differs from the sensor width.
    pub down_proj: Option<ParamId>,
}

/// Soft tokens in the backbone's hidden space, one row per sensor patch.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub values: Tensor,
}

impl AlignedFeatures {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }
}

pub struct AlignOutput {
    pub features: Var,
    /// Per-head `N × V'` softmax weights.
    pub attention: Vec<Var>,
}

impl AlignmentWeights {
    pub fn new(store: &mut ParamStore, config: AlignConfig, vocab_width: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, dh, hidden) = (config.embed_dim, config.head_dim(), config.hidden_dim);
        let std = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(config.heads);
        for k in 0..config.heads {
            let mut mk = |n: &str, rng: &mut Rng| {
                store.add(format!("align.head{k}.{n}"), rng::normal_tensor(&[d, dh], std, rng), true)
            };
            heads.push(HeadWeights {
                wq: mk("wq", rng)?,
                wk: mk("wk", rng)?,
                wv: mk("wv", rng)?,
            });
        }
        let out_proj = store.add("align.out_proj", rng::normal_tensor(&[d, hidden], std, rng), true)?;
        let norm = LayerNorm::new(store, "align.norm", hidden)?;
        let down_proj = if vocab_width != d {
            let s = 1.0 / (vocab_width as f64).sqrt();
            Some(store.add("align.down_proj", rng::normal_tensor(&[vocab_width, d], s, rng), true)?)
        } else {
            None
        };
        Ok(Self {
            config,
            heads,
            out_proj,
            norm,
            down_proj,
        })
    }

    /// Rows of the vocabulary table that take part in attention.
    fn vocab_rows(&self, store: &ParamStore, vocab: &VocabEmbedding) -> Option<Vec<usize>> {
        let m = self.config.top_m?;
        let table = store.value(vocab.table);
        if m >= table.rows() {
            return None;
        }
        let norms: Vec<f64> = (0..table.rows())
            .map(|i| table.row(i).iter().map(|v| v * v).sum())
            .collect();
        let mut idx: Vec<usize> = (0..table.rows()).collect();
        idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        idx.truncate(m);
        idx.sort_unstable();
        Some(idx)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        vocab: &VocabEmbedding,
        training: bool,
        rng: &mut Rng,
    ) -> Result<AlignOutput> {
        let cfg = &self.config;
        let xv = tape.value(x);
        if xv.dims2()?.1 != cfg.embed_dim {
            return Err(Error::shape(format!(
                "sensor tokens {:?} do not match alignment width {}",
                xv.shape(),
                cfg.embed_dim
            )));
        }
        let table = store.value(vocab.table);
        if table.dims2()?.1 != vocab.width {
            return Err(Error::shape("vocabulary table width changed"));
        }
        let mut e = tape.param(store, vocab.table);
        if let Some(rows) = self.vocab_rows(store, vocab) {
            let src: Vec<_> = rows.into_iter().map(|r| (e, r)).collect();
            e = tape.gather_rows(&src)?;
        }
        if let Some(down) = self.down_proj {
            let w = tape.param(store, down);
            e = tape.matmul(e, w)?;
        } else if vocab.width != cfg.embed_dim {
            return Err(Error::shape(format!(
                "vocabulary width {} differs from sensor width {} and no down-projection exists",
                vocab.width, cfg.embed_dim
            )));
        }
        let inv_scale = cfg.inv_sqrt_scale();
        let mut zs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(store, head.wq);
            let wk = tape.param(store, head.wk);
            let wv = tape.param(store, head.wv);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(e, wk)?;
            let v = tape.matmul(e, wv)?;
            let scores = tape.matmul_t(q, false, k, true)?;
            let scores = tape.scale(scores, inv_scale);
            let a = tape.softmax_rows(scores, false)?;
            attention.push(a);
            zs.push(tape.matmul(a, v)?);
        }
        let z = tape.concat_cols(&zs)?;
        let wo = tape.param(store, self.out_proj);
        let o = tape.matmul(z, wo)?;
        let o = self.norm.forward(tape, store, o)?;
        let features = tape.dropout(o, cfg.dropout, training, rng)?;
        Ok(AlignOutput { features, attention })
    }

    pub fn align(
        &self,
        store: &ParamStore,
        x: &Tensor,
        vocab: &VocabEmbedding,
        training: bool,
        rng: &mut Rng,
    ) -> Result<AlignedFeatures> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv, vocab, training, rng)?;
        Ok(AlignedFeatures {
            values: tape.value(out.features).clone(),
        })
    }

    /// Per-head attention weights as a `K × N × V'` tensor (inference mode).
    pub fn attention_map(&self, store: &ParamStore, x: &Tensor, vocab: &VocabEmbedding) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv, vocab, false, &mut rng::seeded(0))?;
        let first = tape.value(out.attention[0]);
        let (n, v) = first.dims2()?;
        let mut data = Vec::with_capacity(self.heads.len() * n * v);
        for a in &out.attention {
            data.extend_from_slice(tape.value(*a).data());
        }
        Tensor::new(vec![self.heads.len(), n, v], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(v: usize, d: usize, heads: usize) -> (ParamStore, VocabEmbedding, AlignmentWeights) {
        let mut store = ParamStore::new();
        let vocab = load_vocab_embeddings(&VocabSource::Random { seed: 3 }, &mut store, v, d).unwrap();
        let cfg = AlignConfig {
            heads,
            embed_dim: d,
            hidden_dim: 6,
            dropout: 0.1,
            scale: AttentionScale::ModelWidth,
            top_m: None,
        };
        let w = AlignmentWeights::new(&mut store, cfg, d, &mut rng::seeded(5)).unwrap();
        (store, vocab, w)
    }

    #[test]
    fn single_word_vocab_gets_all_weight() {
        let (store, vocab, w) = setup(1, 8, 2);
        let x = rng::normal_tensor(&[3, 8], 1.0, &mut rng::seeded(1));
        let a = w.attention_map(&store, &x, &vocab).unwrap();
        assert_eq!(a.shape(), &[2, 3, 1]);
        assert!(a.data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn output_shape_independent_of_vocab_size() {
        for v in [1, 5, 40] {
            let (store, vocab, w) = setup(v, 8, 4);
            let x = rng::normal_tensor(&[3, 8], 1.0, &mut rng::seeded(1));
            let o = w.align(&store, &x, &vocab, true, &mut rng::seeded(2)).unwrap();
            assert_eq!(o.values.shape(), &[3, 6]);
        }
    }

    #[test]
    fn vocab_size_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let id = store.add("lm.tok_emb", Tensor::zeros(&[10, 4]), false).unwrap();
        let err = load_vocab_embeddings(&VocabSource::Backbone(id), &mut store, 12, 4);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn width_mismatch_uses_down_projection() {
        let mut store = ParamStore::new();
        let vocab = load_vocab_embeddings(&VocabSource::Random { seed: 1 }, &mut store, 7, 12).unwrap();
        let cfg = AlignConfig {
            heads: 2,
            embed_dim: 8,
            hidden_dim: 4,
            dropout: 0.0,
            scale: AttentionScale::HeadWidth,
            top_m: None,
        };
        let w = AlignmentWeights::new(&mut store, cfg, 12, &mut rng::seeded(5)).unwrap();
        assert!(w.down_proj.is_some());
        let x = rng::normal_tensor(&[2, 8], 1.0, &mut rng::seeded(1));
        let o = w.align(&store, &x, &vocab, false, &mut rng::seeded(0)).unwrap();
        assert_eq!(o.values.shape(), &[2, 4]);
    }

    #[test]
    fn top_m_restricts_keys() {
        let (mut store, vocab, mut w) = setup(20, 8, 2);
        w.config.top_m = Some(5);
        let x = rng::normal_tensor(&[3, 8], 1.0, &mut rng::seeded(1));
        let a = w.attention_map(&store, &x, &vocab).unwrap();
        assert_eq!(a.shape(), &[2, 3, 5]);
        store.get_mut(vocab.table).value.row_mut(0).fill(0.0);
        assert!(w.vocab_rows(&store, &vocab).unwrap().iter().all(|&r| r != 0));
    }
}
