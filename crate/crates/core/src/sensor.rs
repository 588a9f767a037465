//! Pressure map → token embeddings.
//!
//! The map is cut into non-overlapping `s × s` tiles (zero-padded at the bottom
//! and right edges when `s` does not divide the grid), each tile is optionally
//! perturbed with Gaussian noise during training, linearly projected, offset by a
//! learnable positional table and passed through a pre-norm transformer encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, BlockConfig, LayerNorm, Linear, TransformerBlock};
use crate::pressure::PressureMap;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub noise_std: f64,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub ff_multiplier: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            noise_std: 0.05,
            encoder_depth: 2,
            encoder_heads: 4,
            ff_multiplier: 4,
            activation: Activation::Gelu,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.encoder_depth == 0 || self.ff_multiplier == 0 {
            return Err(Error::config("embedding sizes must be positive"));
        }
        if self.encoder_heads == 0 || !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return Err(Error::config(format!(
                "{} encoder heads do not divide embed_dim {}",
                self.encoder_heads, self.embed_dim
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// `⌈H/s⌉ · ⌈W/s⌉`.
pub fn patch_count(height: usize, width: usize, s: usize) -> usize {
    height.div_ceil(s) * width.div_ceil(s)
}

/// Flattened tiles in row-major tile order, one row of `s²` values per tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub patch_size: usize,
    pub tiles_down: usize,
    pub tiles_across: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reassembles the zero-padded map, `(rows, cols, values)`.
    pub fn unpatchify(&self) -> (usize, usize, Vec<f64>) {
        let s = self.patch_size;
        let (rows, cols) = (self.tiles_down * s, self.tiles_across * s);
        let mut out = vec![0.0; rows * cols];
        for ty in 0..self.tiles_down {
            for tx in 0..self.tiles_across {
                let patch = self.patches.row(ty * self.tiles_across + tx);
                for dy in 0..s {
                    for dx in 0..s {
                        out[(ty * s + dy) * cols + tx * s + dx] = patch[dy * s + dx];
                    }
                }
            }
        }
        (rows, cols, out)
    }
}

pub fn patchify(map: &PressureMap, s: usize) -> Result<PatchGrid> {
    let (h, w) = (map.height(), map.width());
    if s == 0 || s > h.min(w) {
        return Err(Error::config(format!(
            "patch size {s} must lie in 1..={} for a {h}x{w} map",
            h.min(w)
        )));
    }
    let (down, across) = (h.div_ceil(s), w.div_ceil(s));
    let mut data = Vec::with_capacity(down * across * s * s);
    for ty in 0..down {
        for tx in 0..across {
            for dy in 0..s {
                for dx in 0..s {
                    let (r, c) = (ty * s + dy, tx * s + dx);
                    data.push(if r < h && c < w { map.at(r, c) } else { 0.0 });
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![down * across, s * s], data)?,
        patch_size: s,
        tiles_down: down,
        tiles_across: across,
    })
}

/// Adds `N(0, σ²)` noise to every patch element during training. Values are not
/// re-clamped.
pub fn perturb(grid: &PatchGrid, sigma: f64, training: bool, rng: &mut Rng) -> Result<PatchGrid> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise std {sigma} must be non-negative")));
    }
    if !training || sigma == 0.0 {
        return Ok(grid.clone());
    }
    let noise = rng::normal_vec(grid.patches.len(), sigma, rng);
    let mut out = grid.clone();
    out.patches
        .data_mut()
        .iter_mut()
        .zip(noise)
        .for_each(|(v, n)| *v += n);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SensorEncoder {
    pub config: EmbeddingConfig,
    pub n_patches: usize,
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl SensorEncoder {
    /// Registers `sensor.*` parameters for a grid of `n_patches` tiles.
    pub fn new(store: &mut ParamStore, config: EmbeddingConfig, n_patches: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let s2 = config.patch_size * config.patch_size;
        let d = config.embed_dim;
        let patch_proj = Linear::new(store, "sensor.patch_proj", s2, d, true, rng)?;
        let pos = store.add("sensor.pos", rng::normal_tensor(&[n_patches, d], 0.02, rng), true)?;
        let block_cfg = BlockConfig {
            dim: d,
            heads: config.encoder_heads,
            ff_multiplier: config.ff_multiplier,
            causal: false,
            activation: config.activation,
        };
        let blocks = (0..config.encoder_depth)
            .map(|i| TransformerBlock::new(store, &format!("sensor.layer{i}"), block_cfg, rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, "sensor.final_norm", d)?;
        Ok(Self {
            config,
            n_patches,
            patch_proj,
            pos,
            blocks,
            final_norm,
        })
    }

    /// `eᵢ + E_pos,ᵢ` for every patch, before the transformer.
    pub fn tokens(&self, tape: &mut Tape, store: &ParamStore, grid: &PatchGrid) -> Result<Var> {
        if grid.len() != self.n_patches {
            return Err(Error::shape(format!(
                "grid has {} patches, positional table has {}",
                grid.len(),
                self.n_patches
            )));
        }
        if grid.patch_size != self.config.patch_size {
            return Err(Error::shape(format!(
                "grid patch size {} differs from encoder patch size {}",
                grid.patch_size, self.config.patch_size
            )));
        }
        let x = tape.constant(grid.patches.clone());
        let e = self.patch_proj.forward(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        tape.add(e, pos)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, grid: &PatchGrid) -> Result<Var> {
        let mut x = self.tokens(tape, store, grid)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        self.final_norm.forward(tape, store, x)
    }

    /// Inference-mode embedding (no perturbation), `N × d`.
    pub fn embed(&self, store: &ParamStore, grid: &PatchGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = self.forward(&mut tape, store, grid)?;
        Ok(tape.value(x).clone())
    }
}
