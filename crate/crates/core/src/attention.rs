//! The sequence conditioner: maps a (partially zeroed) frame prefix to a
//! single conditioning volume `c`.
//!
//! Pipeline: non-overlapping 4D patch embedding plus learned temporal and
//! spatial positions; a temporal encoder whose blocks attend along the frame
//! axis per spatial site and then fold 2×2×2 site blocks into one token; a
//! spatial decoder whose blocks attend across sites per frame and then
//! upsample ×2; and a projection that stacks frames into channels,
//! upsamples to voxel resolution, and convolves down to one channel.

use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tape, Tensor, Var};
use crate::network::layers::{AttentionBlock, LayerNorm, Linear};
use crate::network::params::{ParamId, ParameterStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    /// Blocks per stage (`N`).
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// Spatial patch `(w, h, d)`; the temporal window is fixed at 1.
    pub window: [usize; 3],
    /// Longest prefix the temporal position table supports.
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            blocks: 2,
            dim: 32,
            heads: 4,
            window: [4, 4, 2],
            max_len: 12,
            mlp_ratio: 2,
        }
    }
}

impl AttnConfig {
    /// Token grid for frames of `extents`, after checking every divisibility
    /// requirement.
    pub fn token_grid(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        if self.blocks == 0 || self.dim == 0 || self.heads == 0 || self.max_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("attention sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        let mut grid = [0; 3];
        for a in 0..3 {
            let (e, w) = (extents[a], self.window[a]);
            if w == 0 || e % w != 0 {
                return Err(Error::Config(format!(
                    "extent {e} on axis {a} is not divisible by window {w}"
                )));
            }
            grid[a] = e / w;
            if grid[a] % (1 << self.blocks) != 0 {
                return Err(Error::Config(format!(
                    "token extent {} on axis {a} is not divisible by 2^{}",
                    grid[a], self.blocks
                )));
            }
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug)]
struct Embedding {
    weight: ParamId,
    bias: ParamId,
    temporal: ParamId,
    spatial: ParamId,
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    cfg: AttnConfig,
    extents: [usize; 3],
    grid: [usize; 3],
    embed: Embedding,
    encoder: Vec<AttentionBlock>,
    reduce: Vec<Linear>,
    decoder: Vec<AttentionBlock>,
    proj_norm: LayerNorm,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

/// Encoder output: the reduced stack plus the per-level tokens the decoder
/// adds back after each upsampling.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[sites, L', dim]` at the coarsest grid.
    pub tokens: Var,
    /// Per level `ℓ`, `[sites_ℓ, L', dim]` after block `ℓ`, before reduction.
    pub skips: Vec<Var>,
}

impl Conditioner {
    /// Register all conditioner parameters under `attn.` in `store`.
    pub fn new(cfg: AttnConfig, extents: [usize; 3], store: &mut ParameterStore, rng: &mut Rng) -> Result<Self> {
        let grid = cfg.token_grid(extents)?;
        let dim = cfg.dim;
        let [w, h, d] = cfg.window;
        let sites = grid.iter().product::<usize>();
        let fan_in = w * h * d;
        let embed = Embedding {
            weight: store.insert(
                "attn.embed.weight",
                Tensor::randn(&[dim, 1, 1, w, h, d], rng).scale(1.0 / (fan_in as f64).sqrt()),
            )?,
            bias: store.insert("attn.embed.bias", Tensor::zeros(&[dim]))?,
            temporal: store.insert("attn.pos.temporal", Tensor::randn(&[cfg.max_len, dim], rng).scale(0.02))?,
            spatial: store.insert("attn.pos.spatial", Tensor::randn(&[sites, dim], rng).scale(0.02))?,
        };
        let mut encoder = Vec::new();
        let mut reduce = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..cfg.blocks {
            encoder.push(AttentionBlock::new(store, &format!("attn.enc.{l}"), dim, cfg.heads, cfg.mlp_ratio, rng)?);
            reduce.push(Linear::new(store, &format!("attn.enc.{l}.reduce"), 8 * dim, dim, rng)?);
        }
        for l in 0..cfg.blocks {
            decoder.push(AttentionBlock::new(store, &format!("attn.dec.{l}"), dim, cfg.heads, cfg.mlp_ratio, rng)?);
        }
        let proj_norm = LayerNorm::new(store, "attn.proj.norm", dim)?;
        let channels = cfg.max_len * dim;
        let proj_weight = store.insert(
            "attn.proj.weight",
            Tensor::randn(&[1, channels, 3, 3, 3], rng).scale(1.0 / ((channels * 27) as f64).sqrt()),
        )?;
        let proj_bias = store.insert("attn.proj.bias", Tensor::zeros(&[1]))?;
        Ok(Conditioner {
            cfg,
            extents,
            grid,
            embed,
            encoder,
            reduce,
            decoder,
            proj_norm,
            proj_weight,
            proj_bias,
        })
    }

    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn token_grid(&self) -> [usize; 3] {
        self.grid
    }

    /// Ids of every parameter the conditioner owns.
    pub fn param_ids(&self, store: &ParameterStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(n, _)| n.starts_with("attn."))
            .map(|(n, _)| store.id(n).expect("listed name"))
            .collect()
    }

    /// The projection bias of the patch embedding (zeroed in some tests).
    pub fn embed_bias(&self) -> ParamId {
        self.embed.bias
    }

    fn grid_at(&self, level: usize) -> [usize; 3] {
        self.grid.map(|g| g >> level)
    }

    /// Frames `[W, H, D]` → tokens `[L', sites, dim]` (sites in x-major
    /// order over the token grid).
    pub fn embed_tokens(&self, tape: &mut Tape, store: &ParameterStore, seq: &[Tensor]) -> Result<Var> {
        let len = seq.len();
        if len == 0 || len > self.cfg.max_len {
            return Err(Error::invalid(
                "embed_tokens",
                format!("prefix length {len} outside 1..={}", self.cfg.max_len),
            ));
        }
        for f in seq {
            if f.shape() != self.extents.as_slice() {
                return Err(Error::shape("embed_tokens", &self.extents, f.shape()));
            }
        }
        let [x, y, z] = self.extents;
        let frames = Tensor::stack(seq)?.reshape(&[len, 1, x, y, z])?;
        let frames = tape.constant(frames);
        let [w, h, d] = self.cfg.window;
        let weight = tape.param(store, self.embed.weight);
        let tokens = tape.conv4d(frames, weight, [1, w, h, d])?;
        let sites = self.grid.iter().product::<usize>();
        let dim = self.cfg.dim;
        let tokens = tape.reshape(tokens, &[len, dim, sites])?;
        let tokens = tape.permute(tokens, &[0, 2, 1])?;
        let bias = tape.param(store, self.embed.bias);
        let tokens = tape.bias_add(tokens, bias, 2)?;

        let table = tape.param(store, self.embed.temporal);
        let pos_t = tape.narrow(table, 0, 0, len)?;
        let pos_t = tape.reshape(pos_t, &[len, 1, dim])?;
        let pos_t = tape.expand(pos_t, &[len, sites, dim])?;
        let table = tape.param(store, self.embed.spatial);
        let pos_s = tape.reshape(table, &[1, sites, dim])?;
        let pos_s = tape.expand(pos_s, &[len, sites, dim])?;
        let tokens = tape.add(tokens, pos_t)?;
        tape.add(tokens, pos_s)
    }

    /// Encoder block `level` alone: attention along the frame axis of a
    /// `[sites, L', dim]` stack.
    pub fn temporal_block(&self, tape: &mut Tape, store: &ParameterStore, x: Var, level: usize) -> Result<Var> {
        self.encoder[level].forward(tape, store, x)
    }

    /// Decoder block `level` alone: attention across sites of a
    /// `[L', sites, dim]` stack.
    pub fn spatial_block(&self, tape: &mut Tape, store: &ParameterStore, x: Var, level: usize) -> Result<Var> {
        self.decoder[level].forward(tape, store, x)
    }

    /// Fold each 2×2×2 block of sites into one token: `[sites, L', dim]` at
    /// grid `g` → `[sites/8, L', dim]` at grid `g/2`.
    fn reduce_sites(&self, tape: &mut Tape, store: &ParameterStore, x: Var, level: usize) -> Result<Var> {
        let [gx, gy, gz] = self.grid_at(level);
        let len = tape.shape(x)[1];
        let dim = self.cfg.dim;
        let x = tape.reshape(x, &[gx / 2, 2, gy / 2, 2, gz / 2, 2, len, dim])?;
        let x = tape.permute(x, &[0, 2, 4, 6, 1, 3, 5, 7])?;
        let x = tape.reshape(x, &[gx * gy * gz / 8, len, 8 * dim])?;
        self.reduce[level].forward(tape, store, x)
    }

    /// Tokens `[L', sites, dim]` → coarse stack `[sites/8^N, L', dim]`.
    pub fn temporal_encoder(&self, tape: &mut Tape, store: &ParameterStore, tokens: Var) -> Result<Encoded> {
        let mut x = tape.permute(tokens, &[1, 0, 2])?;
        let mut skips = Vec::with_capacity(self.cfg.blocks);
        for level in 0..self.cfg.blocks {
            x = self.temporal_block(tape, store, x, level)?;
            skips.push(x);
            x = self.reduce_sites(tape, store, x, level)?;
        }
        Ok(Encoded { tokens: x, skips })
    }

    /// Coarse stack → tokens `[L', sites, dim]` on the full token grid.
    pub fn spatial_decoder(&self, tape: &mut Tape, store: &ParameterStore, enc: &Encoded) -> Result<Var> {
        let blocks = self.cfg.blocks;
        let dim = self.cfg.dim;
        let mut x = tape.permute(enc.tokens, &[1, 0, 2])?;
        let len = tape.shape(x)[0];
        for level in 0..blocks {
            x = self.spatial_block(tape, store, x, level)?;
            let [gx, gy, gz] = self.grid_at(blocks - level);
            let up = tape.reshape(x, &[len, gx, gy, gz, dim])?;
            let up = tape.upsample(up, &[1, 2, 2, 2, 1])?;
            let up = tape.reshape(up, &[len, 8 * gx * gy * gz, dim])?;
            let skip = tape.permute(enc.skips[blocks - 1 - level], &[1, 0, 2])?;
            x = tape.add(up, skip)?;
        }
        Ok(x)
    }

    /// Tokens `[L', sites, dim]` → conditioning volume `[W, H, D]`: layer norm,
    /// unflatten, nearest upsampling by the patch window, 3D convolution.
    pub fn project_signal(&self, tape: &mut Tape, store: &ParameterStore, dec: Var) -> Result<Var> {
        let len = tape.shape(dec)[0];
        let dim = self.cfg.dim;
        let [gx, gy, gz] = self.grid;
        let dec = self.proj_norm.forward(tape, store, dec)?;
        let x = tape.reshape(dec, &[len, gx, gy, gz, dim])?;
        let x = tape.permute(x, &[0, 4, 1, 2, 3])?;
        let x = tape.reshape(x, &[len * dim, gx, gy, gz])?;
        let [w, h, d] = self.cfg.window;
        let x = tape.upsample(x, &[1, w, h, d])?;
        let weight = tape.param(store, self.proj_weight);
        let weight = tape.narrow(weight, 1, 0, len * dim)?;
        let y = tape.conv3d(x, weight, [1; 3], [1; 3])?;
        let bias = tape.param(store, self.proj_bias);
        let y = tape.bias_add(y, bias, 0)?;
        tape.reshape(y, &self.extents)
    }

    /// `c = 𝒜_θ(seq)`, recorded on `tape`.
    pub fn condition(&self, tape: &mut Tape, store: &ParameterStore, seq: &[Tensor]) -> Result<Var> {
        let tokens = self.embed_tokens(tape, store, seq)?;
        let enc = self.temporal_encoder(tape, store, tokens)?;
        let dec = self.spatial_decoder(tape, store, &enc)?;
        self.project_signal(tape, store, dec)
    }

    /// `c` as a plain tensor, without keeping the tape.
    pub fn condition_value(&self, store: &ParameterStore, seq: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = self.condition(&mut tape, store, seq)?;
        Ok(tape.value(c).clone())
    }
}
