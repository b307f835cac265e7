//! Frozen transformer encoder over image patches with trainable low-rank
//! adapters on the query, key and value projections.
//!
//! Every base weight (patch projection, class token, positional table,
//! attention and MLP matrices, layer norms) is registered frozen. The only
//! trainable encoder parameters are the adapter pairs `(A, B)`, so the number
//! of learnable encoder weights is `blocks · 3 · r · (d_in + d_out)`.
//!
//! A LoRA projection computes `x·Wᵀ + α·(x·Aᵀ)·Bᵀ`. `B` starts at zero, which
//! makes a fresh adapter an exact no-op.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Architecture of the encoder. Stored as TOML alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub rank: usize,
    pub patch: usize,
    /// Side of the square 3-channel input image.
    pub side: usize,
    /// Adapter output scale α.
    #[serde(default = "one")]
    pub lora_scale: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Standard deviation of the Gaussian used for adapter `A`.
    #[serde(default = "default_lora_std")]
    pub lora_init_std: f64,
}

fn one() -> f64 {
    1.0
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_lora_std() -> f64 {
    0.02
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// Small configuration that trains in seconds.
    pub fn desk() -> Self {
        Self {
            blocks: 2,
            dim: 64,
            heads: 4,
            rank: 4,
            patch: 16,
            side: 64,
            lora_scale: 1.0,
            mlp_ratio: 4,
            lora_init_std: 0.02,
        }
    }

    /// ViT-Base/16 at a 256-pixel input, rank 8.
    pub fn paper() -> Self {
        Self {
            blocks: 12,
            dim: 768,
            heads: 12,
            rank: 8,
            patch: 16,
            side: 256,
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_patches(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("encoder needs at least one block"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || !self.side.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image side {} not divisible by patch size {}",
                self.side, self.patch
            )));
        }
        check_rank(self.rank, self.dim, self.dim)
    }

    /// Closed-form adapter parameter count for Q, K and V in every block.
    pub fn lora_param_count(&self) -> usize {
        lora_param_count(self.blocks, self.dim, self.dim, self.rank)
    }
}

/// `blocks · 3 · rank · (d_in + d_out)`: adapters on Q, K and V.
pub fn lora_param_count(blocks: usize, d_in: usize, d_out: usize, rank: usize) -> usize {
    blocks * 3 * rank * (d_in + d_out)
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(Error::config(format!(
            "LoRA rank {rank} must be in [1, min({d_in}, {d_out}))"
        )));
    }
    Ok(())
}

/// Trainable low-rank pair attached to one frozen `d_out×d_in` projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    /// `r×d_in`, Gaussian-initialized.
    pub a: ParamId,
    /// `d_out×r`, zero-initialized.
    pub b: ParamId,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, d_in, d_out)?;
        let a = store.add(format!("{name}.lora_a"), Tensor::randn(&[rank, d_in], init_std, rng), true);
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[d_out, rank]), true);
        Ok(Self { rank, a, b })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.a).len() + store.value(self.b).len()
    }
}

/// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ`. Gradients reach `A` and `B`; `W` is whatever
/// the tape says it is (frozen for every encoder projection).
pub fn lora_linear(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let (d_out, d_in) = tape.value(w).dims2()?;
    let (rank, a_in) = tape.value(a).dims2()?;
    let (b_out, b_rank) = tape.value(b).dims2()?;
    if a_in != d_in || b_out != d_out || b_rank != rank {
        return Err(Error::Dimension {
            op: "lora_linear",
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(b).shape().to_vec(),
        });
    }
    check_rank(rank, d_in, d_out)?;
    let base = tape.linear(x, w)?;
    let down = tape.linear(x, a)?;
    let up = tape.linear(down, b)?;
    let up = tape.scale(up, scale);
    tape.add(base, up)
}

/// Patch projection, class token and positional table (all frozen).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub side: usize,
    /// `d×(3·P·P)`
    pub proj: ParamId,
    /// `(N+1)×d`
    pub pos: ParamId,
    /// `d`
    pub cls: ParamId,
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VitConfig, rng: &mut R) -> Self {
        let fan_in = 3 * cfg.patch * cfg.patch;
        let proj = store.add(
            "vit.patch.proj",
            Tensor::randn(&[cfg.dim, fan_in], (1.0 / fan_in as f64).sqrt(), rng),
            false,
        );
        let pos = store.add("vit.patch.pos", Tensor::randn(&[cfg.tokens(), cfg.dim], 0.02, rng), false);
        let cls = store.add("vit.patch.cls", Tensor::randn(&[cfg.dim], 0.02, rng), false);
        Self {
            patch: cfg.patch,
            side: cfg.side,
            proj,
            pos,
            cls,
        }
    }
}

/// Index map that rearranges a `3×S×S` image into `N` rows of flattened
/// `P×P` patches (channel-major within a patch, patches in raster order).
pub fn patch_index(side: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(Error::config(format!(
            "image side {side} not divisible by patch size {patch}"
        )));
    }
    let grid = side / patch;
    let mut index = Vec::with_capacity(3 * side * side);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        index.push((c * side + gy * patch + py) * side + gx * patch + px);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Turns a `3×S×S` image into `(N+1)×d` tokens: the class token followed by
/// projected patches, plus positional embeddings.
pub fn patchify(tape: &mut Tape, params: &Bound, image: Var, emb: &PatchEmbedding) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [3, emb.side, emb.side] {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: shape,
            rhs: vec![3, emb.side, emb.side],
        });
    }
    let n = (emb.side / emb.patch).pow(2);
    let width = 3 * emb.patch * emb.patch;
    let rows = tape.gather(image, patch_index(emb.side, emb.patch)?, &[n, width])?;
    let projected = tape.linear(rows, params[emb.proj])?;
    let d = tape.value(params[emb.cls]).len();
    let cls = tape.reshape(params[emb.cls], &[1, d])?;
    let tokens = tape.concat(&[cls, projected], 0)?;
    tape.add(tokens, params[emb.pos])
}

/// One pre-norm transformer block with adapters on Q, K and V.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub heads: usize,
    pub lora_scale: f64,
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub lora_q: LoraAdapter,
    pub lora_k: LoraAdapter,
    pub lora_v: LoraAdapter,
    pub ln2: (ParamId, ParamId),
    pub mlp_in: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &VitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hidden = cfg.mlp_ratio * d;
        let std_d = (1.0 / d as f64).sqrt();
        let std_h = (1.0 / hidden as f64).sqrt();
        let mut frozen = |suffix: &str, value: Tensor| store.add(format!("{name}.{suffix}"), value, false);
        let ln1 = (frozen("ln1.gain", Tensor::ones(&[d])), frozen("ln1.bias", Tensor::zeros(&[d])));
        let wq = frozen("attn.q", Tensor::randn(&[d, d], std_d, rng));
        let wk = frozen("attn.k", Tensor::randn(&[d, d], std_d, rng));
        let wv = frozen("attn.v", Tensor::randn(&[d, d], std_d, rng));
        let wo = frozen("attn.o", Tensor::randn(&[d, d], std_d, rng));
        let ln2 = (frozen("ln2.gain", Tensor::ones(&[d])), frozen("ln2.bias", Tensor::zeros(&[d])));
        let mlp_in = (
            frozen("mlp.in.weight", Tensor::randn(&[hidden, d], std_d, rng)),
            frozen("mlp.in.bias", Tensor::zeros(&[hidden])),
        );
        let mlp_out = (
            frozen("mlp.out.weight", Tensor::randn(&[d, hidden], std_h, rng)),
            frozen("mlp.out.bias", Tensor::zeros(&[d])),
        );
        let (r, s) = (cfg.rank, cfg.lora_init_std);
        let lora_q = LoraAdapter::new(store, &format!("{name}.attn.q"), d, d, r, s, rng)?;
        let lora_k = LoraAdapter::new(store, &format!("{name}.attn.k"), d, d, r, s, rng)?;
        let lora_v = LoraAdapter::new(store, &format!("{name}.attn.v"), d, d, r, s, rng)?;
        Ok(Self {
            heads: cfg.heads,
            lora_scale: cfg.lora_scale,
            ln1,
            wq,
            wk,
            wv,
            wo,
            lora_q,
            lora_k,
            lora_v,
            ln2,
            mlp_in,
            mlp_out,
        })
    }

    pub fn adapters(&self) -> [&LoraAdapter; 3] {
        [&self.lora_q, &self.lora_k, &self.lora_v]
    }
}

/// Output of one attention layer plus the per-head attention matrices.
pub struct AttentionTrace {
    pub output: Var,
    /// One `T×T` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention over LoRA-adapted Q, K, V, with
/// a frozen output projection.
pub fn multihead_attention_lora(tape: &mut Tape, params: &Bound, tokens: Var, block: &EncoderBlock) -> Result<Var> {
    attention_traced(tape, params, tokens, block).map(|t| t.output)
}

pub fn attention_traced(tape: &mut Tape, params: &Bound, tokens: Var, block: &EncoderBlock) -> Result<AttentionTrace> {
    let (t, d) = tape.value(tokens).dims2()?;
    if t == 0 || tape.value(tokens).ndim() != 2 {
        return Err(Error::input("attention needs a non-empty T×d token matrix"));
    }
    let s = block.lora_scale;
    let proj = |tape: &mut Tape, w: ParamId, ad: &LoraAdapter| {
        lora_linear(tape, tokens, params[w], params[ad.a], params[ad.b], s)
    };
    let q = proj(tape, block.wq, &block.lora_q)?;
    let k = proj(tape, block.wk, &block.lora_k)?;
    let v = proj(tape, block.wv, &block.lora_v)?;

    let dh = d / block.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    let mut weights = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let scores = tape.linear(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = tape.concat(&heads, 1)?;
    let output = tape.linear(merged, params[block.wo])?;
    Ok(AttentionTrace { output, weights })
}

/// `x + Attn(LN(x))` then `x + MLP(LN(x))`.
pub fn encoder_block_forward(tape: &mut Tape, params: &Bound, x: Var, block: &EncoderBlock) -> Result<Var> {
    let normed = tape.layer_norm(x, params[block.ln1.0], params[block.ln1.1], LN_EPS)?;
    let attn = multihead_attention_lora(tape, params, normed, block)?;
    let x = tape.add(x, attn)?;
    let normed = tape.layer_norm(x, params[block.ln2.0], params[block.ln2.1], LN_EPS)?;
    let hidden = tape.linear(normed, params[block.mlp_in.0])?;
    let hidden = tape.add_row(hidden, params[block.mlp_in.1])?;
    let hidden = tape.gelu(hidden);
    let out = tape.linear(hidden, params[block.mlp_out.0])?;
    let out = tape.add_row(out, params[block.mlp_out.1])?;
    tape.add(x, out)
}

/// Runs `tokens` through every block in order.
pub fn encoder_forward(tape: &mut Tape, params: &Bound, tokens: Var, blocks: &[EncoderBlock]) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::config("encoder needs at least one block"));
    }
    blocks
        .iter()
        .try_fold(tokens, |x, block| encoder_block_forward(tape, params, x, block))
}

/// Patch embedding, encoder blocks and a final frozen layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    pub embedding: PatchEmbedding,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: (ParamId, ParamId),
}

impl VitEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embedding = PatchEmbedding::new(store, cfg, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, &format!("vit.block{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = (
            store.add("vit.norm.gain", Tensor::ones(&[cfg.dim]), false),
            store.add("vit.norm.bias", Tensor::zeros(&[cfg.dim]), false),
        );
        Ok(Self {
            cfg: cfg.clone(),
            embedding,
            blocks,
            final_norm,
        })
    }

    /// `3×S×S` image to normalized `(N+1)×d` tokens.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let tokens = patchify(tape, params, image, &self.embedding)?;
        let x = encoder_forward(tape, params, tokens, &self.blocks)?;
        tape.layer_norm(x, params[self.final_norm.0], params[self.final_norm.1], LN_EPS)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| b.adapters())
    }
}

/// Trainable parameter count of a store with per-group subtotals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    /// `(group, trainable, frozen)` in first-seen order.
    pub groups: Vec<(String, usize, usize)>,
}

/// Group key: the leading path segment, with adapters split out as
/// `<segment>.lora`.
fn group_of(name: &str) -> String {
    let top = name.split('.').next().unwrap_or(name);
    if name.contains(".lora_") {
        format!("{top}.lora")
    } else {
        top.to_string()
    }
}

/// Exact count of parameters that receive gradients, grouped by module.
pub fn count_trainable_params(store: &ParamStore) -> ParamCount {
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for (_, p) in store.iter() {
        let key = group_of(&p.name);
        let slot = match groups.iter().position(|g| g.0 == key) {
            Some(i) => &mut groups[i],
            None => {
                groups.push((key, 0, 0));
                groups.last_mut().expect("just pushed")
            }
        };
        if p.trainable {
            slot.1 += p.value.len();
        } else {
            slot.2 += p.value.len();
        }
    }
    ParamCount {
        trainable: store.trainable_count(),
        frozen: store.frozen_count(),
        groups,
    }
}
