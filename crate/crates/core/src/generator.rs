//! Deterministic toy attention generator: the frozen "pre-trained model"
//! the adapters hook into.
//!
//! A latent is a grid of tokens. Each block runs single-head self-attention
//! (adapters on Q, K, V) followed by cross-attention against the encoded
//! prompt (adapter on Q only; K and V always use the original weights),
//! with residual connections and a timestep embedding added to every token
//! at the top of the block. No normalization layers, so exact-equality
//! invariants stay achievable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{CharContext, UnifiedAdapter};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, DetRng};
use crate::Mat;

/// Placeholder token that prompt text uses to refer to "the character".
pub const PLACEHOLDER: &str = "<chr>";
/// Reserved token that lossy tokenization maps unknown words onto.
pub const UNKNOWN: &str = "<unk>";

/// Scale of the sinusoidal timestep embedding added to every token.
const TEMB_GAIN: f64 = 0.3;
/// The output mix is anchored at a scaled identity so the stack passes its
/// input latent through, the way a denoising backbone must; the identity
/// share stays below one so the sampler iteration contracts.
const OUT_IDENTITY_GAIN: f64 = 0.9;
/// Scale of the seeded random part of the output mix.
const OUT_NOISE_GAIN: f64 = 0.12;
/// Scale of the frozen self-attention value projections. Attention weights
/// keep their natural scale through Q and K; damping the self value path
/// keeps the frozen stack near the identity map, so the trainable branches
/// dominate what the sampler converges to. The cross-attention value path
/// keeps full gain: it is the channel the learnable character tokens speak
/// through.
const VALUE_GAIN: f64 = 0.2;

/// Architecture of the frozen generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub blocks: usize,
    pub d: usize,
    pub d_text: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub timesteps: usize,
    pub upscale: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { blocks: 2, d: 32, d_text: 16, grid_h: 16, grid_w: 16, timesteps: 1000, upscale: 8 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::Config("arch.blocks must be >= 1".into()));
        }
        for (name, v) in [
            ("arch.d", self.d),
            ("arch.d_text", self.d_text),
            ("arch.grid_h", self.grid_h),
            ("arch.grid_w", self.grid_w),
            ("arch.timesteps", self.timesteps),
            ("arch.upscale", self.upscale),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Token-grid latent, row-major token order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Mat,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, tokens: Mat) -> Self {
        assert_eq!(tokens.rows(), h * w, "token count must match grid");
        Self { h, w, tokens }
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, tokens: Mat::zeros(h * w, d) }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Fixed word-to-id table. The placeholder and unknown tokens always exist.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build(words: &[String]) -> Result<Self> {
        let mut all = vec![PLACEHOLDER.to_string(), UNKNOWN.to_string()];
        for w in words {
            if w != PLACEHOLDER && w != UNKNOWN {
                all.push(w.clone());
            }
        }
        let mut index = BTreeMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn placeholder_id(&self) -> usize {
        self.index[PLACEHOLDER]
    }

    pub fn unknown_id(&self) -> usize {
        self.index[UNKNOWN]
    }

    /// Whitespace tokenization; unknown words are errors.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect()
    }

    /// Whitespace tokenization mapping unknown words to `<unk>`; used for
    /// judge-generated prompts, which are free text.
    pub fn tokenize_lossy(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or_else(|| self.unknown_id()))
            .collect()
    }
}

/// Encoded prompt: one embedding row per token, plus where placeholders sit.
#[derive(Clone, Debug)]
pub struct PromptEncoding {
    pub tokens: Mat,
    pub placeholder_positions: Vec<usize>,
}

/// Per-character learnable token embeddings, one per cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterTokens {
    per_layer: Vec<Vec<f64>>,
}

impl CharacterTokens {
    /// Initialize every layer's embedding from the placeholder's vocab row,
    /// so an untrained character encodes exactly like the bare placeholder.
    pub fn init_from_placeholder(weights: &GeneratorWeights) -> Self {
        let row = weights.vocab_embed.row(weights.placeholder_id).to_vec();
        Self { per_layer: vec![row; weights.arch.blocks] }
    }

    pub fn from_rows(per_layer: Vec<Vec<f64>>) -> Self {
        Self { per_layer }
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn layer(&self, block: usize) -> &[f64] {
        &self.per_layer[block]
    }

    pub fn layer_mut(&mut self, block: usize) -> &mut Vec<f64> {
        &mut self.per_layer[block]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.per_layer
    }
}

/// Frozen weights of one attention block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub wq_s: Mat,
    pub wk_s: Mat,
    pub wv_s: Mat,
    pub wq_c: Mat,
    pub wk_c: Mat,
    pub wv_c: Mat,
}

/// The whole frozen generator: per-block attention weights, output mix,
/// sinusoidal timestep table, and the vocabulary embedding.
#[derive(Clone, Debug)]
pub struct GeneratorWeights {
    pub arch: ArchConfig,
    pub blocks: Vec<BlockWeights>,
    pub w_out: Mat,
    pub temb: Mat,
    pub vocab_embed: Mat,
    placeholder_id: usize,
}

/// Deterministic frozen weights for a story world. Each tensor draws from
/// its own named stream of the world seed, so layouts can change without
/// perturbing unrelated tensors.
pub fn build_generator(
    world_seed: u64,
    arch: &ArchConfig,
    vocab: &Vocab,
) -> Result<GeneratorWeights> {
    arch.validate()?;
    let d = arch.d;
    let dt = arch.d_text;
    let sd = 1.0 / (d as f64).sqrt();
    let sdt = 1.0 / (dt as f64).sqrt();

    let mut blocks = Vec::with_capacity(arch.blocks);
    for b in 0..arch.blocks {
        let draw = |name: &str, rows: usize, cols: usize, stddev: f64| {
            gaussian_matrix(
                &mut DetRng::stream(world_seed, &format!("gen/b{b}/{name}")),
                rows,
                cols,
                stddev,
            )
        };
        blocks.push(BlockWeights {
            wq_s: draw("wq_s", d, d, sd),
            wk_s: draw("wk_s", d, d, sd),
            wv_s: draw("wv_s", d, d, VALUE_GAIN * sd),
            wq_c: draw("wq_c", d, d, sd),
            wk_c: draw("wk_c", dt, d, sdt),
            wv_c: draw("wv_c", dt, d, VALUE_GAIN * sdt),
        });
    }
    let mut w_out: Mat =
        gaussian_matrix(&mut DetRng::stream(world_seed, "gen/w_out"), d, d, OUT_NOISE_GAIN * sd);
    for i in 0..d {
        let v = w_out.get(i, i) + OUT_IDENTITY_GAIN;
        w_out.set(i, i, v);
    }
    let vocab_embed =
        gaussian_matrix(&mut DetRng::stream(world_seed, "gen/vocab"), vocab.len(), dt, 1.0);

    let mut temb = Mat::zeros(arch.timesteps, d);
    for t in 0..arch.timesteps {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = (10000f64).powf(-2.0 * pair / d as f64);
            let angle = t as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            temb.set(t, i, TEMB_GAIN * v);
        }
    }

    Ok(GeneratorWeights {
        arch: arch.clone(),
        blocks,
        w_out,
        temb,
        vocab_embed,
        placeholder_id: vocab.placeholder_id(),
    })
}

impl GeneratorWeights {
    pub fn placeholder_id(&self) -> usize {
        self.placeholder_id
    }

    /// The timestep embedding row for t.
    pub fn temb_row(&self, t: usize) -> &[f64] {
        assert!(t < self.arch.timesteps, "timestep {t} out of range");
        self.temb.row(t)
    }
}

/// Embedding lookup with the placeholder row substituted by the character's
/// embedding for the given cross-attention layer.
pub fn encode_prompt(
    weights: &GeneratorWeights,
    token_ids: &[usize],
    character: Option<&CharacterTokens>,
    layer: usize,
) -> Result<PromptEncoding> {
    if token_ids.is_empty() {
        return Err(Error::Request("prompt must contain at least one token".into()));
    }
    let placeholder_positions: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == weights.placeholder_id)
        .map(|(i, _)| i)
        .collect();

    let mut tokens = Mat::zeros(token_ids.len(), weights.arch.d_text);
    for (i, &id) in token_ids.iter().enumerate() {
        assert!(id < weights.vocab_embed.rows(), "token id out of vocabulary");
        tokens.row_mut(i).copy_from_slice(weights.vocab_embed.row(id));
    }

    if let Some(tokens_for_char) = character {
        if placeholder_positions.len() != 1 {
            return Err(Error::PlaceholderCount(placeholder_positions.len()));
        }
        tokens
            .row_mut(placeholder_positions[0])
            .copy_from_slice(tokens_for_char.layer(layer));
    }
    Ok(PromptEncoding { tokens, placeholder_positions })
}

/// The adapters feeding one block, in placement order. `None` means the
/// site carries no adapter (or the placement map excludes it) and the base
/// weight applies unmodified.
#[derive(Clone, Copy, Default)]
pub struct BlockAdapters<'a> {
    pub self_q: Option<&'a UnifiedAdapter<f64>>,
    pub self_k: Option<&'a UnifiedAdapter<f64>>,
    pub self_v: Option<&'a UnifiedAdapter<f64>>,
    pub cross_q: Option<&'a UnifiedAdapter<f64>>,
}

/// Projection through an optional adapter site.
pub fn project(
    adapter: Option<&UnifiedAdapter<f64>>,
    x: &Mat,
    ctx: CharContext<'_>,
    w_base: &Mat,
) -> Result<Mat> {
    match adapter {
        Some(a) => a.forward(x, ctx, w_base),
        None => x.matmul(w_base),
    }
}

/// softmax(q k^T / sqrt(dim)) v.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, dim: usize) -> Result<Mat> {
    let scale = 1.0 / (dim as f64).sqrt();
    let scores = q.matmul(&k.transpose())?.scale(scale);
    scores.softmax_rows().matmul(v)
}

/// Add the timestep embedding row to every token.
pub fn add_timestep(x: &Mat, temb_row: &[f64]) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &e) in out.row_mut(r).iter_mut().zip(temb_row) {
            *v += e;
        }
    }
    out
}

/// One block: self-attention (adapters on Q/K/V) and cross-attention
/// against `f` (adapter on Q only), each with a residual connection. The
/// timestep embedding is added to the attention inputs only; the residual
/// stream itself stays free of it, so timestep conditioning modulates the
/// attention paths without biasing the output directly.
pub fn block_forward(
    weights: &GeneratorWeights,
    block: usize,
    adapters: BlockAdapters<'_>,
    x: &Mat,
    f: &PromptEncoding,
    ctx: CharContext<'_>,
    t: usize,
) -> Result<Mat> {
    let bw = &weights.blocks[block];
    let d = weights.arch.d;

    let h = add_timestep(x, weights.temb_row(t));
    let q = project(adapters.self_q, &h, ctx, &bw.wq_s)?;
    let k = project(adapters.self_k, &h, ctx, &bw.wk_s)?;
    let v = project(adapters.self_v, &h, ctx, &bw.wv_s)?;
    let x = x.add(&attention(&q, &k, &v, d)?)?;

    let hc = add_timestep(&x, weights.temb_row(t));
    let qc = project(adapters.cross_q, &hc, ctx, &bw.wq_c)?;
    let kc = f.tokens.matmul(&bw.wk_c)?;
    let vc = f.tokens.matmul(&bw.wv_c)?;
    let out = x.add(&attention(&qc, &kc, &vc, d)?)?;
    Ok(out)
}

/// Full stack: blocks in order, then the output mix. `prompts` holds the
/// per-block prompt encoding (cross layers see different placeholder rows).
pub fn predict(
    weights: &GeneratorWeights,
    adapters: &[BlockAdapters<'_>],
    x0: &Mat,
    prompts: &[PromptEncoding],
    ctx: CharContext<'_>,
    t: usize,
) -> Result<Mat> {
    assert_eq!(adapters.len(), weights.arch.blocks);
    assert_eq!(prompts.len(), weights.arch.blocks);
    let mut x = x0.clone();
    for b in 0..weights.arch.blocks {
        x = block_forward(weights, b, adapters[b], &x, &prompts[b], ctx, t)?;
    }
    x.matmul(&weights.w_out)
}
