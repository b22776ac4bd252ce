//! Character-aware region-focus sampling.
//!
//! Each denoise step keeps two streams per attention layer: a global stream
//! evolved purely with the base weights and the global prompt (it never
//! reads adapter state), and a merged stream whose masked token rows are
//! replaced by per-character local passes. Local self-attention draws its
//! queries from the region's tokens; keys and values come from the region
//! alone while t >= T_theta and from the full grid below it. Local
//! cross-attention reads the character prompt, queries through the adapter,
//! keys and values through the original weights. Tokens outside every
//! region therefore match a region-free run bit for bit.

use serde::{Deserialize, Serialize};

use crate::adapter::CharContext;
use crate::error::{Error, Result};
use crate::generator::{add_timestep, attention, project, LatentGrid, PromptEncoding};
use crate::linalg::{gaussian_matrix, DetRng};
use crate::world::StoryWorld;
use crate::Mat;

/// Endpoints of the linear step-size schedule.
const ETA_MIN: f64 = 0.20;
const ETA_MAX: f64 = 0.50;

/// Normalized bounding box (w_s, h_s, w_e, h_e), all in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub ws: f64,
    pub hs: f64,
    pub we: f64,
    pub he: f64,
}

impl Bbox {
    pub fn new(ws: f64, hs: f64, we: f64, he: f64) -> Self {
        Self { ws, hs, we, he }
    }

    pub fn full() -> Self {
        Self { ws: 0.0, hs: 0.0, we: 1.0, he: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.ws)
            && (0.0..=1.0).contains(&self.we)
            && (0.0..=1.0).contains(&self.hs)
            && (0.0..=1.0).contains(&self.he)
            && self.ws < self.we
            && self.hs < self.he;
        if ok {
            Ok(())
        } else {
            Err(Error::Request(format!(
                "invalid bbox ({}, {}, {}, {}): need 0 <= w_s < w_e <= 1 and 0 <= h_s < h_e <= 1",
                self.ws, self.hs, self.we, self.he
            )))
        }
    }
}

/// One character's region: who, where, and the region prompt.
#[derive(Clone, Debug)]
pub struct RegionSpec {
    pub character_id: String,
    pub bbox: Bbox,
    pub prompt: Vec<usize>,
}

/// A full render job.
#[derive(Clone, Debug)]
pub struct RenderRequest {
    pub global_prompt: Vec<usize>,
    pub regions: Vec<RegionSpec>,
    pub steps: usize,
    pub t_theta: usize,
    pub seed: u64,
}

/// Binary token mask over the grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    bits: Vec<bool>,
    indices: Vec<usize>,
}

impl TokenMask {
    pub fn contains(&self, token: usize) -> bool {
        self.bits[token]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Token (r, c) is masked iff c in [floor(w_s w), ceil(w_e w)) and
/// r in [floor(h_s h), ceil(h_e h)). The ceil rule keeps tiny boxes from
/// producing empty masks.
pub fn bbox_to_mask(bbox: &Bbox, h: usize, w: usize) -> Result<TokenMask> {
    bbox.validate()?;
    let c0 = (bbox.ws * w as f64).floor() as usize;
    let c1 = ((bbox.we * w as f64).ceil() as usize).min(w);
    let r0 = (bbox.hs * h as f64).floor() as usize;
    let r1 = ((bbox.he * h as f64).ceil() as usize).min(h);
    let mut bits = vec![false; h * w];
    let mut indices = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            bits[r * w + c] = true;
            indices.push(r * w + c);
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptyMask { ws: bbox.ws, hs: bbox.hs, we: bbox.we, he: bbox.he, h, w });
    }
    Ok(TokenMask { bits, indices })
}

/// m boxes distributed evenly along the horizontal axis, with optional
/// seeded jitter of at most 0.05 per edge, clipped to stay valid.
pub fn default_layout(m: usize, mut jitter: Option<&mut DetRng>) -> Vec<Bbox> {
    assert!(m >= 1, "layout needs at least one region");
    let mut boxes = Vec::with_capacity(m);
    for i in 0..m {
        let mut b = Bbox::new(i as f64 / m as f64, 0.0, (i + 1) as f64 / m as f64, 1.0);
        if let Some(rng) = jitter.as_deref_mut() {
            let mut nudge = |v: f64| (v + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
            b.ws = nudge(b.ws);
            b.we = nudge(b.we);
            b.hs = nudge(b.hs);
            b.he = nudge(b.he);
            // Keep the box non-degenerate after clipping.
            const MIN_EXTENT: f64 = 0.02;
            if b.we < b.ws + MIN_EXTENT {
                b.we = (b.ws + MIN_EXTENT).min(1.0);
                b.ws = b.we - MIN_EXTENT;
            }
            if b.he < b.hs + MIN_EXTENT {
                b.he = (b.hs + MIN_EXTENT).min(1.0);
                b.hs = b.he - MIN_EXTENT;
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Rendered latent plus its P6 image bytes.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub latent: LatentGrid,
    pub ppm: Vec<u8>,
}

/// Descending linear timestep schedule over `steps` steps, from the top of
/// the table down to 0.
pub fn timestep_schedule(steps: usize, timesteps: usize) -> Vec<usize> {
    let t_max = timesteps - 1;
    if steps == 1 {
        return vec![t_max];
    }
    (0..steps)
        .map(|s| ((t_max as f64) * (steps - 1 - s) as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}

/// Update step size eta(t), linear in t between its endpoints.
pub fn step_size(t: usize, timesteps: usize) -> f64 {
    let t_max = (timesteps - 1).max(1);
    ETA_MIN + (ETA_MAX - ETA_MIN) * t as f64 / t_max as f64
}

struct RegionCtx<'a> {
    spec: &'a RegionSpec,
    mask: TokenMask,
    /// Per-block encodings of the region prompt with the character's
    /// per-layer embedding substituted.
    prompts: Vec<PromptEncoding>,
}

fn validate_request<'a>(
    world: &StoryWorld,
    request: &'a RenderRequest,
) -> Result<Vec<RegionCtx<'a>>> {
    let arch = &world.weights.arch;
    if request.steps < 1 {
        return Err(Error::Request("steps must be >= 1".into()));
    }
    if request.t_theta > arch.timesteps {
        return Err(Error::Request(format!(
            "t_theta {} exceeds the timestep range {}",
            request.t_theta, arch.timesteps
        )));
    }
    let mut regions = Vec::with_capacity(request.regions.len());
    for spec in &request.regions {
        if !world.has_character(&spec.character_id) {
            return Err(Error::UnknownCharacter(spec.character_id.clone()));
        }
        let mask = bbox_to_mask(&spec.bbox, arch.grid_h, arch.grid_w)?;
        let prompts = world.prompt_encodings(&spec.prompt, Some(&spec.character_id))?;
        regions.push(RegionCtx { spec, mask, prompts });
    }
    for i in 0..regions.len() {
        for j in (i + 1)..regions.len() {
            if regions[i].mask.indices().iter().any(|&t| regions[j].mask.contains(t)) {
                log::warn!(
                    "regions '{}' and '{}' overlap; later regions overwrite earlier ones",
                    regions[i].spec.character_id,
                    regions[j].spec.character_id
                );
            }
        }
    }
    Ok(regions)
}

/// The two latent trajectories of an in-progress render: the global stream,
/// which region passes never touch (it is the zero-region run, bit for
/// bit), and the merged stream whose masked rows carry the local passes.
/// Keeping both across steps is what makes out-of-region tokens of a full
/// render bitwise equal to the region-free render.
#[derive(Clone, Debug)]
pub struct DenoiseState {
    pub global: Mat,
    pub merged: Mat,
}

impl DenoiseState {
    pub fn from_latent(tokens: Mat) -> Self {
        Self { global: tokens.clone(), merged: tokens }
    }
}

/// The model output for one denoise step on a single latent: global pass
/// with region-wise replacement, then the output mix. For multi-step
/// renders use [`render`], which keeps the global stream isolated across
/// steps instead of re-deriving it from the merged latent.
pub fn step_prediction(
    world: &StoryWorld,
    tokens: &Mat,
    request: &RenderRequest,
    t: usize,
) -> Result<Mat> {
    let regions = validate_request(world, request)?;
    let global_prompts = world.prompt_encodings(&request.global_prompt, None)?;
    let (_, merged) =
        stream_predictions(world, tokens, tokens, request, &regions, &global_prompts, t)?;
    Ok(merged)
}

/// Predictions for both streams: (global, merged).
fn stream_predictions(
    world: &StoryWorld,
    global_tokens: &Mat,
    merged_tokens: &Mat,
    request: &RenderRequest,
    regions: &[RegionCtx<'_>],
    global_prompts: &[PromptEncoding],
    t: usize,
) -> Result<(Mat, Mat)> {
    let arch = &world.weights.arch;
    let d = arch.d;
    let restricted_kv = t >= request.t_theta;

    let mut xg = global_tokens.clone();
    let mut xm = merged_tokens.clone();

    for b in 0..arch.blocks {
        let bw = &world.weights.blocks[b];
        let adapters = world.block_adapters(b);
        let temb = world.weights.temb_row(t);

        // Self-attention. Global stage: original weights, full grid.
        let hg = add_timestep(&xg, temb);
        let qg = hg.matmul(&bw.wq_s)?;
        let kg = hg.matmul(&bw.wk_s)?;
        let vg = hg.matmul(&bw.wv_s)?;
        let attn_gs = attention(&qg, &kg, &vg, d)?;

        let hm = add_timestep(&xm, temb);
        let mut merged_s = attn_gs.clone();
        for region in regions {
            let ctx = CharContext::Character(&region.spec.character_id);
            let xi = hm.gather_rows(region.mask.indices());
            let q = project(adapters.self_q, &xi, ctx, &bw.wq_s)?;
            let (k, v) = if restricted_kv {
                (
                    project(adapters.self_k, &xi, ctx, &bw.wk_s)?,
                    project(adapters.self_v, &xi, ctx, &bw.wv_s)?,
                )
            } else {
                (
                    project(adapters.self_k, &hm, ctx, &bw.wk_s)?,
                    project(adapters.self_v, &hm, ctx, &bw.wv_s)?,
                )
            };
            let local = attention(&q, &k, &v, d)?;
            merged_s.scatter_rows(region.mask.indices(), &local);
        }
        xg = xg.add(&attn_gs)?;
        xm = xm.add(&merged_s)?;

        // Cross-attention. Global stage reads the global prompt.
        let f_g = &global_prompts[b];
        let hgc = add_timestep(&xg, temb);
        let qgc = hgc.matmul(&bw.wq_c)?;
        let kgc = f_g.tokens.matmul(&bw.wk_c)?;
        let vgc = f_g.tokens.matmul(&bw.wv_c)?;
        let attn_gc = attention(&qgc, &kgc, &vgc, d)?;

        let hmc = add_timestep(&xm, temb);
        let mut merged_c = attn_gc.clone();
        for region in regions {
            let ctx = CharContext::Character(&region.spec.character_id);
            let xi = hmc.gather_rows(region.mask.indices());
            let qc = project(adapters.cross_q, &xi, ctx, &bw.wq_c)?;
            let f_i = &region.prompts[b];
            let kc = f_i.tokens.matmul(&bw.wk_c)?;
            let vc = f_i.tokens.matmul(&bw.wv_c)?;
            let local = attention(&qc, &kc, &vc, d)?;
            merged_c.scatter_rows(region.mask.indices(), &local);
        }
        xg = xg.add(&attn_gc)?;
        xm = xm.add(&merged_c)?;
    }
    let pred_g = xg.matmul(&world.weights.w_out)?;
    let pred_m = xm.matmul(&world.weights.w_out)?;
    Ok((pred_g, pred_m))
}

/// Advance both streams one step: x <- x - eta(t) * prediction.
pub fn advance(
    world: &StoryWorld,
    state: &mut DenoiseState,
    request: &RenderRequest,
    t: usize,
) -> Result<()> {
    let regions = validate_request(world, request)?;
    let global_prompts = world.prompt_encodings(&request.global_prompt, None)?;
    advance_inner(world, state, request, &regions, &global_prompts, t)
}

fn advance_inner(
    world: &StoryWorld,
    state: &mut DenoiseState,
    request: &RenderRequest,
    regions: &[RegionCtx<'_>],
    global_prompts: &[PromptEncoding],
    t: usize,
) -> Result<()> {
    let (pred_g, pred_m) = stream_predictions(
        world,
        &state.global,
        &state.merged,
        request,
        regions,
        global_prompts,
        t,
    )?;
    let eta = step_size(t, world.weights.arch.timesteps);
    state.global = state.global.sub(&pred_g.scale(eta))?;
    state.merged = state.merged.sub(&pred_m.scale(eta))?;
    Ok(())
}

/// One full denoise step on a single latent: predict, then subtract.
pub fn denoise_step(
    world: &StoryWorld,
    latent: &LatentGrid,
    request: &RenderRequest,
    t: usize,
) -> Result<LatentGrid> {
    let mut state = DenoiseState::from_latent(latent.tokens.clone());
    advance(world, &mut state, request, t)?;
    Ok(LatentGrid::new(latent.h, latent.w, state.merged))
}

/// Full render: seeded Gaussian initial latent, descending timestep
/// schedule, deterministic residual subtraction, then the image bytes.
pub fn render(world: &StoryWorld, request: &RenderRequest) -> Result<RenderOutput> {
    let regions = validate_request(world, request)?;
    let global_prompts = world.prompt_encodings(&request.global_prompt, None)?;
    let arch = &world.weights.arch;

    let mut rng = DetRng::stream(world.seed(), &format!("render/{}", request.seed));
    let init: Mat =
        gaussian_matrix(&mut rng, arch.tokens(), arch.d, world.config().sampler.sigma_max);
    let mut state = DenoiseState::from_latent(init);

    for t in timestep_schedule(request.steps, arch.timesteps) {
        advance_inner(world, &mut state, request, &regions, &global_prompts, t)?;
        if !state.merged.is_finite() {
            return Err(Error::NonFiniteLoss { context: format!("render diverged at t = {t}") });
        }
    }
    let latent = LatentGrid::new(arch.grid_h, arch.grid_w, state.merged);
    let ppm = latent_to_ppm(&latent, arch.upscale);
    Ok(RenderOutput { latent, ppm })
}

/// Single-character render: one region spanning the whole grid.
pub fn render_single(
    world: &StoryWorld,
    character_id: &str,
    prompt: &[usize],
    steps: usize,
    seed: u64,
) -> Result<RenderOutput> {
    let request = RenderRequest {
        global_prompt: prompt.to_vec(),
        regions: vec![RegionSpec {
            character_id: character_id.to_string(),
            bbox: Bbox::full(),
            prompt: prompt.to_vec(),
        }],
        steps,
        t_theta: world.config().sampler.t_theta,
        seed,
    };
    render(world, &request)
}

/// On-disk render request document (TOML).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    /// Global context prompt.
    pub prompt: String,
    #[serde(default)]
    pub regions: Vec<RegionFileEntry>,
    pub steps: Option<usize>,
    pub t_theta: Option<usize>,
    pub seed: u64,
    /// Jitter the default layout when regions carry no explicit bboxes.
    #[serde(default = "default_true")]
    pub jitter: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFileEntry {
    pub id: String,
    pub prompt: String,
    /// (w_s, h_s, w_e, h_e); when absent on every region, boxes come from
    /// the default horizontal layout.
    pub bbox: Option<[f64; 4]>,
}

/// Parse a request document against a world: tokenize prompts, resolve
/// missing bboxes through the default layout, fill defaults from the world
/// config.
pub fn parse_request(world: &StoryWorld, text: &str) -> Result<RenderRequest> {
    let file: RequestFile = toml::from_str(text).map_err(|e| Error::Request(e.to_string()))?;
    let explicit = file.regions.iter().filter(|r| r.bbox.is_some()).count();
    if explicit != 0 && explicit != file.regions.len() {
        return Err(Error::Request(
            "either every region carries a bbox or none does (default layout)".into(),
        ));
    }
    let default_boxes = if explicit == 0 && !file.regions.is_empty() {
        let mut rng =
            DetRng::stream(world.seed(), &format!("layout/{}", file.seed));
        Some(default_layout(file.regions.len(), file.jitter.then_some(&mut rng)))
    } else {
        None
    };
    let regions = file
        .regions
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let bbox = match (&entry.bbox, &default_boxes) {
                (Some([ws, hs, we, he]), _) => Bbox::new(*ws, *hs, *we, *he),
                (None, Some(boxes)) => boxes[i],
                (None, None) => unreachable!("checked above"),
            };
            Ok(RegionSpec {
                character_id: entry.id.clone(),
                bbox,
                prompt: world.vocab.tokenize(&entry.prompt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderRequest {
        global_prompt: world.vocab.tokenize(&file.prompt)?,
        regions,
        steps: file.steps.unwrap_or(world.config().sampler.steps),
        t_theta: file.t_theta.unwrap_or(world.config().sampler.t_theta),
        seed: file.seed,
    })
}

/// Binary P6 pixmap: each token's first three latent channels map to RGB
/// through the fixed affine clamp byte = clamp(128 + 64 v), then each token
/// becomes an upscale x upscale pixel block.
pub fn latent_to_ppm(latent: &LatentGrid, upscale: usize) -> Vec<u8> {
    let (h, w) = (latent.h, latent.w);
    let dim = latent.dim();
    let (ph, pw) = (h * upscale, w * upscale);
    let mut out = format!("P6\n{pw} {ph}\n255\n").into_bytes();
    let byte = |v: f64| (128.0 + 64.0 * v).round().clamp(0.0, 255.0) as u8;
    for pr in 0..ph {
        for pc in 0..pw {
            let row = latent.tokens.row((pr / upscale) * w + pc / upscale);
            for ch in 0..3 {
                out.push(byte(if ch < dim { row[ch] } else { 0.0 }));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::CharContext;
    use crate::generator::predict;
    use crate::trainer::{synth_dataset, train_character, TrainingConfig};
    use crate::world::config::{DimsSection, WorldConfig};
    use crate::world::StoryWorld;

    fn test_config(blocks: usize) -> WorldConfig {
        let mut cfg = WorldConfig::default();
        cfg.dims = DimsSection { d: 16, r: 4, r1: 2 };
        cfg.arch.blocks = blocks;
        cfg.arch.d_text = 8;
        cfg.arch.grid_h = 8;
        cfg.arch.grid_w = 8;
        cfg.train.steps = 6;
        cfg.train.batch_size = 1;
        cfg
    }

    fn world_with_chars(blocks: usize, ids: &[&str]) -> StoryWorld {
        let mut world = StoryWorld::init(test_config(blocks)).unwrap();
        for id in ids {
            world.add_character_slots(id).unwrap();
        }
        world
    }

    fn quick_train(world: &mut StoryWorld, id: &str) {
        let ds = synth_dataset(world, id, 2);
        let cfg = TrainingConfig { steps: 6, batch_size: 1, ..Default::default() };
        train_character(world, id, &ds, &cfg).unwrap();
    }

    fn region(world: &StoryWorld, id: &str, bbox: Bbox) -> RegionSpec {
        RegionSpec {
            character_id: id.into(),
            bbox,
            prompt: world.vocab.tokenize("<chr> in the forest").unwrap(),
        }
    }

    fn request(world: &StoryWorld, regions: Vec<RegionSpec>, seed: u64) -> RenderRequest {
        RenderRequest {
            global_prompt: world.vocab.tokenize("a quiet forest scene").unwrap(),
            regions,
            steps: 4,
            t_theta: 700,
            seed,
        }
    }

    #[test]
    fn full_grid_bbox_masks_everything() {
        let mask = bbox_to_mask(&Bbox::full(), 16, 16).unwrap();
        assert_eq!(mask.len(), 256);
    }

    #[test]
    fn half_grid_bbox_masks_left_columns() {
        let mask = bbox_to_mask(&Bbox::new(0.0, 0.0, 0.5, 1.0), 16, 16).unwrap();
        assert_eq!(mask.len(), 128);
        assert!(mask.contains(0) && mask.contains(7));
        assert!(!mask.contains(8));
    }

    #[test]
    fn tiny_bbox_still_masks_one_token() {
        let mask = bbox_to_mask(&Bbox::new(0.9, 0.9, 0.91, 0.91), 4, 4).unwrap();
        assert!(mask.len() >= 1);
        assert!(mask.contains(15));
    }

    #[test]
    fn invalid_bbox_rejected() {
        assert!(bbox_to_mask(&Bbox::new(0.5, 0.0, 0.5, 1.0), 4, 4).is_err());
        assert!(bbox_to_mask(&Bbox::new(-0.1, 0.0, 0.5, 1.0), 4, 4).is_err());
    }

    #[test]
    fn default_layout_without_jitter() {
        let one = default_layout(1, None);
        assert_eq!(one, vec![Bbox::full()]);
        let two = default_layout(2, None);
        assert_eq!(two[0], Bbox::new(0.0, 0.0, 0.5, 1.0));
        assert_eq!(two[1], Bbox::new(0.5, 0.0, 1.0, 1.0));
    }

    #[test]
    fn default_layout_jitter_stays_valid_and_ordered() {
        let mut rng = DetRng::new(9);
        let boxes = default_layout(4, Some(&mut rng));
        for (i, b) in boxes.iter().enumerate() {
            b.validate().unwrap();
            // Jitter is bounded by 0.05 around the even split.
            let nominal = i as f64 / 4.0;
            assert!((b.ws - nominal).abs() <= 0.05 + 1e-12);
        }
        for pair in boxes.windows(2) {
            assert!(pair[0].ws < pair[1].ws, "boxes remain ordered");
        }
    }

    #[test]
    fn schedule_descends_to_zero() {
        let s = timestep_schedule(4, 1000);
        assert_eq!(s, vec![999, 666, 333, 0]);
        assert_eq!(timestep_schedule(1, 1000), vec![999]);
    }

    #[test]
    fn zero_region_step_matches_pure_global_oracle_bitwise() {
        let mut world = world_with_chars(2, &["V1"]);
        quick_train(&mut world, "V1");
        let arch = &world.weights.arch;
        let x = gaussian_matrix::<f64>(&mut DetRng::new(3), arch.tokens(), arch.d, 1.0);
        let req = request(&world, vec![], 0);

        // Independent oracle: the plain generator stack with no adapters.
        let prompts = world.prompt_encodings(&req.global_prompt, None).unwrap();
        let no_adapters =
            vec![crate::generator::BlockAdapters::default(); world.weights.arch.blocks];
        let oracle =
            predict(&world.weights, &no_adapters, &x, &prompts, CharContext::Global, 750)
                .unwrap();
        let pred = step_prediction(&world, &x, &req, 750).unwrap();
        assert_eq!(pred.data(), oracle.data());
    }

    #[test]
    fn untrained_full_grid_region_matches_global_step() {
        let world = world_with_chars(2, &["V1"]);
        let arch = &world.weights.arch;
        let x = gaussian_matrix::<f64>(&mut DetRng::new(3), arch.tokens(), arch.d, 1.0);
        // Identical prompts in the region and globally.
        let prompt = world.vocab.tokenize("<chr> in the forest").unwrap();
        let mut req = request(&world, vec![region(&world, "V1", Bbox::full())], 0);
        req.global_prompt = prompt;
        let with_region = step_prediction(&world, &x, &req, 500).unwrap();
        let mut zero = req.clone();
        zero.regions.clear();
        let global = step_prediction(&world, &x, &zero, 500).unwrap();
        let diff = with_region.sub(&global).unwrap().max_abs();
        assert!(diff <= 1e-15, "diff {diff}");
    }

    #[test]
    fn outside_tokens_bitwise_equal_global_run() {
        let mut world = world_with_chars(2, &["V1", "V2"]);
        quick_train(&mut world, "V1");
        quick_train(&mut world, "V2");
        let left = region(&world, "V1", Bbox::new(0.0, 0.0, 0.3, 1.0));
        let right = region(&world, "V2", Bbox::new(0.7, 0.0, 1.0, 1.0));
        let two = request(&world, vec![left.clone(), right.clone()], 11);
        let zero = request(&world, vec![], 11);
        let out_two = render(&world, &two).unwrap();
        let out_zero = render(&world, &zero).unwrap();

        let arch = &world.weights.arch;
        let m1 = bbox_to_mask(&left.bbox, arch.grid_h, arch.grid_w).unwrap();
        let m2 = bbox_to_mask(&right.bbox, arch.grid_h, arch.grid_w).unwrap();
        let mut outside_count = 0;
        for tok in 0..arch.tokens() {
            if !m1.contains(tok) && !m2.contains(tok) {
                assert_eq!(
                    out_two.latent.tokens.row(tok),
                    out_zero.latent.tokens.row(tok),
                    "outside token {tok} diverged"
                );
                outside_count += 1;
            }
        }
        assert!(outside_count > 0);
    }

    #[test]
    fn boundary_timestep_takes_restricted_branch() {
        // At t == T_theta exactly, out-of-region perturbations must not
        // reach the region (restricted-KV regime).
        let mut world = world_with_chars(1, &["V1"]);
        quick_train(&mut world, "V1");
        let arch = &world.weights.arch;
        let r = region(&world, "V1", Bbox::new(0.0, 0.0, 0.5, 1.0));
        let req = request(&world, vec![r.clone()], 0);
        let mask = bbox_to_mask(&r.bbox, arch.grid_h, arch.grid_w).unwrap();

        let x = gaussian_matrix::<f64>(&mut DetRng::new(5), arch.tokens(), arch.d, 1.0);
        let mut x_perturbed = x.clone();
        for tok in 0..arch.tokens() {
            if !mask.contains(tok) {
                for v in x_perturbed.row_mut(tok) {
                    *v += 100.0;
                }
            }
        }

        let at_boundary = step_prediction(&world, &x, &req, req.t_theta).unwrap();
        let at_boundary_p = step_prediction(&world, &x_perturbed, &req, req.t_theta).unwrap();
        for &tok in mask.indices() {
            assert_eq!(
                at_boundary.row(tok),
                at_boundary_p.row(tok),
                "in-region token {tok} saw the outside perturbation at t = T_theta"
            );
        }

        // One step below the threshold the KV context is global, so the
        // same perturbation must reach the region.
        let below = step_prediction(&world, &x, &req, req.t_theta - 1).unwrap();
        let below_p = step_prediction(&world, &x_perturbed, &req, req.t_theta - 1).unwrap();
        let mut changed = false;
        for &tok in mask.indices() {
            if below.row(tok) != below_p.row(tok) {
                changed = true;
                break;
            }
        }
        assert!(changed, "below T_theta the region must couple to the full grid");
    }

    #[test]
    fn global_stage_ignores_adapter_contents() {
        let mut world = world_with_chars(2, &["V1"]);
        let req = request(&world, vec![], 21);
        let before = render(&world, &req).unwrap();
        quick_train(&mut world, "V1");
        let after = render(&world, &req).unwrap();
        assert_eq!(before.latent.tokens.data(), after.latent.tokens.data());
        assert_eq!(before.ppm, after.ppm);
    }

    #[test]
    fn overlapping_regions_resolve_in_declaration_order() {
        let mut world = world_with_chars(1, &["V1", "V2"]);
        quick_train(&mut world, "V1");
        quick_train(&mut world, "V2");
        let arch = &world.weights.arch;
        let a = region(&world, "V1", Bbox::new(0.0, 0.0, 0.6, 1.0));
        let b = region(&world, "V2", Bbox::new(0.4, 0.0, 1.0, 1.0));
        let x = gaussian_matrix::<f64>(&mut DetRng::new(6), arch.tokens(), arch.d, 1.0);
        let t = 800; // restricted KV: single block keeps regions independent

        let both = step_prediction(
            &world,
            &x,
            &request(&world, vec![a.clone(), b.clone()], 0),
            t,
        )
        .unwrap();
        let only_b =
            step_prediction(&world, &x, &request(&world, vec![b.clone()], 0), t).unwrap();
        let only_a =
            step_prediction(&world, &x, &request(&world, vec![a.clone()], 0), t).unwrap();

        let ma = bbox_to_mask(&a.bbox, arch.grid_h, arch.grid_w).unwrap();
        let mb = bbox_to_mask(&b.bbox, arch.grid_h, arch.grid_w).unwrap();
        for tok in 0..arch.tokens() {
            if ma.contains(tok) && mb.contains(tok) {
                assert_eq!(both.row(tok), only_b.row(tok), "overlap carries the later region");
                assert_ne!(both.row(tok), only_a.row(tok), "earlier region was not overwritten");
            }
        }

        // Reversed order flips the winner.
        let reversed =
            step_prediction(&world, &x, &request(&world, vec![b, a], 0), t).unwrap();
        for tok in 0..arch.tokens() {
            if ma.contains(tok) && mb.contains(tok) {
                assert_eq!(reversed.row(tok), only_a.row(tok));
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_seed_sensitive() {
        let mut world = world_with_chars(2, &["V1"]);
        quick_train(&mut world, "V1");
        let req = request(&world, vec![region(&world, "V1", Bbox::full())], 33);
        let a = render(&world, &req).unwrap();
        let b = render(&world, &req).unwrap();
        assert_eq!(a.ppm, b.ppm);
        assert_eq!(a.latent.tokens.data(), b.latent.tokens.data());

        let mut other = req.clone();
        other.seed = 34;
        let c = render(&world, &other).unwrap();
        assert_ne!(a.ppm, c.ppm);
    }

    #[test]
    fn render_single_is_full_grid_region_render() {
        let mut world = world_with_chars(2, &["V1"]);
        quick_train(&mut world, "V1");
        let prompt = world.vocab.tokenize("<chr> in the forest").unwrap();
        let single = render_single(&world, "V1", &prompt, 4, 9).unwrap();
        let req = RenderRequest {
            global_prompt: prompt.clone(),
            regions: vec![RegionSpec {
                character_id: "V1".into(),
                bbox: Bbox::full(),
                prompt,
            }],
            steps: 4,
            t_theta: world.config().sampler.t_theta,
            seed: 9,
        };
        let explicit = render(&world, &req).unwrap();
        assert_eq!(single.ppm, explicit.ppm);
        assert_eq!(single.latent.tokens.data(), explicit.latent.tokens.data());
    }

    #[test]
    fn request_file_resolves_defaults_and_layout() {
        let world = world_with_chars(1, &["V1", "V2"]);
        let text = r#"
prompt = "a quiet forest scene"
seed = 5

[[regions]]
id = "V1"
prompt = "<chr> in the forest"

[[regions]]
id = "V2"
prompt = "<chr> by the river"
"#;
        let req = parse_request(&world, text).unwrap();
        assert_eq!(req.steps, world.config().sampler.steps);
        assert_eq!(req.t_theta, world.config().sampler.t_theta);
        assert_eq!(req.regions.len(), 2);
        // Default layout: two boxes along the horizontal axis, jittered.
        assert!(req.regions[0].bbox.ws < req.regions[1].bbox.ws);
        for r in &req.regions {
            r.bbox.validate().unwrap();
        }

        let explicit = r#"
prompt = "a quiet forest scene"
seed = 5
steps = 7
t_theta = 500

[[regions]]
id = "V1"
prompt = "<chr> in the forest"
bbox = [0.0, 0.0, 0.5, 1.0]
"#;
        let req = parse_request(&world, explicit).unwrap();
        assert_eq!(req.steps, 7);
        assert_eq!(req.t_theta, 500);
        assert_eq!(req.regions[0].bbox, Bbox::new(0.0, 0.0, 0.5, 1.0));

        let mixed = r#"
prompt = "a scene"
seed = 5
[[regions]]
id = "V1"
prompt = "<chr> in the forest"
bbox = [0.0, 0.0, 0.5, 1.0]
[[regions]]
id = "V2"
prompt = "<chr> by the river"
"#;
        assert!(parse_request(&world, mixed).is_err());

        let unknown_word = r#"
prompt = "a xylophone"
seed = 5
"#;
        assert!(matches!(
            parse_request(&world, unknown_word).unwrap_err(),
            Error::UnknownWord(_)
        ));
    }

    #[test]
    fn unknown_region_character_rejected() {
        let world = world_with_chars(1, &["V1"]);
        let req = request(&world, vec![region(&world, "ghost", Bbox::full())], 0);
        let err = render(&world, &req).unwrap_err();
        assert!(matches!(err, Error::UnknownCharacter(_)));
    }

    #[test]
    fn ppm_layout_and_clamp() {
        let mut tokens = Mat::zeros(4, 3);
        tokens.set(0, 0, 10.0); // clamps to 255
        tokens.set(1, 1, -10.0); // clamps to 0
        let latent = LatentGrid::new(2, 2, tokens);
        let ppm = latent_to_ppm(&latent, 2);
        let header = b"P6\n4 4\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 4 * 4 * 3);
        let body = &ppm[header.len()..];
        assert_eq!(body[0], 255); // token 0 red channel, upscaled corner
        assert_eq!(body[1], 128); // zero maps to mid-gray
    }
}
