//! Global/local window transformer blocks and the four-stage image encoder.
//!
//! One block computes
//!
//! ```text
//! F_w  = gwg_stack(x)
//! F_L  = LW-MSA(x)
//! F_SL = SLW-MSA(F_L)
//! F_GL = GLW-CA(F_L, F_w) + GLW-CA(F_SL, F_w)
//! out  = F_GL + MLP(LN(F_GL))
//! ```
//!
//! where every attention op is a pre-norm residual sublayer. The shifted
//! branch rolls the map by `-shift` on both axes, attends inside windows
//! without masking the wrapped tokens, and rolls back.

use crate::attention::{attend_group, AttentionWeights, Linear, Mlp};
use crate::error::{dim_err, Error, Result};
use crate::gwg::{gwg_depth, gwg_stack, GwgBlockWeights};
use crate::tensor::{l2_normalize, ParamInit, Tensor};
use crate::windowing::{cyclic_shift, patch_embed, patch_merge, window_partition, window_reverse};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GswinConfig {
    pub patch_size: usize,
    pub win: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; NUM_STAGES],
    /// `None` means `max(1, channels / 16)` per stage.
    pub heads_per_stage: Option<[usize; NUM_STAGES]>,
    pub proj_dim: usize,
    pub mlp_ratio: f64,
    pub rel_pos_bias: bool,
    /// `None` means `win / 2`.
    pub shift: Option<usize>,
    /// One GWG stack per stage instead of one per block.
    pub share_gwg_weights: bool,
    /// Use the mean of the final tokens instead of token 0 as the image feature.
    pub mean_pool_feature: bool,
}

impl Default for GswinConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            win: 8,
            base_channels: 32,
            stage_depths: [1, 1, 3, 1],
            heads_per_stage: None,
            proj_dim: 256,
            mlp_ratio: 4.0,
            rel_pos_bias: false,
            shift: None,
            share_gwg_weights: false,
            mean_pool_feature: false,
        }
    }
}

impl GswinConfig {
    /// Channel count of stage `k` (0-based).
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn heads(&self, stage: usize) -> usize {
        match self.heads_per_stage {
            Some(h) => h[stage],
            None => (self.channels(stage) / 16).max(1),
        }
    }

    pub fn shift(&self) -> usize {
        self.shift.unwrap_or(self.win / 2)
    }

    pub fn mlp_hidden(&self, c: usize) -> usize {
        ((c as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    /// Check every architectural constraint for a square `image_size` input.
    /// Returns the spatial extent at each stage.
    pub fn validate(&self, image_size: usize) -> Result<[usize; NUM_STAGES]> {
        if self.patch_size == 0 || self.win == 0 || self.base_channels == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "patch_size, win, base_channels and proj_dim must be positive".into(),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio)));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "base_channels {} must be even for the global window branches",
                self.base_channels
            )));
        }
        let reduction = self.patch_size * (1 << (NUM_STAGES - 1));
        if !image_size.is_multiple_of(reduction) {
            return dim_err(format!(
                "image extent {image_size} is not divisible by patch size × 8 = {reduction}"
            ));
        }
        let mut extents = [0; NUM_STAGES];
        for (stage, e) in extents.iter_mut().enumerate() {
            *e = (image_size / self.patch_size) >> stage;
            if *e % self.win != 0 {
                return Err(Error::Config(format!(
                    "stage {}: extent {} is not divisible by window {}",
                    stage + 1,
                    *e,
                    self.win
                )));
            }
            gwg_depth(*e, self.win).map_err(|err| {
                Error::Config(format!("stage {}: {err}", stage + 1))
            })?;
            let (c, heads) = (self.channels(stage), self.heads(stage));
            if heads == 0 || c % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {heads} heads do not divide {c} channels",
                    stage + 1
                )));
            }
        }
        Ok(extents)
    }
}

fn map_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    t.expect_rank(3, what)?;
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

fn rel_index(i: usize, j: usize, win: usize) -> usize {
    let (yi, xi) = (i / win, i % win);
    let (yj, xj) = (j / win, j % win);
    let span = 2 * win - 1;
    (yi + win - 1 - yj) * span + (xi + win - 1 - xj)
}

/// Window self-attention on an unshifted map. Returns `x + Attn(LN(x))` and,
/// when requested, per-window per-head probability blocks
/// (`probs[window * heads + head]`).
fn window_self_attention(
    f: &Tensor,
    w: &AttentionWeights,
    win: usize,
    keep_probs: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (h, wd, c) = map_dims(f, "window attention")?;
    if win == 0 || h % win != 0 || wd % win != 0 {
        return dim_err(format!("window attention: map {h}×{wd} not divisible by window {win}"));
    }
    w.check(c)?;
    let normed = w.norm.apply(f)?;
    let q = window_partition(&w.query.apply(&normed)?, win)?;
    let k = window_partition(&w.key.apply(&normed)?, win)?;
    let v = window_partition(&w.value.apply(&normed)?, win)?;
    let n = win * win;
    let table = w.rel_pos_bias.as_ref();
    if let Some(t) = table {
        let span = 2 * win - 1;
        if t.shape() != [span * span, w.heads] {
            return dim_err(format!(
                "relative position table {:?} does not fit window {win} with {} heads",
                t.shape(),
                w.heads
            ));
        }
    }
    let heads = w.heads;
    let bias_fn = table.map(|t| {
        move |head: usize, i: usize, j: usize| t.data()[rel_index(i, j, win) * heads + head]
    });
    let bias: Option<&dyn Fn(usize, usize, usize) -> f64> =
        bias_fn.as_ref().map(|b| b as &dyn Fn(usize, usize, usize) -> f64);

    let mut probs = Vec::new();
    let mut mixed = Vec::with_capacity(f.len());
    let block = n * c;
    for ((qw, kw), vw) in q
        .data()
        .chunks_exact(block)
        .zip(k.data().chunks_exact(block))
        .zip(v.data().chunks_exact(block))
    {
        mixed.extend(attend_group(
            qw,
            kw,
            vw,
            n,
            n,
            c,
            heads,
            None,
            bias,
            keep_probs.then_some(&mut probs),
        ));
    }
    let mixed = window_reverse(&Tensor::new(q.shape().to_vec(), mixed)?, h, wd)?;
    let delta = w.output.apply(&mixed)?;
    Ok((f.add(&delta)?, probs))
}

/// Local window multi-head self-attention, `F_L`.
pub fn lw_msa(f: &Tensor, w: &AttentionWeights, win: usize) -> Result<Tensor> {
    Ok(window_self_attention(f, w, win, false)?.0)
}

/// [`lw_msa`] plus the attention probabilities, `probs[window * heads + head]`.
pub fn lw_msa_with_probs(
    f: &Tensor,
    w: &AttentionWeights,
    win: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    window_self_attention(f, w, win, true)
}

/// Shifted local window self-attention, `F_SL`.
pub fn slw_msa(f_l: &Tensor, w: &AttentionWeights, win: usize, shift: usize) -> Result<Tensor> {
    map_dims(f_l, "slw_msa")?;
    let s = shift as isize;
    let rolled = cyclic_shift(f_l, -s, -s)?;
    let (attended, _) = window_self_attention(&rolled, w, win, false)?;
    cyclic_shift(&attended, s, s)
}

fn cross_attention(
    f_local: &Tensor,
    f_w: &Tensor,
    w: &AttentionWeights,
    keep_probs: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (h, wd, c) = map_dims(f_local, "glw_ca local map")?;
    let (gh, gw, gc) = map_dims(f_w, "glw_ca global window")?;
    if gh != gw || gh == 0 || h % gh != 0 || wd % gw != 0 {
        return dim_err(format!(
            "glw_ca: global window {gh}×{gw} does not match the local window grid of a {h}×{wd} map"
        ));
    }
    if gc != w.key.in_dim() {
        return dim_err(format!(
            "glw_ca: global window has {gc} channels, key projection expects {}",
            w.key.in_dim()
        ));
    }
    w.check(c)?;
    let win = gh;
    let n = win * win;
    let global = f_w.clone().reshape(&[n, gc])?;
    let global = match &w.context_norm {
        Some(norm) => norm.apply(&global)?,
        None => global,
    };
    let k = w.key.apply(&global)?;
    let v = w.value.apply(&global)?;
    let q = window_partition(&w.query.apply(&w.norm.apply(f_local)?)?, win)?;
    let mut probs = Vec::new();
    let mut mixed = Vec::with_capacity(f_local.len());
    for qw in q.data().chunks_exact(n * c) {
        mixed.extend(attend_group(
            qw,
            k.data(),
            v.data(),
            n,
            n,
            c,
            w.heads,
            None,
            None,
            keep_probs.then_some(&mut probs),
        ));
    }
    let mixed = window_reverse(&Tensor::new(q.shape().to_vec(), mixed)?, h, wd)?;
    let delta = w.output.apply(&mixed)?;
    Ok((f_local.add(&delta)?, probs))
}

/// Global-local window cross-attention: every local window queries the same
/// global window `f_w`.
pub fn glw_ca(f_local: &Tensor, f_w: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    Ok(cross_attention(f_local, f_w, w, false)?.0)
}

pub fn glw_ca_with_probs(
    f_local: &Tensor,
    f_w: &Tensor,
    w: &AttentionWeights,
) -> Result<(Tensor, Vec<Tensor>)> {
    cross_attention(f_local, f_w, w, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GswinBlockWeights {
    pub local: AttentionWeights,
    pub shifted: AttentionWeights,
    pub cross_local: AttentionWeights,
    pub cross_shifted: AttentionWeights,
    pub mlp: Mlp,
}

impl GswinBlockWeights {
    pub fn init(cfg: &GswinConfig, c: usize, heads: usize, init: &mut ParamInit) -> Self {
        let self_attn = |init: &mut ParamInit| {
            let w = AttentionWeights::init_self(c, heads, init);
            if cfg.rel_pos_bias {
                w.with_rel_pos_bias(cfg.win, init)
            } else {
                w
            }
        };
        let local = self_attn(init);
        let shifted = self_attn(init);
        Self {
            local,
            shifted,
            cross_local: AttentionWeights::init_cross(c, c, heads, init),
            cross_shifted: AttentionWeights::init_cross(c, c, heads, init),
            mlp: Mlp::init(c, cfg.mlp_hidden(c), init),
        }
    }

    /// Zero every attention value and output projection.
    pub fn zero_attention_values(&mut self) {
        for a in [
            &mut self.local,
            &mut self.shifted,
            &mut self.cross_local,
            &mut self.cross_shifted,
        ] {
            a.value.zero_out();
            a.output.zero_out();
        }
    }
}

/// One Gswin block. `gwg` holds the global-window stack for this block's
/// input extent.
pub fn gswin_block(
    f: &Tensor,
    cfg: &GswinConfig,
    w: &GswinBlockWeights,
    gwg: &[GwgBlockWeights],
) -> Result<Tensor> {
    Ok(block_forward(f, cfg, w, gwg)?.0)
}

/// Block output together with the global window it generated.
fn block_forward(
    f: &Tensor,
    cfg: &GswinConfig,
    w: &GswinBlockWeights,
    gwg: &[GwgBlockWeights],
) -> Result<(Tensor, Tensor)> {
    let f_w = gwg_stack(f, cfg.win, gwg)?;
    let f_l = lw_msa(f, &w.local, cfg.win)?;
    let f_sl = slw_msa(&f_l, &w.shifted, cfg.win, cfg.shift())?;
    let mut f_gl = glw_ca(&f_l, &f_w, &w.cross_local)?;
    f_gl.add_assign(&glw_ca(&f_sl, &f_w, &w.cross_shifted)?)?;
    Ok((w.mlp.apply(&f_gl)?, f_w))
}

#[derive(Debug, Clone, PartialEq)]
pub enum GwgWeights {
    PerBlock(Vec<Vec<GwgBlockWeights>>),
    Shared(Vec<GwgBlockWeights>),
}

impl GwgWeights {
    pub fn for_block(&self, block: usize) -> &[GwgBlockWeights] {
        match self {
            GwgWeights::PerBlock(v) => &v[block],
            GwgWeights::Shared(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub blocks: Vec<GswinBlockWeights>,
    pub gwg: GwgWeights,
    /// 4C × 2C projection applied after this stage; `None` for the last stage.
    pub merge: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GswinWeights {
    pub patch_embed: Tensor,
    pub stages: Vec<StageWeights>,
    pub projection: Linear,
}

impl GswinWeights {
    /// Seeded initialization for a square `image_size` input.
    pub fn init(cfg: &GswinConfig, image_size: usize, seed: u64) -> Result<Self> {
        let extents = cfg.validate(image_size)?;
        let mut init = ParamInit::new(seed);
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = init.matrix(patch_in, cfg.base_channels);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (stage, &extent) in extents.iter().enumerate() {
            let c = cfg.channels(stage);
            let heads = cfg.heads(stage);
            let depth = cfg.stage_depths[stage];
            let n_gwg = gwg_depth(extent, cfg.win)?;
            let gwg_set =
                |init: &mut ParamInit| -> Vec<GwgBlockWeights> {
                    (0..n_gwg).map(|_| GwgBlockWeights::init(c, init)).collect()
                };
            let gwg = if cfg.share_gwg_weights {
                GwgWeights::Shared(gwg_set(&mut init))
            } else {
                GwgWeights::PerBlock((0..depth).map(|_| gwg_set(&mut init)).collect())
            };
            let blocks = (0..depth)
                .map(|_| GswinBlockWeights::init(cfg, c, heads, &mut init))
                .collect();
            let merge = (stage + 1 < NUM_STAGES).then(|| init.matrix(4 * c, 2 * c));
            stages.push(StageWeights { blocks, gwg, merge });
        }
        let top = cfg.channels(NUM_STAGES - 1);
        Ok(Self {
            patch_embed,
            stages,
            projection: Linear::init(top, cfg.proj_dim, &mut init),
        })
    }
}

/// Extents after one stage of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRecord {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub gwg_depth: usize,
    /// Extents of the global window generated inside this stage.
    pub global_window: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncodedImage {
    /// Final token map, h/8 × w/8 × 8C.
    pub tokens: Tensor,
    /// Unit-norm projected image feature of length `proj_dim`.
    pub feature: Vec<f64>,
    pub stages: Vec<StageRecord>,
    pub blocks_run: usize,
}

/// Patch embedding, four stages of Gswin blocks with patch merging between
/// them, and projection of the 0-th final token to the shared space.
pub fn image_encode(image: &Tensor, cfg: &GswinConfig, w: &GswinWeights) -> Result<EncodedImage> {
    image.expect_rank(3, "image_encode")?;
    let (h, wd) = (image.shape()[0], image.shape()[1]);
    if h != wd {
        return dim_err(format!("image_encode: image {h}×{wd} must be square"));
    }
    cfg.validate(h)?;
    if w.stages.len() != NUM_STAGES {
        return dim_err(format!("expected {NUM_STAGES} stages of weights, got {}", w.stages.len()));
    }
    let mut x = patch_embed(image, cfg.patch_size, &w.patch_embed)?.tokens;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut blocks_run = 0;
    for (stage, sw) in w.stages.iter().enumerate() {
        let tag = |e: Error| match e {
            Error::Dimension(m) => Error::Dimension(format!("stage {}: {m}", stage + 1)),
            other => other,
        };
        if sw.blocks.len() != cfg.stage_depths[stage] {
            return Err(Error::Config(format!(
                "stage {}: {} block weights for depth {}",
                stage + 1,
                sw.blocks.len(),
                cfg.stage_depths[stage]
            )));
        }
        let mut global_window = (0, 0, 0);
        for (b, bw) in sw.blocks.iter().enumerate() {
            let (next, g) = block_forward(&x, cfg, bw, sw.gwg.for_block(b)).map_err(tag)?;
            global_window = (g.shape()[0], g.shape()[1], g.shape()[2]);
            x = next;
            blocks_run += 1;
        }
        let (sh, sw_, sc) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        stages.push(StageRecord {
            stage: stage + 1,
            height: sh,
            width: sw_,
            channels: sc,
            blocks: sw.blocks.len(),
            gwg_depth: gwg_depth(sh, cfg.win)?,
            global_window,
        });
        if let Some(m) = &sw.merge {
            x = patch_merge(&x, m).map_err(tag)?;
        }
    }
    let c = x.last_dim();
    let pooled = if cfg.mean_pool_feature {
        let n = x.outer_len() as f64;
        let mut acc = vec![0.0; c];
        for row in x.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.into_iter().map(|v| v / n).collect()
    } else {
        x.row(0).to_vec()
    };
    let projected = w.projection.apply(&Tensor::new(vec![1, c], pooled)?)?;
    Ok(EncodedImage {
        feature: l2_normalize(projected.data())?,
        tokens: x,
        stages,
        blocks_run,
    })
}
