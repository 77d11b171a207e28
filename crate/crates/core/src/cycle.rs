//! Cycle-consistent training: track forward through unlabeled frames, crop a
//! new reference from the last prediction, track back to the labeled first
//! frame and supervise that final prediction with the known box.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{pixel_norm, sample_training_batch, FrameSequence, TrainSample};
use crate::dca::{prompt_indices, sample_noise, sample_prompt, select_mode, ContextTokens, DcaConfig, DcaSchedule, Mode};
use crate::error::{Error, Result};
use crate::geometry::{crop, map_box, BBox, CropTransform, Direction, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::heads::{box_at_cells, decode_box, gaussian_target, peak_cells, target_tensor, total_loss, LossTerms, LossWeights};
use crate::imaging::Image;
use crate::instrument;
use crate::model::{FrameTag, HopOutput, TrackModel, Tracker};
use crate::nn::{AdamW, Group};

/// Training variants, the full method plus the three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// No context tokens during the prompt phase.
    NoPrompt,
    /// Prompt tokens throughout, no noise decoder.
    NoNoise,
    /// Learned query tokens instead of sampled prompts.
    Query,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-prompt" => Ok(Variant::NoPrompt),
            "no-noise" => Ok(Variant::NoNoise),
            "query" => Ok(Variant::Query),
            other => Err(format!("unknown variant `{other}` (full, no-prompt, no-noise, query)")),
        }
    }
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrompt => "no-prompt",
            Variant::NoNoise => "no-noise",
            Variant::Query => "query",
        }
    }
}

/// What is carried from one hop to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    None,
    Prompt,
    Noise,
    Query,
}

impl ContextPolicy {
    pub fn resolve(variant: Variant, phase: Mode) -> Self {
        match (variant, phase) {
            (_, Mode::None) => ContextPolicy::None,
            (Variant::NoNoise, _) => ContextPolicy::Prompt,
            (_, Mode::Noise) => ContextPolicy::Noise,
            (Variant::Full, Mode::Prompt) => ContextPolicy::Prompt,
            (Variant::NoPrompt, Mode::Prompt) => ContextPolicy::None,
            (Variant::Query, Mode::Prompt) => ContextPolicy::Query,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    /// Unlabeled frames tracked forward (L).
    pub forward_length: usize,
    /// Backward hops (m), the last one landing on the labeled frame.
    pub backward_steps: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    /// Learning rates drop tenfold after this epoch.
    pub lr_decay_epoch: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dca: DcaSchedule,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 20,
            steps_per_epoch: 200,
            forward_length: 2,
            backward_steps: 1,
            lr_backbone: 1e-4,
            lr_rest: 5e-4,
            lr_decay_epoch: 16,
            weight_decay: 1e-4,
            batch_size: 1,
            dca: DcaSchedule {
                switch_epoch: 10,
                token_length: 8,
            },
        }
    }
}

impl TrainSchedule {
    /// 150 epochs of 10 000 pairs (1250 batches of 8), decay after 120, switch after 75.
    pub fn paper() -> Self {
        Self {
            total_epochs: 150,
            steps_per_epoch: 1250,
            forward_length: 2,
            backward_steps: 1,
            lr_backbone: 2.5e-5,
            lr_rest: 2.5e-4,
            lr_decay_epoch: 120,
            weight_decay: 1e-4,
            batch_size: 8,
            dca: DcaSchedule {
                switch_epoch: 75,
                token_length: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.total_epochs", self.total_epochs),
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.forward_length", self.forward_length),
            ("train.backward_steps", self.backward_steps),
            ("train.lr_decay_epoch", self.lr_decay_epoch),
            ("train.batch_size", self.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("train.lr_backbone", self.lr_backbone),
            ("train.lr_rest", self.lr_rest),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        if self.lr_decay_epoch > self.total_epochs {
            return Err(Error::config("train.lr_decay_epoch", "must not exceed train.total_epochs"));
        }
        if self.backward_steps > self.forward_length {
            return Err(Error::config(
                "train.backward_steps",
                "intermediate backward hops revisit forward frames, so m must not exceed L",
            ));
        }
        self.dca.validate()
    }

    /// Learning-rate multiplier for a 1-based epoch.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            0.1
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    /// Enlarges the search region of the final hop onto the labeled frame.
    pub backward_search_scale: f64,
    /// Training-only shift of the final search center, as a fraction of the crop side.
    pub final_center_jitter: f64,
    /// Training-only log-uniform range of the final search-factor scaling.
    pub final_scale_jitter: f64,
    /// Smallest predicted side in frame pixels.
    pub min_box_px: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            template_factor: TEMPLATE_FACTOR,
            search_factor: SEARCH_FACTOR,
            backward_search_scale: 1.5,
            final_center_jitter: 0.05,
            final_scale_jitter: 0.2,
            min_box_px: 1.0,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("cycle.template_factor", self.template_factor),
            ("cycle.search_factor", self.search_factor),
        ] {
            if !(v > 1.0 && v.is_finite()) {
                return Err(Error::config(field, "must exceed 1"));
            }
        }
        if !(self.backward_search_scale >= 1.0 && self.backward_search_scale.is_finite()) {
            return Err(Error::config("cycle.backward_search_scale", "must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.final_center_jitter) {
            return Err(Error::config("cycle.final_center_jitter", "must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.final_scale_jitter) {
            return Err(Error::config("cycle.final_scale_jitter", "must lie in [0, 1]"));
        }
        if !(self.min_box_px > 0.0) {
            return Err(Error::config("cycle.min_box_px", "must be positive"));
        }
        Ok(())
    }
}

/// Everything a training step depends on besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub cycle: CycleConfig,
    pub loss: LossWeights,
    pub dca: DcaConfig,
    pub variant: Variant,
    pub seed: u64,
    /// Extra checkpoints every this many steps (0: end of epoch only).
    pub checkpoint_every: usize,
    /// Keep one checkpoint per epoch instead of overwriting.
    pub keep_epoch_checkpoints: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.cycle.validate()?;
        self.loss.validate()?;
        self.dca.validate()
    }
}

/// Decorrelated per-step generator derived from the root seed.
pub fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix((epoch as u64) << 32 | step as u64)))
}

/// One encoder pass, counted by context presence.
pub fn run_hop<M: TrackModel + ?Sized>(
    model: &M,
    template: &Tensor,
    crops: &[Image],
    context: &ContextTokens,
    tags: &[FrameTag],
) -> Result<HopOutput> {
    if context.is_empty() {
        instrument::record(|c| c.plain_encodes += 1);
    } else {
        instrument::record(|c| c.context_encodes += 1);
    }
    model.hop(template, crops, context, tags)
}

/// Decodes a hop into frame-pixel boxes, enforcing the minimum size.
pub fn frame_boxes(out: &HopOutput, transforms: &[CropTransform], min_px: f64) -> Result<(Vec<BBox>, usize)> {
    let mut degenerate = 0;
    let mut boxes = Vec::with_capacity(transforms.len());
    for (b, t) in decode_box(&out.maps)?.iter().zip(transforms) {
        let (fb, changed) = map_box(b, t, Direction::ToFrame)?.clamp_min_size(min_px);
        if changed {
            degenerate += 1;
        }
        boxes.push(fb);
    }
    if degenerate > 0 {
        instrument::record(|c| c.degenerate_boxes += degenerate as u64);
    }
    Ok((boxes, degenerate))
}

fn next_context<M: TrackModel + ?Sized, R: Rng>(
    model: &M,
    policy: ContextPolicy,
    out: &HopOutput,
    dca: &DcaConfig,
    rng: &mut R,
) -> Result<ContextTokens> {
    let k = dca.token_length;
    match policy {
        ContextPolicy::None => Ok(ContextTokens::none()),
        ContextPolicy::Prompt => sample_prompt(&out.f_x, &out.attn, &out.maps, k),
        ContextPolicy::Noise => {
            let exclude = if dca.noise_exclude_topk {
                Some(prompt_indices(&out.attn, &out.maps.cls_rows()?, k)?)
            } else {
                None
            };
            sample_noise(&out.f_x, k, rng, exclude.as_deref())
        }
        ContextPolicy::Query => {
            let b = out.f_x.dim(0)?;
            Ok(ContextTokens {
                tokens: Some(model.query_tokens(b)?),
                mode: Mode::Prompt,
                source_indices: vec![Vec::new(); b],
            })
        }
    }
}

#[derive(Debug)]
pub struct ForwardResult {
    /// Frame-pixel predictions, `[hop][sample]`.
    pub boxes: Vec<Vec<BBox>>,
    pub transforms: Vec<Vec<CropTransform>>,
    /// Mode of the context fed into each hop.
    pub context_modes: Vec<Mode>,
    pub first: HopOutput,
    pub last: HopOutput,
    pub degenerate: usize,
}

fn tags_for(samples: &[TrainSample], frame_of: impl Fn(&TrainSample) -> usize, transforms: &[CropTransform]) -> Vec<FrameTag> {
    samples
        .iter()
        .zip(transforms)
        .map(|(s, t)| FrameTag {
            sequence_id: s.sequence_id.clone(),
            frame_index: frame_of(s),
            transform: *t,
        })
        .collect()
}

fn crop_all<'a>(
    frames: impl Iterator<Item = &'a image::RgbImage>,
    boxes: &[BBox],
    factor: f64,
    res: usize,
) -> Result<(Vec<Image>, Vec<CropTransform>)> {
    let mut crops = Vec::with_capacity(boxes.len());
    let mut transforms = Vec::with_capacity(boxes.len());
    for (f, b) in frames.zip(boxes) {
        let (c, t) = crop(f, b, factor, res)?;
        crops.push(c);
        transforms.push(t);
    }
    Ok((crops, transforms))
}

pub fn forward_track<M: TrackModel + ?Sized, R: Rng>(
    model: &M,
    samples: &[TrainSample],
    policy: ContextPolicy,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ForwardResult> {
    let ec = model.encoder_config();
    let l = samples.first().map(|s| s.x_u.len()).unwrap_or(0);
    if l == 0 || samples.iter().any(|s| s.x_u.len() != l) {
        return Err(Error::InvalidArgument("samples need equal, non-empty windows".into()));
    }
    let y0: Vec<BBox> = samples.iter().map(|s| s.y0).collect();
    let (z_crops, _) = crop_all(samples.iter().map(|s| &*s.z0), &y0, cfg.cycle.template_factor, ec.template_res)?;
    let z = model.embed_template(&z_crops)?;
    let mut prev = y0;
    let mut context = ContextTokens::none();
    let mut boxes = Vec::with_capacity(l);
    let mut transforms = Vec::with_capacity(l);
    let mut context_modes = Vec::with_capacity(l);
    let mut first = None;
    let mut last = None;
    let mut degenerate = 0;
    for i in 0..l {
        let (crops, ts) = crop_all(samples.iter().map(|s| &*s.x_u[i]), &prev, cfg.cycle.search_factor, ec.search_res)?;
        let tags = tags_for(samples, |s| s.frame_indices[i], &ts);
        context_modes.push(context.mode);
        let out = run_hop(model, &z, &crops, &context, &tags)?;
        let (b, d) = frame_boxes(&out, &ts, cfg.cycle.min_box_px)?;
        degenerate += d;
        prev = b.clone();
        boxes.push(b);
        transforms.push(ts);
        context = next_context(model, policy, &out, &cfg.dca, rng)?;
        if i == 0 {
            first = Some(out.clone());
        }
        last = Some(out);
    }
    Ok(ForwardResult {
        boxes,
        transforms,
        context_modes,
        first: first.expect("l >= 1"),
        last: last.expect("l >= 1"),
        degenerate,
    })
}

#[derive(Debug)]
pub struct BackwardResult {
    /// Predicted box on the labeled frame, frame pixels.
    pub boxes: Vec<BBox>,
    /// Transform of the final search crop.
    pub transforms: Vec<CropTransform>,
    pub tags: Vec<FrameTag>,
    pub context_modes: Vec<Mode>,
    /// Which frame each hop searched, as a position in the source sequence.
    pub frames_visited: Vec<usize>,
    pub last: HopOutput,
    pub degenerate: usize,
}

/// Tracks from the last forward prediction back to the labeled frame.
///
/// With `jitter` the final search region is randomly shifted and rescaled.
pub fn backward_track<M: TrackModel + ?Sized, R: Rng>(
    model: &M,
    forward: &ForwardResult,
    samples: &[TrainSample],
    policy: ContextPolicy,
    cfg: &TrainConfig,
    jitter: bool,
    rng: &mut R,
) -> Result<BackwardResult> {
    let ec = model.encoder_config();
    let l = forward.boxes.len();
    let m = cfg.schedule.backward_steps;
    if m == 0 || m > l {
        return Err(Error::InvalidArgument(format!("{m} backward hops over {l} forward frames")));
    }
    let last_boxes = &forward.boxes[l - 1];
    let (ref_crops, _) = crop_all(
        samples.iter().map(|s| &*s.x_u[l - 1]),
        last_boxes,
        cfg.cycle.template_factor,
        ec.template_res,
    )?;
    let z = model.embed_template(&ref_crops)?;
    let mut prev = last_boxes.clone();
    let mut context = ContextTokens::none();
    let mut context_modes = Vec::with_capacity(m);
    let mut frames_visited = Vec::with_capacity(m);
    let mut degenerate = 0;
    for j in 1..m {
        let idx = l - 1 - j;
        let (crops, ts) = crop_all(samples.iter().map(|s| &*s.x_u[idx]), &prev, cfg.cycle.search_factor, ec.search_res)?;
        let tags = tags_for(samples, |s| s.frame_indices[idx], &ts);
        context_modes.push(context.mode);
        frames_visited.push(samples[0].frame_indices[idx]);
        let out = run_hop(model, &z, &crops, &context, &tags)?;
        let (b, d) = frame_boxes(&out, &ts, cfg.cycle.min_box_px)?;
        degenerate += d;
        prev = b;
        context = next_context(model, policy, &out, &cfg.dca, rng)?;
    }
    let base_factor = cfg.cycle.search_factor * cfg.cycle.backward_search_scale;
    let mut crops = Vec::with_capacity(samples.len());
    let mut transforms = Vec::with_capacity(samples.len());
    for (s, b) in samples.iter().zip(&prev) {
        let (mut center, mut factor) = (*b, base_factor);
        if jitter {
            let side = factor * (b.w * b.h).sqrt();
            let j = cfg.cycle.final_center_jitter;
            if j > 0.0 {
                center = center.translated(rng.random_range(-j..=j) * side, rng.random_range(-j..=j) * side);
            }
            let sj = cfg.cycle.final_scale_jitter;
            if sj > 0.0 {
                factor *= rng.random_range(-sj..=sj).exp();
            }
            factor = factor.max(1.0 + 1e-6);
        }
        let (c, t) = crop(&*s.z0, &center, factor, ec.search_res)?;
        crops.push(c);
        transforms.push(t);
    }
    let tags = tags_for(samples, |_| 0, &transforms);
    context_modes.push(context.mode);
    frames_visited.push(0);
    let out = run_hop(model, &z, &crops, &context, &tags)?;
    let (boxes, d) = frame_boxes(&out, &transforms, cfg.cycle.min_box_px)?;
    degenerate += d;
    Ok(BackwardResult {
        boxes,
        transforms,
        tags,
        context_modes,
        frames_visited,
        last: out,
        degenerate,
    })
}

/// Loss of one cycle, before any parameter update.
#[derive(Debug)]
pub struct CycleLoss {
    pub phase: Mode,
    pub policy: ContextPolicy,
    /// `None` when no sample kept a visible target.
    pub main: Option<LossTerms>,
    pub noise: Option<LossTerms>,
    pub total: Option<Tensor>,
    pub forward: ForwardResult,
    pub backward: BackwardResult,
    pub invisible: usize,
}

/// Detached copy of the first forward hop's features, rolled by one sample
/// so every sample is perturbed by another sample's tokens. A batch of one
/// falls back to its own earlier (time-shifted) frame.
fn foreign_features(first: &HopOutput) -> Result<Tensor> {
    let f = first.f_x.detach();
    let b = f.dim(0)?;
    if b == 1 {
        return Ok(f);
    }
    Ok(Tensor::cat(&[f.narrow(0, 1, b - 1)?, f.narrow(0, 0, 1)?], 0)?)
}

pub fn cycle_loss<M: TrackModel + ?Sized, R: Rng>(
    model: &M,
    samples: &[TrainSample],
    epoch: usize,
    cfg: &TrainConfig,
    jitter: bool,
    rng: &mut R,
) -> Result<CycleLoss> {
    let phase = select_mode(epoch, &cfg.schedule.dca);
    let policy = ContextPolicy::resolve(cfg.variant, phase);
    let forward = forward_track(model, samples, policy, cfg, rng)?;
    let backward = backward_track(model, &forward, samples, policy, cfg, jitter, rng)?;
    let grid = model.encoder_config().grid();

    let mut rows = Vec::new();
    let mut gts = Vec::new();
    for (i, (s, t)) in samples.iter().zip(&backward.transforms).enumerate() {
        let (clipped, visible) = map_box(&s.y0, t, Direction::ToCrop)?.clip_to_unit()?;
        if visible {
            rows.push(i);
            gts.push(clipped);
        }
    }
    let invisible = samples.len() - rows.len();
    if invisible > 0 {
        instrument::record(|c| c.invisible_targets += invisible as u64);
    }
    let (mut main, mut noise, mut total) = (None, None, None);
    if !rows.is_empty() {
        // only the labeled frame's box is ever supervised
        for i in &rows {
            let frame = backward.tags[*i].frame_index;
            instrument::record(|c| {
                if frame == 0 {
                    c.labeled_gt_in_loss += 1
                } else {
                    c.unlabeled_gt_in_loss += 1
                }
            });
        }
        let dtype = model.dtype();
        let dev = model.device();
        let gt_t = crate::heads::boxes_tensor(&gts, dtype, dev)?;
        let targets = gts.iter().map(|g| gaussian_target(g, grid)).collect::<Result<Vec<_>>>()?;
        let target_t = target_tensor(&targets, grid, dtype, dev)?;
        let terms_for = |maps: &crate::heads::PredictionMaps| -> Result<LossTerms> {
            let maps = maps.select(&rows)?;
            let pred = box_at_cells(&maps, &peak_cells(&maps)?)?;
            total_loss(&pred, &gt_t, &maps.cls, &target_t, &cfg.loss)
        };
        let m = terms_for(&backward.last.maps)?;
        let mut t = m.total.clone();
        let noise_active = policy == ContextPolicy::Noise && cfg.variant != Variant::NoNoise;
        if noise_active {
            let foreign = foreign_features(&forward.first)?;
            let tokens = sample_noise(&foreign, cfg.dca.token_length, rng, None)?;
            let maps = model.noise_decode(&backward.last.f_x, &tokens, &backward.tags)?;
            let n = terms_for(&maps)?;
            t = (t + (&n.total * cfg.dca.noise_loss_weight)?)?;
            noise = Some(n);
        }
        main = Some(m);
        total = Some(t);
    }
    Ok(CycleLoss {
        phase,
        policy,
        main,
        noise,
        total,
        forward,
        backward,
        invisible,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mode: Mode,
    pub context: ContextPolicy,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub loss_noise: f64,
    pub degenerate_boxes: usize,
    pub invisible_targets: usize,
    pub skipped: bool,
}

/// Resumable position in the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimizer-visible steps across all epochs.
    pub global_step: u64,
    pub optimizer_steps: u64,
}

impl TrainState {
    /// `(1-based epoch, 0-based step within it)` of the next step to run.
    pub fn position(&self, steps_per_epoch: usize) -> (usize, usize) {
        let g = self.global_step as usize;
        (g / steps_per_epoch + 1, g % steps_per_epoch)
    }
}

fn gradients_finite(model: &Tracker, grads: &candle_core::backprop::GradStore) -> Result<bool> {
    for (_, var, _) in model.store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let s = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Consecutive non-finite losses tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: usize = 20;

pub struct Trainer {
    pub model: Tracker,
    pub config: TrainConfig,
    pub state: TrainState,
    opt_backbone: AdamW,
    opt_rest: AdamW,
    nonfinite_streak: usize,
}

impl Trainer {
    pub fn new(model: Tracker, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let group = |g: Group| -> Vec<(String, candle_core::Var)> {
            model
                .store
                .vars()
                .filter(|(_, _, grp)| *grp == g)
                .map(|(n, v, _)| (n.to_string(), v.clone()))
                .collect()
        };
        let s = &config.schedule;
        let opt_backbone = AdamW::new(group(Group::Backbone), s.lr_backbone, s.weight_decay)?;
        let opt_rest = AdamW::new(group(Group::Rest), s.lr_rest, s.weight_decay)?;
        Ok(Self {
            model,
            config,
            state: TrainState {
                global_step: 0,
                optimizer_steps: 0,
            },
            opt_backbone,
            opt_rest,
            nonfinite_streak: 0,
        })
    }

    fn set_lr(&mut self, epoch: usize) {
        let f = self.config.schedule.lr_factor(epoch);
        self.opt_backbone.lr = self.config.schedule.lr_backbone * f;
        self.opt_rest.lr = self.config.schedule.lr_rest * f;
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        (self.opt_backbone.lr, self.opt_rest.lr)
    }

    /// One optimizer update on a batch; non-finite losses skip the update.
    pub fn train_step(&mut self, batch: &[TrainSample], epoch: usize, rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        self.set_lr(epoch);
        let out = cycle_loss(&self.model, batch, epoch, &self.config, true, rng)?;
        let mut rec = StepRecord {
            step: self.state.global_step + 1,
            epoch,
            mode: out.phase,
            context: out.policy,
            loss: 0.0,
            loss_cls: 0.0,
            loss_l1: 0.0,
            loss_giou: 0.0,
            loss_noise: 0.0,
            degenerate_boxes: out.forward.degenerate + out.backward.degenerate,
            invisible_targets: out.invisible,
            skipped: true,
        };
        if let (Some(main), Some(total)) = (&out.main, &out.total) {
            let [_, cls, l1, giou] = main.scalars()?;
            let noise = match &out.noise {
                Some(n) => n.scalars()?[0],
                None => 0.0,
            };
            let loss = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            rec.loss = loss;
            rec.loss_cls = cls;
            rec.loss_l1 = l1;
            rec.loss_giou = giou;
            rec.loss_noise = noise;
            let grads = if loss.is_finite() { Some(total.backward()?) } else { None };
            let finite = match &grads {
                Some(g) => gradients_finite(&self.model, g)?,
                None => false,
            };
            if let (true, Some(grads)) = (finite, grads) {
                self.opt_backbone.step(&grads)?;
                self.opt_rest.step(&grads)?;
                self.state.optimizer_steps += 1;
                rec.skipped = false;
                self.nonfinite_streak = 0;
            } else {
                log::warn!("step {}: non-finite loss or gradient, batch skipped", rec.step);
                self.nonfinite_streak += 1;
                if self.nonfinite_streak >= MAX_NONFINITE_STREAK {
                    return Err(Error::Numeric(format!(
                        "{MAX_NONFINITE_STREAK} consecutive non-finite losses at step {}",
                        rec.step
                    )));
                }
            }
        }
        self.state.global_step += 1;
        Ok(rec)
    }

    fn optimizer_state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (prefix, opt) in [("backbone", &self.opt_backbone), ("rest", &self.opt_rest)] {
            for (k, v) in opt.state()? {
                out.insert(format!("{prefix}.{k}"), v);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let state = serde_json::to_string(&self.state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &self.model, &self.optimizer_state()?, Some(&state))
    }

    /// Restores a trainer from a training checkpoint.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let loaded = checkpoint::load(path, &candle_core::Device::Cpu)?;
        let raw = loaded
            .train_state
            .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", path.display())))?;
        let state: TrainState = serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut t = Trainer::new(loaded.tracker, config)?;
        let split = |prefix: &str| -> BTreeMap<String, Tensor> {
            loaded
                .optimizer
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v.clone())))
                .collect()
        };
        t.opt_backbone.load_state(&split("backbone."), state.optimizer_steps)?;
        t.opt_rest.load_state(&split("rest."), state.optimizer_steps)?;
        t.state = state;
        Ok(t)
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub final_model: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            checkpoint: out_dir.join("checkpoint.safetensors"),
            final_model: out_dir.join("model.safetensors"),
            log: out_dir.join("train_log.jsonl"),
        }
    }
}

fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match serde_json::from_str::<StepRecord>(&line) {
            Ok(r) if r.step <= keep_through => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Io(std::io::Error::other(e)))?);
    }
    Ok(out)
}

/// Runs (or resumes) the epoch loop, checkpointing after every epoch.
///
/// `stop_after` ends the call early after that many steps, leaving a
/// resumable checkpoint; it exists to exercise interruption.
pub fn train(
    mut trainer: Trainer,
    sequences: &[FrameSequence],
    out_dir: &Path,
    stop_after: Option<u64>,
) -> Result<Trainer> {
    fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    if trainer.state.global_step == 0 {
        trainer.model.pixel_norm = pixel_norm(sequences);
        if paths.log.exists() {
            fs::remove_file(&paths.log)?;
        }
    } else {
        truncate_log(&paths.log, trainer.state.global_step)?;
    }
    let mut log_file = OpenOptions::new().create(true).append(true).open(&paths.log)?;
    let sched = trainer.config.schedule.clone();
    let seed = trainer.config.seed;
    let (start_epoch, start_step) = trainer.state.position(sched.steps_per_epoch);
    let mut ran = 0u64;
    for epoch in start_epoch..=sched.total_epochs {
        let first = if epoch == start_epoch { start_step } else { 0 };
        for step in first..sched.steps_per_epoch {
            let mut rng = step_rng(seed, epoch, step);
            let batch = sample_training_batch(sequences, sched.forward_length, sched.batch_size, &mut rng)?;
            let rec = trainer.train_step(&batch, epoch, &mut rng)?;
            let line = serde_json::to_string(&rec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(log_file, "{line}")?;
            ran += 1;
            let every = trainer.config.checkpoint_every;
            let end_of_epoch = step + 1 == sched.steps_per_epoch;
            if end_of_epoch || (every > 0 && trainer.state.global_step % every as u64 == 0) {
                log_file.flush()?;
                trainer.save(&paths.checkpoint)?;
            }
            if end_of_epoch {
                log::info!("epoch {epoch} done at step {} (loss {:.4})", rec.step, rec.loss);
                if trainer.config.keep_epoch_checkpoints {
                    trainer.save(&out_dir.join(format!("checkpoint_epoch{epoch:04}.safetensors")))?;
                }
            }
            if stop_after.is_some_and(|n| ran >= n) {
                log_file.flush()?;
                trainer.save(&paths.checkpoint)?;
                return Ok(trainer);
            }
        }
    }
    log_file.flush()?;
    checkpoint::save(&paths.final_model, &trainer.model, &BTreeMap::new(), None)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_table() {
        use ContextPolicy as P;
        assert_eq!(P::resolve(Variant::Full, Mode::Prompt), P::Prompt);
        assert_eq!(P::resolve(Variant::Full, Mode::Noise), P::Noise);
        assert_eq!(P::resolve(Variant::NoPrompt, Mode::Prompt), P::None);
        assert_eq!(P::resolve(Variant::NoPrompt, Mode::Noise), P::Noise);
        assert_eq!(P::resolve(Variant::NoNoise, Mode::Noise), P::Prompt);
        assert_eq!(P::resolve(Variant::Query, Mode::Prompt), P::Query);
        assert_eq!(P::resolve(Variant::Query, Mode::Noise), P::Noise);
    }

    #[test]
    fn lr_drops_after_decay_epoch() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_factor(16), 1.0);
        assert_eq!(s.lr_factor(17), 0.1);
    }

    #[test]
    fn schedule_validation_names_fields() {
        let s = TrainSchedule {
            lr_decay_epoch: 30,
            ..TrainSchedule::default()
        };
        match s.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.lr_decay_epoch"),
            other => panic!("{other:?}"),
        }
        let s = TrainSchedule {
            backward_steps: 3,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn position_after_steps() {
        let st = TrainState {
            global_step: 450,
            optimizer_steps: 450,
        };
        assert_eq!(st.position(200), (3, 50));
    }

    #[test]
    fn step_rngs_differ() {
        let a: u64 = step_rng(1, 1, 0).random();
        let b: u64 = step_rng(1, 1, 1).random();
        let c: u64 = step_rng(1, 1, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
