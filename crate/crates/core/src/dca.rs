//! Dual-mode contextual association.
//!
//! Early in training the most target-like search tokens (final-layer saliency
//! times classification response, averaged over heads) are carried into the
//! next frame as prompts. Later, uniformly sampled tokens are carried instead
//! and a noise decoder is supervised on features perturbed by tokens from
//! another sequence.

use std::collections::HashSet;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mlp, SaliencyDirection};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, PredictionHead, PredictionMaps};
use crate::instrument;
use crate::nn::{softmax_last, Group, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    Prompt,
    Noise,
}

/// Tokens carried from one encoder call to the next.
#[derive(Debug, Clone)]
pub struct ContextTokens {
    /// `(B, K, D)`; absent when `mode` is [`Mode::None`].
    pub tokens: Option<Tensor>,
    pub mode: Mode,
    /// Search-token index of every carried token, per batch element.
    pub source_indices: Vec<Vec<usize>>,
}

impl ContextTokens {
    pub fn none() -> Self {
        Self {
            tokens: None,
            mode: Mode::None,
            source_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.as_ref().and_then(|t| t.dim(1).ok()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Epoch-indexed switch between prompt and noise tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcaSchedule {
    pub switch_epoch: usize,
    pub token_length: usize,
}

impl DcaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.token_length == 0 {
            return Err(Error::config("dca.token_length", "must be at least 1"));
        }
        Ok(())
    }
}

/// Prompt tokens up to and including the switch epoch, noise afterwards.
pub fn select_mode(epoch: usize, sched: &DcaSchedule) -> Mode {
    if epoch <= sched.switch_epoch {
        Mode::Prompt
    } else {
        Mode::Noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcaConfig {
    pub token_length: usize,
    /// `None` derives the switch from the epoch budget, see [`DcaConfig::schedule`].
    pub switch_epoch: Option<usize>,
    pub noise_exclude_topk: bool,
    pub noise_loss_weight: f64,
    pub saliency_direction: SaliencyDirection,
}

impl Default for DcaConfig {
    fn default() -> Self {
        Self {
            token_length: 8,
            switch_epoch: None,
            noise_exclude_topk: false,
            noise_loss_weight: 1.0,
            saliency_direction: SaliencyDirection::TemplateToSearch,
        }
    }
}

impl DcaConfig {
    /// Resolves the switch epoch: explicit value, else 75 for a 150-epoch
    /// budget, else half the budget.
    pub fn schedule(&self, total_epochs: usize) -> DcaSchedule {
        let switch_epoch = self.switch_epoch.unwrap_or(if total_epochs == 150 { 75 } else { total_epochs / 2 });
        DcaSchedule {
            switch_epoch,
            token_length: self.token_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_length == 0 {
            return Err(Error::config("dca.token_length", "must be at least 1"));
        }
        if !(self.noise_loss_weight >= 0.0) {
            return Err(Error::config("dca.noise_loss_weight", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Head-averaged product of saliency and classification response.
///
/// `attn` holds one row of length `N_s` per head, `cls` the flattened response.
pub fn score_tokens(attn: &[Vec<f32>], cls: &[f32]) -> Result<Vec<f32>> {
    let n = attn.len();
    if n == 0 {
        return Err(Error::Shape("saliency has no heads".into()));
    }
    if let Some(row) = attn.iter().find(|row| row.len() != cls.len()) {
        return Err(Error::Shape(format!("saliency row of {} vs cls of {}", row.len(), cls.len())));
    }
    Ok((0..cls.len())
        .map(|t| {
            let mut s = 0f32;
            for head in attn {
                s += head[t] * cls[t];
            }
            s / n as f32
        })
        .collect())
}

/// Indices of the `k` largest scores, ordered by score then by index.
pub fn top_k(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} tokens", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn gather_rows(f_x: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let device = f_x.device();
    let rows = indices
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let ids = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), device)?;
            f_x.get(b)?.index_select(&ids, 0)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

fn saliency_rows(attn: &Tensor) -> Result<Vec<Vec<Vec<f32>>>> {
    Ok(attn.detach().to_dtype(candle_core::DType::F32)?.to_vec3::<f32>()?)
}

/// Per-batch prompt indices without gathering the features.
pub fn prompt_indices(attn: &Tensor, cls_rows: &[Vec<f32>], k: usize) -> Result<Vec<Vec<usize>>> {
    let sal = saliency_rows(attn)?;
    if sal.len() != cls_rows.len() {
        return Err(Error::Shape(format!("saliency batch {} vs cls batch {}", sal.len(), cls_rows.len())));
    }
    sal.iter()
        .zip(cls_rows)
        .map(|(heads, cls)| top_k(&score_tokens(heads, cls)?, k))
        .collect()
}

/// Carries the `k` best-scoring search tokens. Selection is detached; the
/// selected feature rows keep their gradient path.
pub fn sample_prompt(f_x: &Tensor, attn: &Tensor, maps: &PredictionMaps, k: usize) -> Result<ContextTokens> {
    let n_s = f_x.dim(1)?;
    if k > n_s {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n_s} search tokens")));
    }
    let indices = prompt_indices(attn, &maps.cls_rows()?, k)?;
    instrument::record(|c| c.prompt_samples += 1);
    Ok(ContextTokens {
        tokens: Some(gather_rows(f_x, &indices)?),
        mode: Mode::Prompt,
        source_indices: indices,
    })
}

/// Carries `k` distinct uniformly drawn search tokens per batch element,
/// optionally never drawing the listed indices.
pub fn sample_noise<R: Rng>(f_x: &Tensor, k: usize, rng: &mut R, exclude: Option<&[Vec<usize>]>) -> Result<ContextTokens> {
    let (b, n_s, _) = f_x.dims3()?;
    if k > n_s {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n_s} search tokens")));
    }
    let mut indices = Vec::with_capacity(b);
    for row in 0..b {
        let picked = match exclude.and_then(|e| e.get(row)) {
            Some(excluded) if !excluded.is_empty() => {
                let banned: HashSet<usize> = excluded.iter().copied().collect();
                let pool: Vec<usize> = (0..n_s).filter(|i| !banned.contains(i)).collect();
                if k > pool.len() {
                    return Err(Error::InvalidArgument(format!(
                        "k = {k} exceeds the {} tokens left after exclusion",
                        pool.len()
                    )));
                }
                rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
            }
            _ => rand::seq::index::sample(rng, n_s, k).into_vec(),
        };
        indices.push(picked);
    }
    instrument::record(|c| c.noise_samples += 1);
    Ok(ContextTokens {
        tokens: Some(gather_rows(f_x, &indices)?),
        mode: Mode::Noise,
        source_indices: indices,
    })
}

/// One cross-attention layer (search features attend to noise tokens)
/// followed by its own prediction head.
#[derive(Debug, Clone)]
pub struct NoiseDecoder {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm_ff: LayerNorm,
    mlp: Mlp,
    head: PredictionHead,
    num_heads: usize,
}

impl NoiseDecoder {
    /// With `zero_residual` both residual branches start as exact identities.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embed_dim: usize,
        num_heads: usize,
        grid: usize,
        head_cfg: &HeadConfig,
        zero_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Rest;
        let d = embed_dim;
        let name = "noise_decoder";
        let (proj, mlp) = if zero_residual {
            (
                Linear::zeros(store, &format!("{name}.proj"), d, d, g)?,
                Mlp::zero_output(store, &format!("{name}.mlp"), d, 2 * d, g, rng)?,
            )
        } else {
            (
                Linear::new(store, &format!("{name}.proj"), d, d, g, rng)?,
                Mlp::new(store, &format!("{name}.mlp"), d, 2 * d, g, rng)?,
            )
        };
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d, g)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d, g)?,
            q: Linear::new(store, &format!("{name}.q"), d, d, g, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, g, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, g, rng)?,
            proj,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d, g)?,
            mlp,
            head: PredictionHead::new(store, &format!("{name}.head"), d, grid, head_cfg, rng)?,
            num_heads,
        })
    }

    /// Search features after cross-attention to the noise tokens.
    pub fn perturb(&self, f_x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (b, n, d) = f_x.dims3()?;
        let (bn, k, dn) = noise.dims3()?;
        if b != bn || d != dn {
            return Err(Error::Shape(format!("features {b}x{n}x{d} vs noise {bn}x{k}x{dn}")));
        }
        let h = self.num_heads;
        let hd = d / h;
        let split = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, len, h, hd))?.transpose(1, 2)?.contiguous()
        };
        let kv_in = self.norm_kv.forward(noise)?;
        let q = split(self.q.forward(&self.norm_q.forward(f_x)?)?, n)?;
        let kk = split(self.k.forward(&kv_in)?, k)?;
        let v = split(self.v.forward(&kv_in)?, k)?;
        let probs = softmax_last(&(q.matmul(&kk.t()?)? * (1.0 / (hd as f64).sqrt()))?)?;
        let attended = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        let x = (f_x + self.proj.forward(&attended)?)?;
        Ok((&x + self.mlp.forward(&self.norm_ff.forward(&x)?)?)?)
    }

    pub fn decode(&self, f_x: &Tensor, noise: &ContextTokens) -> Result<PredictionMaps> {
        if noise.mode != Mode::Noise {
            return Err(Error::InvalidArgument(format!("noise decoder given {:?} tokens", noise.mode)));
        }
        let tokens = noise
            .tokens
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("noise context carries no tokens".into()))?;
        self.head.predict(&self.perturb(f_x, tokens)?)
    }
}
