//! The tracking model seen by the training and inference loops.
//!
//! Loops talk to a [`TrackModel`], so the learned [`Tracker`] and the
//! ground-truth [`OracleModel`] used to check cycle geometry are
//! interchangeable.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig, SaliencyDirection};
use crate::dca::{ContextTokens, NoiseDecoder};
use crate::error::{Error, Result};
use crate::geometry::{map_box, BBox, CropTransform, Direction};
use crate::heads::{HeadConfig, PredictionHead, PredictionMaps};
use crate::imaging::{Image, PixelNorm};
use crate::nn::{Group, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Number of learned query tokens (the non-semantic ablation).
    pub query_tokens: usize,
    pub saliency_direction: SaliencyDirection,
    /// Start the noise decoder as an exact identity on the features.
    pub noise_decoder_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            query_tokens: 8,
            saliency_direction: SaliencyDirection::TemplateToSearch,
            noise_decoder_zero_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.query_tokens == 0 || self.query_tokens > self.encoder.max_context_tokens {
            return Err(Error::config(
                "model.query_tokens",
                format!("must lie in 1..={}", self.encoder.max_context_tokens),
            ));
        }
        if self.head.hidden.contains(&0) {
            return Err(Error::config("model.head.hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Where a search crop came from. Only the oracle looks at this.
#[derive(Debug, Clone)]
pub struct FrameTag {
    pub sequence_id: String,
    pub frame_index: usize,
    pub transform: CropTransform,
}

/// One encoder pass over a batch of search crops.
#[derive(Debug, Clone)]
pub struct HopOutput {
    pub maps: PredictionMaps,
    /// `(B, N_s, D)`.
    pub f_x: Tensor,
    /// `(B, n, N_s)` saliency.
    pub attn: Tensor,
}

pub trait TrackModel {
    fn encoder_config(&self) -> &EncoderConfig;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
    /// Template crops -> `(B, N_z, D)` tokens.
    fn embed_template(&self, crops: &[Image]) -> Result<Tensor>;
    fn hop(&self, template: &Tensor, search: &[Image], context: &ContextTokens, tags: &[FrameTag]) -> Result<HopOutput>;
    fn noise_decode(&self, f_x: &Tensor, noise: &ContextTokens, tags: &[FrameTag]) -> Result<PredictionMaps>;
    /// Learned `(B, K, D)` query tokens.
    fn query_tokens(&self, batch: usize) -> Result<Tensor>;
}

fn stack_images(images: &[Image], norm: &PixelNorm, dtype: DType, device: &Device) -> Result<Tensor> {
    let planes = images
        .iter()
        .map(|im| im.to_tensor(norm, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&planes, 0)?)
}

/// The learned tracker: encoder, main head, noise decoder and query tokens.
#[derive(Debug)]
pub struct Tracker {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub pixel_norm: PixelNorm,
    encoder: Encoder,
    head: PredictionHead,
    noise_decoder: NoiseDecoder,
    queries: Tensor,
}

impl Tracker {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device.clone());
        let enc_cfg = &config.encoder;
        let encoder = Encoder::new(enc_cfg, &mut store, &mut rng)?.with_saliency_direction(config.saliency_direction);
        let grid = enc_cfg.grid();
        let head = PredictionHead::new(&mut store, "head", enc_cfg.embed_dim, grid, &config.head, &mut rng)?;
        let noise_decoder = NoiseDecoder::new(
            &mut store,
            enc_cfg.embed_dim,
            enc_cfg.num_heads,
            grid,
            &config.head,
            config.noise_decoder_zero_init,
            &mut rng,
        )?;
        // unit scale, like the layer-normalized features they stand in for
        let queries = store.trunc_normal(
            "query_tokens",
            &[1, config.query_tokens, enc_cfg.embed_dim],
            1.0,
            Group::Rest,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            pixel_norm: PixelNorm::default(),
            encoder,
            head,
            noise_decoder,
            queries,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    pub fn noise_decoder(&self) -> &NoiseDecoder {
        &self.noise_decoder
    }
}

impl TrackModel for Tracker {
    fn encoder_config(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn embed_template(&self, crops: &[Image]) -> Result<Tensor> {
        let z = stack_images(crops, &self.pixel_norm, self.dtype(), self.device())?;
        self.encoder.embed_template(&z)
    }

    fn hop(&self, template: &Tensor, search: &[Image], context: &ContextTokens, _tags: &[FrameTag]) -> Result<HopOutput> {
        let x = stack_images(search, &self.pixel_norm, self.dtype(), self.device())?;
        let x = self.encoder.embed_search(&x)?;
        let out = self.encoder.encode(template, &x, context.tokens.as_ref())?;
        let maps = self.head.predict(&out.f_x)?;
        Ok(HopOutput {
            maps,
            f_x: out.f_x,
            attn: out.attn,
        })
    }

    fn noise_decode(&self, f_x: &Tensor, noise: &ContextTokens, _tags: &[FrameTag]) -> Result<PredictionMaps> {
        self.noise_decoder.decode(f_x, noise)
    }

    fn query_tokens(&self, batch: usize) -> Result<Tensor> {
        let (_, k, d) = self.queries.dims3()?;
        Ok(self.queries.broadcast_as((batch, k, d))?)
    }
}

/// Peak value the oracle writes into its classification map.
pub const ORACLE_PEAK: f64 = 1.0 - 1e-7;

/// A stand-in model that answers every hop with the ground-truth box,
/// exactly encoded in its output maps. Runs in 64-bit.
#[derive(Debug, Clone)]
pub struct OracleModel {
    cfg: EncoderConfig,
    device: Device,
    truth: HashMap<String, Vec<BBox>>,
}

impl OracleModel {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self {
            cfg,
            device: Device::Cpu,
            truth: HashMap::new(),
        }
    }

    /// Registers the per-frame boxes of a sequence.
    pub fn insert(&mut self, sequence_id: impl Into<String>, boxes: Vec<BBox>) {
        self.truth.insert(sequence_id.into(), boxes);
    }

    fn lookup(&self, tag: &FrameTag) -> Result<BBox> {
        let boxes = self
            .truth
            .get(&tag.sequence_id)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no sequence `{}`", tag.sequence_id)))?;
        let b = boxes.get(tag.frame_index).ok_or_else(|| {
            Error::InvalidArgument(format!("oracle has no frame {} of `{}`", tag.frame_index, tag.sequence_id))
        })?;
        map_box(b, &tag.transform, Direction::ToCrop)
    }

    fn perfect_maps(&self, tags: &[FrameTag]) -> Result<PredictionMaps> {
        let g = self.cfg.grid();
        let n = g * g;
        let b = tags.len();
        let mut cls = vec![0f64; b * n];
        let mut offset = vec![0f64; b * 2 * n];
        let mut size = vec![0f64; b * 2 * n];
        for (i, tag) in tags.iter().enumerate() {
            let gt = self.lookup(tag)?;
            let gf = g as f64;
            let col = (gt.cx * gf).floor().clamp(0.0, gf - 1.0);
            let row = (gt.cy * gf).floor().clamp(0.0, gf - 1.0);
            let cell = row as usize * g + col as usize;
            cls[i * n + cell] = ORACLE_PEAK;
            offset[i * 2 * n + cell] = gt.cx * gf - col;
            offset[i * 2 * n + n + cell] = gt.cy * gf - row;
            size[i * 2 * n + cell] = gt.w;
            size[i * 2 * n + n + cell] = gt.h;
        }
        Ok(PredictionMaps {
            cls: Tensor::from_vec(cls, (b, g, g), &self.device)?,
            offset: Tensor::from_vec(offset, (b, 2, g, g), &self.device)?,
            size: Tensor::from_vec(size, (b, 2, g, g), &self.device)?,
        })
    }
}

impl TrackModel for OracleModel {
    fn encoder_config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn dtype(&self) -> DType {
        DType::F64
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn embed_template(&self, crops: &[Image]) -> Result<Tensor> {
        Ok(Tensor::zeros(
            (crops.len(), self.cfg.template_tokens(), self.cfg.embed_dim),
            DType::F64,
            &self.device,
        )?)
    }

    fn hop(&self, _template: &Tensor, search: &[Image], _context: &ContextTokens, tags: &[FrameTag]) -> Result<HopOutput> {
        if search.len() != tags.len() {
            return Err(Error::Shape(format!("{} crops with {} tags", search.len(), tags.len())));
        }
        let maps = self.perfect_maps(tags)?;
        let b = tags.len();
        let n_s = self.cfg.search_tokens();
        let f_x = Tensor::zeros((b, n_s, self.cfg.embed_dim), DType::F64, &self.device)?;
        // all saliency on the target: the classification map itself
        let attn = maps.cls.reshape((b, 1, n_s))?;
        Ok(HopOutput { maps, f_x, attn })
    }

    fn noise_decode(&self, _f_x: &Tensor, _noise: &ContextTokens, tags: &[FrameTag]) -> Result<PredictionMaps> {
        self.perfect_maps(tags)
    }

    fn query_tokens(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, 1, self.cfg.embed_dim), DType::F64, &self.device)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::crop;
    use crate::heads::decode_box;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 32,
                depth: 1,
                ..EncoderConfig::default()
            },
            head: HeadConfig { hidden: [8, 8] },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tracker_hop_shapes() {
        let m = Tracker::new(&tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let z = m.embed_template(&[Image::filled(64, 64, [10.0; 3])]).unwrap();
        let out = m
            .hop(&z, &[Image::filled(128, 128, [20.0; 3])], &ContextTokens::none(), &[])
            .unwrap();
        assert_eq!(out.f_x.dims(), &[1, 64, 32]);
        assert_eq!(out.maps.cls.dims(), &[1, 8, 8]);
        assert_eq!(m.query_tokens(3).unwrap().dims(), &[3, 8, 32]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Tracker::new(&tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let b = Tracker::new(&tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        for ((na, ta), (nb, tb)) in a.store.tensors().iter().zip(b.store.tensors().iter()) {
            assert_eq!(na, nb);
            let d = (ta - tb).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn oracle_decodes_ground_truth() {
        let mut o = OracleModel::new(EncoderConfig::default());
        let gt = BBox::frame(70.3, 41.9, 20.0, 14.0);
        o.insert("s", vec![gt]);
        let frame = Image::filled(160, 120, [0.0; 3]);
        let (img, t) = crop(&frame, &BBox::frame(66.0, 45.0, 18.0, 15.0), 4.0, 128).unwrap();
        let tag = FrameTag {
            sequence_id: "s".into(),
            frame_index: 0,
            transform: t,
        };
        let z = o.embed_template(&[img.clone()]).unwrap();
        let out = o.hop(&z, &[img], &ContextTokens::none(), &[tag]).unwrap();
        let b = decode_box(&out.maps).unwrap()[0];
        let back = map_box(&b, &t, Direction::ToFrame).unwrap();
        for (x, y) in back.params().iter().zip(gt.params()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
