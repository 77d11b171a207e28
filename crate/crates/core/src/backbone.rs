//! Joint template/search transformer encoder.
//!
//! Template tokens, search tokens and optional context tokens are concatenated
//! into one sequence and processed with full self-attention. The search slice
//! of the final layer is the feature map `f_x`; the final layer's attention
//! probabilities yield a per-head saliency for every search token.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Group, LayerNorm, Linear, ParamStore, INIT_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub template_res: usize,
    pub search_res: usize,
    pub max_context_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            template_res: 64,
            search_res: 128,
            max_context_tokens: 16,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.patch_size", self.patch_size),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.depth", self.depth),
            ("encoder.num_heads", self.num_heads),
            ("encoder.template_res", self.template_res),
            ("encoder.search_res", self.search_res),
            ("encoder.mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "encoder.embed_dim",
                format!("{} is not divisible by num_heads {}", self.embed_dim, self.num_heads),
            ));
        }
        for (field, res) in [("encoder.template_res", self.template_res), ("encoder.search_res", self.search_res)] {
            if res % self.patch_size != 0 {
                return Err(Error::config(field, format!("{res} is not divisible by patch_size {}", self.patch_size)));
            }
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_res / self.patch_size).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_res / self.patch_size).pow(2)
    }

    /// Side of the search feature grid.
    pub fn grid(&self) -> usize {
        self.search_res / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Which attention slice is read out as per-search-token saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyDirection {
    /// Template queries attending to search keys, averaged over template queries.
    #[default]
    TemplateToSearch,
    /// Search queries attending to template keys, averaged over template keys.
    SearchToTemplate,
}

/// Encoder result for a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, N_s, D)` final-layer search features.
    pub f_x: Tensor,
    /// `(B, n_heads, N_s)` saliency of every search token.
    pub attn: Tensor,
    /// Length of the full sequence that was attended over.
    pub seq_len: usize,
}

/// Per-head saliency from final-layer attention probabilities `(B, n, S, S)`.
///
/// Sequence layout is `[template; search; context]`.
pub fn extract_saliency(
    last_attention: &Tensor,
    n_template: usize,
    n_search: usize,
    direction: SaliencyDirection,
) -> Result<Tensor> {
    let (_, _, s_q, s_k) = last_attention.dims4()?;
    if s_q != s_k || n_template + n_search > s_q {
        return Err(Error::Shape(format!(
            "attention {s_q}x{s_k} cannot hold {n_template} template + {n_search} search tokens"
        )));
    }
    let out = match direction {
        SaliencyDirection::TemplateToSearch => last_attention
            .narrow(2, 0, n_template)?
            .narrow(3, n_template, n_search)?
            .mean(2)?,
        SaliencyDirection::SearchToTemplate => last_attention
            .narrow(2, n_template, n_search)?
            .narrow(3, 0, n_template)?
            .mean(3)?,
    };
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
    head_dim: usize,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, num_heads: usize, group: Group, rng: &mut R) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, group, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, group, rng)?,
            num_heads,
            head_dim: dim / num_heads,
        })
    }

    /// Returns the block output and the attention probabilities `(B, n, S, S)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, s, d) = x.dims3()?;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, s, 3, self.num_heads, self.head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (self.head_dim as f64).sqrt()))?;
        let probs = softmax_last(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: Group, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, group, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, group, rng)?,
        })
    }

    pub(crate) fn zero_output<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: Group, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, group, rng)?,
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, dim, group)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, probs) = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = (x + a)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((x, probs))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_proj: Linear,
    pos_template: Tensor,
    pos_search: Tensor,
    pos_context: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    direction: SaliencyDirection,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = Group::Backbone;
        let d = cfg.embed_dim;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_proj = Linear::new(store, "encoder.patch_embed", patch_dim, d, g, rng)?;
        let pos_template = store.trunc_normal("encoder.pos_template", &[cfg.template_tokens(), d], INIT_STD, g, rng)?;
        let pos_search = store.trunc_normal("encoder.pos_search", &[cfg.search_tokens(), d], INIT_STD, g, rng)?;
        let pos_context = store.trunc_normal("encoder.pos_context", &[1, d], INIT_STD, g, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("encoder.blocks.{i}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g)?,
                attn: Attention::new(store, &format!("{name}.attn"), d, cfg.num_heads, g, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g)?,
                mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, g, rng)?,
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d, g)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            pos_template,
            pos_search,
            pos_context,
            blocks,
            norm,
            direction: SaliencyDirection::default(),
        })
    }

    pub fn with_saliency_direction(mut self, direction: SaliencyDirection) -> Self {
        self.direction = direction;
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch_size;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("cannot patchify {c}x{h}x{w} with patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = images
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, gh * gw, c * p * p))?;
        self.patch_proj.forward(&patches)
    }

    fn check_res(&self, images: &Tensor, res: usize) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != res || w != res {
            return Err(Error::Shape(format!("expected 3x{res}x{res} input, got {c}x{h}x{w}")));
        }
        Ok(())
    }

    /// `(B, 3, template_res, template_res)` -> `(B, N_z, D)`.
    pub fn embed_template(&self, images: &Tensor) -> Result<Tensor> {
        self.check_res(images, self.cfg.template_res)?;
        Ok(self.patchify(images)?.broadcast_add(&self.pos_template)?)
    }

    /// `(B, 3, search_res, search_res)` -> `(B, N_s, D)`.
    pub fn embed_search(&self, images: &Tensor) -> Result<Tensor> {
        self.check_res(images, self.cfg.search_res)?;
        Ok(self.patchify(images)?.broadcast_add(&self.pos_search)?)
    }

    /// Embeds a batch of template- or search-resolution images, picking the
    /// positional table by resolution (template first when both match).
    pub fn patch_embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h == w && h == self.cfg.template_res {
            self.embed_template(images)
        } else if h == w && h == self.cfg.search_res {
            self.embed_search(images)
        } else {
            Err(Error::Shape(format!(
                "resolution {h}x{w} matches neither template {} nor search {}",
                self.cfg.template_res, self.cfg.search_res
            )))
        }
    }

    pub fn encode(&self, z_tokens: &Tensor, x_tokens: &Tensor, context: Option<&Tensor>) -> Result<EncoderOutput> {
        let (b, n_z, d) = z_tokens.dims3()?;
        let (bx, n_s, dx) = x_tokens.dims3()?;
        if b != bx || d != dx || d != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "template tokens {b}x{n_z}x{d} incompatible with search tokens {bx}x{n_s}x{dx}"
            )));
        }
        let mut parts = vec![z_tokens.clone(), x_tokens.clone()];
        if let Some(ctx) = context {
            let (bc, k, dc) = ctx.dims3()?;
            if bc != b || dc != d {
                return Err(Error::Shape(format!("context tokens {bc}x{k}x{dc} incompatible with batch {b}x{d}")));
            }
            if k > self.cfg.max_context_tokens {
                return Err(Error::InvalidArgument(format!(
                    "{k} context tokens exceed the maximum of {}",
                    self.cfg.max_context_tokens
                )));
            }
            if k > 0 {
                parts.push(ctx.broadcast_add(&self.pos_context)?);
            }
        }
        let mut h = Tensor::cat(&parts, 1)?;
        let seq_len = h.dim(1)?;
        let mut last_probs = None;
        for block in &self.blocks {
            let (next, probs) = block.forward(&h)?;
            h = next;
            last_probs = Some(probs);
        }
        let h = self.norm.forward(&h)?;
        let f_x = h.narrow(1, n_z, n_s)?;
        let probs = last_probs.ok_or_else(|| Error::Shape("encoder has no layers".into()))?;
        let attn = extract_saliency(&probs, n_z, n_s, self.direction)?;
        Ok(EncoderOutput { f_x, attn, seq_len })
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 16,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            template_res: 64,
            search_res: 128,
            max_context_tokens: 8,
            mlp_ratio: 2,
        }
    }

    fn build(cfg: &EncoderConfig, dtype: DType) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (enc, store)
    }

    fn image(res: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..3 * res * res).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (1, 3, res, res), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn token_counts() {
        let (enc, _) = build(&small_cfg(), DType::F32);
        assert_eq!(enc.patch_embed(&image(64, 1, DType::F32)).unwrap().dims(), &[1, 16, 32]);
        assert_eq!(enc.patch_embed(&image(128, 1, DType::F32)).unwrap().dims(), &[1, 64, 32]);
        assert!(enc.patch_embed(&image(96, 1, DType::F32)).is_err());
    }

    #[test]
    fn patch_embed_is_deterministic() {
        let (enc, _) = build(&small_cfg(), DType::F32);
        let a = enc.patch_embed(&image(64, 3, DType::F32)).unwrap();
        let b = enc.patch_embed(&image(64, 3, DType::F32)).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn encode_shapes_with_and_without_context() {
        let cfg = small_cfg();
        let (enc, _) = build(&cfg, DType::F32);
        let z = enc.embed_template(&image(64, 1, DType::F32)).unwrap();
        let x = enc.embed_search(&image(128, 2, DType::F32)).unwrap();
        let out = enc.encode(&z, &x, None).unwrap();
        assert_eq!(out.seq_len, 16 + 64);
        assert_eq!(out.f_x.dims(), &[1, 64, 32]);
        assert_eq!(out.attn.dims(), &[1, 4, 64]);
        let ctx = x.narrow(1, 0, 8).unwrap();
        let out = enc.encode(&z, &x, Some(&ctx)).unwrap();
        assert_eq!(out.seq_len, 16 + 64 + 8);
        assert_eq!(out.f_x.dims(), &[1, 64, 32]);
        assert_eq!(out.attn.dims(), &[1, 4, 64]);
        let too_many = x.narrow(1, 0, 9).unwrap();
        assert!(enc.encode(&z, &x, Some(&too_many)).is_err());
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let (enc, _) = build(&small_cfg(), DType::F32);
        let z = enc.embed_template(&image(64, 1, DType::F32)).unwrap();
        let x = enc.embed_search(&image(128, 2, DType::F32)).unwrap();
        let a = enc.encode(&z, &x, None).unwrap();
        let b = enc.encode(&z, &x, None).unwrap();
        assert_eq!(
            a.f_x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.f_x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(
            a.attn.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.attn.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn saliency_of_uniform_attention() {
        let seq = 7;
        let probs = Tensor::full(1.0f64 / seq as f64, (1, 2, seq, seq), &Device::Cpu).unwrap();
        let s = extract_saliency(&probs, 2, 3, SaliencyDirection::TemplateToSearch).unwrap();
        assert_eq!(s.dims(), &[1, 2, 3]);
        for v in s.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0 / seq as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn saliency_single_query_contribution() {
        // sequence [z0, z1, x0]; z0 attends fully to x0, z1 fully to itself
        let mut p = vec![0f64; 9];
        p[2] = 1.0; // row z0 -> x0
        p[3 + 1] = 1.0; // row z1 -> z1
        p[6 + 2] = 1.0; // row x0 -> x0
        let probs = Tensor::from_vec(p, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let s = extract_saliency(&probs, 2, 1, SaliencyDirection::TemplateToSearch).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.5]);
        let s = extract_saliency(&probs, 2, 1, SaliencyDirection::SearchToTemplate).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn saliency_is_subdistribution() {
        let (enc, _) = build(&small_cfg(), DType::F64);
        let z = enc.embed_template(&image(64, 1, DType::F64)).unwrap();
        let x = enc.embed_search(&image(128, 2, DType::F64)).unwrap();
        let ctx = x.narrow(1, 5, 8).unwrap();
        let out = enc.encode(&z, &x, Some(&ctx)).unwrap();
        for head in out.attn.get(0).unwrap().to_vec2::<f64>().unwrap() {
            assert!(head.iter().all(|&v| v >= 0.0));
            assert!(head.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.num_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = small_cfg();
        cfg.search_res = 120;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn shape_contract_over_configs(heads in 1usize..4, head_dim in 2usize..6, depth in 1usize..3,
                                       patch in prop::sample::select(vec![4usize, 8]),
                                       zg in 1usize..4, xg in 2usize..5, k in 0usize..5) {
            let cfg = EncoderConfig {
                patch_size: patch,
                embed_dim: heads * head_dim,
                depth,
                num_heads: heads,
                template_res: zg * patch,
                search_res: xg * patch,
                max_context_tokens: 4,
                mlp_ratio: 2,
            };
            let (enc, _) = build(&cfg, DType::F32);
            let z = enc.embed_template(&image(cfg.template_res, 1, DType::F32).repeat((2, 1, 1, 1)).unwrap()).unwrap();
            let x = enc.embed_search(&image(cfg.search_res, 2, DType::F32).repeat((2, 1, 1, 1)).unwrap()).unwrap();
            let n_s = xg * xg;
            let ctx = if k > 0 { Some(x.narrow(1, 0, k.min(n_s)).unwrap()) } else { None };
            let kk = ctx.as_ref().map(|c| c.dim(1).unwrap()).unwrap_or(0);
            let out = enc.encode(&z, &x, ctx.as_ref());
            if kk > cfg.max_context_tokens {
                prop_assert!(out.is_err());
            } else {
                let out = out.unwrap();
                prop_assert_eq!(out.f_x.dims(), &[2, n_s, cfg.embed_dim]);
                prop_assert_eq!(out.attn.dims(), &[2, heads, n_s]);
                prop_assert_eq!(out.seq_len, zg * zg + n_s + kk);
            }
        }
    }
}
