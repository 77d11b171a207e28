//! Checks shared by the topic test files and the acceptance target.
//!
//! Each `check_*` returns `Ok(detail)` on success and `Err(reason)` when the
//! property is violated, so callers can either assert or report.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use cycletrack::backbone::{Encoder, EncoderConfig};
use cycletrack::cycle::{self, TrainConfig, TrainSchedule, Trainer};
use cycletrack::data::{self, FrameSequence, MotionModel, MotionSpec, SceneSpec, Shape, TargetSpec};
use cycletrack::dca::{self, DcaConfig, DcaSchedule, Mode, NoiseDecoder};
use cycletrack::geometry::{self, BBox};
use cycletrack::heads::{self, HeadConfig, LossWeights};
use cycletrack::model::{ModelConfig, OracleModel, Tracker};
use cycletrack::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Analytic gradient of a scalar function against a central finite difference.
pub fn fd_check(x0: &Tensor, f: impl Fn(&Tensor) -> Tensor, h: f64) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(flat)
        .unwrap_or_else(|| vec![0.0; x0.elem_count()]);
    let base = flat(x0);
    let shape = x0.shape().clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let mut m = base.clone();
        m[i] -= h;
        let fp = f(&Tensor::from_vec(p, shape.clone(), x0.device()).unwrap());
        let fm = f(&Tensor::from_vec(m, shape.clone(), x0.device()).unwrap());
        let d = fp.to_scalar::<f64>().unwrap() - fm.to_scalar::<f64>().unwrap();
        numeric.push(d / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

const GRID: usize = 8;

fn t64(v: Vec<f64>, shape: impl Into<candle_core::Shape>) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Random crop-space box whose edges stay clear of the unit square's border.
fn random_crop_box(r: &mut ChaCha8Rng) -> BBox {
    let w = r.random_range(0.1..0.5);
    let h = r.random_range(0.1..0.5);
    BBox::crop(r.random_range(0.3..0.7), r.random_range(0.3..0.7), w, h)
}

/// A prediction that differs from `gt` in every coordinate by at least 1e-3
/// and has no tied edges, keeping L1 and GIoU smooth at the instance.
fn perturbed(gt: &BBox, r: &mut ChaCha8Rng) -> BBox {
    let mut d = || {
        let v: f64 = r.random_range(0.01..0.08);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    };
    BBox::crop(gt.cx + d(), gt.cy + d(), gt.w * (1.0 + d()), gt.h * (1.0 + d()))
}

fn cls_map(r: &mut ChaCha8Rng, batch: usize) -> Tensor {
    let v: Vec<f64> = (0..batch * GRID * GRID).map(|_| r.random_range(0.02..0.98)).collect();
    t64(v, (batch, GRID, GRID))
}

fn target_for(gts: &[BBox]) -> Tensor {
    let targets: Vec<_> = gts.iter().map(|g| heads::gaussian_target(g, GRID).unwrap()).collect();
    heads::target_tensor(&targets, GRID, DType::F64, &Device::Cpu).unwrap()
}

pub const FD_INSTANCES: usize = 100;
pub const FD_TOLERANCE: f64 = 1e-4;

fn worst(errs: impl Iterator<Item = f64>) -> f64 {
    errs.fold(0.0, f64::max)
}

fn grade(name: &str, worst: f64, tol: f64) -> Check {
    if worst <= tol {
        Ok(format!("{name}: worst relative error {worst:.2e} <= {tol:.0e}"))
    } else {
        Err(format!("{name}: worst relative error {worst:.2e} > {tol:.0e}"))
    }
}

pub fn check_focal_gradient() -> Check {
    let mut r = rng(101);
    let w = worst((0..FD_INSTANCES).map(|_| {
        let gts = vec![random_crop_box(&mut r), random_crop_box(&mut r)];
        let target = target_for(&gts);
        let cls = cls_map(&mut r, 2);
        fd_check(&cls, |c| heads::focal_loss(c, &target).unwrap(), 1e-6)
    }));
    grade("focal", w, FD_TOLERANCE)
}

pub fn check_l1_gradient() -> Check {
    let mut r = rng(102);
    let w = worst((0..FD_INSTANCES).map(|_| {
        let gts = vec![random_crop_box(&mut r), random_crop_box(&mut r)];
        let preds: Vec<BBox> = gts.iter().map(|g| perturbed(g, &mut r)).collect();
        let gt = heads::boxes_tensor(&gts, DType::F64, &Device::Cpu).unwrap();
        let pred = heads::boxes_tensor(&preds, DType::F64, &Device::Cpu).unwrap();
        fd_check(&pred, |p| heads::l1_loss(p, &gt).unwrap(), 1e-6)
    }));
    grade("l1", w, FD_TOLERANCE)
}

pub fn check_giou_gradient() -> Check {
    let mut r = rng(103);
    let w = worst((0..FD_INSTANCES).map(|_| {
        let gts = vec![random_crop_box(&mut r), random_crop_box(&mut r)];
        let preds: Vec<BBox> = gts.iter().map(|g| perturbed(g, &mut r)).collect();
        let gt = heads::boxes_tensor(&gts, DType::F64, &Device::Cpu).unwrap();
        let pred = heads::boxes_tensor(&preds, DType::F64, &Device::Cpu).unwrap();
        fd_check(&pred, |p| heads::giou_loss(p, &gt).unwrap(), 1e-6)
    }));
    grade("giou", w, FD_TOLERANCE)
}

/// The combined loss, differentiated jointly in the box and the score map.
pub fn check_total_gradient() -> Check {
    let mut r = rng(104);
    let weights = LossWeights::default();
    let w = worst((0..FD_INSTANCES).map(|_| {
        let gts = vec![random_crop_box(&mut r), random_crop_box(&mut r)];
        let preds: Vec<BBox> = gts.iter().map(|g| perturbed(g, &mut r)).collect();
        let gt = heads::boxes_tensor(&gts, DType::F64, &Device::Cpu).unwrap();
        let pred = heads::boxes_tensor(&preds, DType::F64, &Device::Cpu).unwrap();
        let target = target_for(&gts);
        let cls = cls_map(&mut r, 2);
        // pack both inputs into one vector so a single FD pass covers them
        let n_box = 8;
        let packed = Tensor::cat(&[pred.flatten_all().unwrap(), cls.flatten_all().unwrap()], 0).unwrap();
        fd_check(
            &packed,
            |x| {
                let p = x.narrow(0, 0, n_box).unwrap().reshape((2, 4)).unwrap();
                let c = x.narrow(0, n_box, 2 * GRID * GRID).unwrap().reshape((2, GRID, GRID)).unwrap();
                heads::total_loss(&p, &gt, &c, &target, &weights).unwrap().total
            },
            1e-6,
        )
    }));
    grade("total", w, FD_TOLERANCE)
}

pub fn tiny_encoder_config(depth: usize) -> EncoderConfig {
    EncoderConfig {
        patch_size: 16,
        embed_dim: 8,
        depth,
        num_heads: 2,
        template_res: 32,
        search_res: 64,
        max_context_tokens: 4,
        mlp_ratio: 2,
    }
}

/// Gradient of a random projection of the encoder outputs with respect to
/// the template, search and context tokens of a 2-layer encoder.
pub fn check_backbone_gradient(tol: f64) -> Check {
    let cfg = tiny_encoder_config(2);
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let enc = Encoder::new(&cfg, &mut store, &mut rng(5)).map_err(|e| e.to_string())?;
    let mut r = rng(6);
    let d = cfg.embed_dim;
    let (nz, nx, nc) = (cfg.template_tokens(), cfg.search_tokens(), 2);
    let n = (nz + nx + nc) * d;
    let x0 = t64((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), n);
    let proj_f = t64((0..nx * d).map(|_| r.random_range(-1.0..1.0)).collect(), (1, nx, d));
    let proj_a = t64((0..cfg.num_heads * nx).map(|_| r.random_range(-1.0..1.0)).collect(), (1, cfg.num_heads, nx));
    let err = fd_check(
        &x0,
        |x| {
            let z = x.narrow(0, 0, nz * d).unwrap().reshape((1, nz, d)).unwrap();
            let s = x.narrow(0, nz * d, nx * d).unwrap().reshape((1, nx, d)).unwrap();
            let c = x.narrow(0, (nz + nx) * d, nc * d).unwrap().reshape((1, nc, d)).unwrap();
            let out = enc.encode(&z, &s, Some(&c)).unwrap();
            let a = (out.f_x * &proj_f).unwrap().sum_all().unwrap();
            let b = (out.attn * &proj_a).unwrap().sum_all().unwrap();
            (a + b).unwrap()
        },
        1e-6,
    );
    grade("backbone (2 layers)", err, tol)
}

/// Gradients reach the noise tokens through the decoder's cross-attention,
/// and match finite differences.
pub fn check_noise_decoder_gradient() -> Check {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let d = 8;
    let dec = NoiseDecoder::new(&mut store, d, 2, 4, &HeadConfig { hidden: [8, 8] }, false, &mut rng(9))
        .map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let f_x = t64((0..16 * d).map(|_| r.random_range(-1.0..1.0)).collect(), (1, 16, d));
    let noise = t64((0..3 * d).map(|_| r.random_range(-1.0..1.0)).collect(), (1, 3, d));
    let err = fd_check(
        &noise,
        |nz| {
            let out = dec.perturb(&f_x, nz).unwrap();
            (out.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap()
        },
        1e-6,
    );
    grade("noise decoder", err, 1e-5)
}

// ---------------------------------------------------------------- synthetic data

pub fn scene(seed: u64, length: usize) -> SceneSpec {
    let mut r = rng(seed);
    SceneSpec {
        canvas_width: 128,
        canvas_height: 128,
        length,
        target: TargetSpec {
            width: r.random_range(14.0..24.0),
            height: r.random_range(14.0..24.0),
            color: [220, 60, 40],
            shape: if r.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
        },
        start: None,
        motion: MotionSpec {
            model: MotionModel::Linear,
            speed: r.random_range(0.5..2.5),
            heading_deg: r.random_range(0.0..360.0),
            amplitude: 0.0,
            period: 10.0,
        },
        distractors: 0,
        distractor_similarity: 0.0,
        occluders: Vec::new(),
        background_seed: seed,
        pixel_noise: 2.0,
    }
}

pub fn sequence(seed: u64, length: usize) -> FrameSequence {
    data::generate(&scene(seed, length), seed, format!("seq-{seed:04}")).unwrap()
}

pub fn oracle_for(seqs: &[FrameSequence], cfg: &EncoderConfig) -> OracleModel {
    let mut o = OracleModel::new(cfg.clone());
    for s in seqs {
        o.insert(s.id.clone(), s.full_annotations.clone().unwrap());
    }
    o
}

/// Window `[0, 1..=l]` of a sequence as a training sample.
pub fn sample_of(seq: &FrameSequence, index: usize, l: usize) -> data::TrainSample {
    data::TrainSample {
        sequence_id: seq.id.clone(),
        sequence_index: index,
        z0: Arc::clone(&seq.frames[0]),
        y0: seq.first_annotation,
        x_u: (1..=l).map(|i| Arc::clone(&seq.frames[i])).collect(),
        frame_indices: (1..=l).collect(),
    }
}

// ---------------------------------------------------------------- training

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: tiny_encoder_config(1),
        head: HeadConfig { hidden: [8, 8] },
        query_tokens: 2,
        ..ModelConfig::default()
    }
}

/// A very small training setup: `epochs` epochs of `steps` steps, prompt
/// phase through epoch `switch`.
pub fn tiny_train_config(epochs: usize, steps: usize, switch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule {
            total_epochs: epochs,
            steps_per_epoch: steps,
            forward_length: 2,
            backward_steps: 1,
            lr_decay_epoch: epochs,
            batch_size: 2,
            dca: DcaSchedule {
                switch_epoch: switch,
                token_length: 2,
            },
            ..TrainSchedule::default()
        },
        cycle: Default::default(),
        loss: LossWeights::default(),
        dca: DcaConfig {
            token_length: 2,
            switch_epoch: Some(switch),
            ..DcaConfig::default()
        },
        variant: Default::default(),
        seed,
        checkpoint_every: 0,
        keep_epoch_checkpoints: false,
    }
}

pub fn tiny_trainer(cfg: TrainConfig, seed: u64) -> Trainer {
    let model = Tracker::new(&tiny_model_config(), seed, DType::F32, &Device::Cpu).unwrap();
    Trainer::new(model, cfg).unwrap()
}

pub fn tiny_corpus(n: usize, length: usize) -> Vec<FrameSequence> {
    (0..n as u64).map(|i| sequence(1000 + i, length)).collect()
}

pub fn params_equal(a: &Tracker, b: &Tracker) -> bool {
    let (ta, tb) = (a.store.tensors(), b.store.tensors());
    ta.len() == tb.len()
        && ta.iter().all(|(k, v)| {
            let w = &tb[k];
            v.flatten_all().unwrap().to_vec1::<f32>().unwrap() == w.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        })
}

pub fn train_into(trainer: Trainer, seqs: &[FrameSequence], dir: &Path, stop_after: Option<u64>) -> Trainer {
    cycle::train(trainer, seqs, dir, stop_after).unwrap()
}

// ---------------------------------------------------------------- dca

/// Brute force: full sort of head-averaged `attn * cls`, ties by index.
pub fn brute_force_top_k(attn: &[Vec<f32>], cls: &[f32], k: usize) -> Vec<usize> {
    let n = cls.len();
    let heads = attn.len() as f32;
    let mut scored: Vec<(f32, usize)> = (0..n)
        .map(|j| (attn.iter().map(|h| h[j] * cls[j]).sum::<f32>() / heads, j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

pub fn check_prompt_oracle(instances: usize) -> Check {
    let mut r = rng(77);
    for case in 0..instances {
        let heads = r.random_range(1..=4);
        let n = r.random_range(4..=64);
        let k = r.random_range(1..=n);
        // coarse values force plenty of exact ties
        let levels = if case % 2 == 0 { 4 } else { 1000 };
        let q = |r: &mut ChaCha8Rng| r.random_range(0..levels) as f32 / levels as f32;
        let attn: Vec<Vec<f32>> = (0..heads).map(|_| (0..n).map(|_| q(&mut r)).collect()).collect();
        let cls: Vec<f32> = (0..n).map(|_| q(&mut r)).collect();
        let scores = dca::score_tokens(&attn, &cls).map_err(|e| e.to_string())?;
        let got = dca::top_k(&scores, k).map_err(|e| e.to_string())?;
        let want = brute_force_top_k(&attn, &cls, k);
        if got != want {
            return Err(format!("instance {case}: got {got:?}, brute force {want:?}"));
        }
    }
    Ok(format!("{instances} instances match the brute-force ranking"))
}

pub fn check_schedule_law(k: usize) -> Check {
    let sched = DcaSchedule {
        switch_epoch: k,
        token_length: 8,
    };
    for e in 0..=2 * k {
        let want = if e <= k { Mode::Prompt } else { Mode::Noise };
        if dca::select_mode(e, &sched) != want {
            return Err(format!("epoch {e} with K={k}"));
        }
    }
    Ok(format!("epochs 0..={} follow the switch at K={k}", 2 * k))
}

// ---------------------------------------------------------------- geometry

pub fn check_giou_identities(pairs: usize) -> Check {
    let mut r = rng(3);
    // abutting boxes: the hull equals the union, so giou = iou = 0
    for _ in 0..100 {
        let a = BBox::frame(r.random_range(0.0..50.0), r.random_range(0.0..50.0), r.random_range(1.0..20.0), r.random_range(1.0..20.0));
        let b = BBox::frame(a.cx + a.w / 2.0 + 3.0, a.cy, 6.0, a.h);
        let (g, i) = (geometry::giou(&a, &b).unwrap(), geometry::iou(&a, &b).unwrap());
        if (g - i).abs() > 1e-12 {
            return Err(format!("abutting: giou {g} vs iou {i}"));
        }
        // one box containing the other also has hull = union
        let inner = BBox::frame(a.cx, a.cy, a.w / 2.0, a.h / 2.0);
        let (g, i) = (geometry::giou(&a, &inner).unwrap(), geometry::iou(&a, &inner).unwrap());
        if (g - i).abs() > 1e-12 {
            return Err(format!("nested: giou {g} vs iou {i}"));
        }
    }
    for _ in 0..pairs {
        let mut rb = || BBox::frame(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(0.1..40.0), r.random_range(0.1..40.0));
        let (a, b) = (rb(), rb());
        let ab = geometry::giou(&a, &b).unwrap();
        let ba = geometry::giou(&b, &a).unwrap();
        if (ab - ba).abs() > 1e-12 {
            return Err(format!("asymmetric: {ab} vs {ba}"));
        }
        if !(ab > -1.0 && ab <= 1.0) {
            return Err(format!("out of range: {ab}"));
        }
        if (geometry::giou(&a, &a).unwrap() - 1.0).abs() > 1e-12 {
            return Err("giou(a, a) != 1".into());
        }
    }
    Ok(format!("identities hold over {pairs} random pairs"))
}

// ---------------------------------------------------------------- cycle oracle

/// Forward then backward through the oracle on `n` sequences; the box
/// recovered on frame 0 must equal the label and the loss must vanish.
pub fn check_cycle_fixed_point(n: usize) -> Check {
    let seqs: Vec<FrameSequence> = (0..n as u64).map(|i| sequence(500 + i, 6)).collect();
    let enc = tiny_encoder_config(1);
    let oracle = oracle_for(&seqs, &enc);
    let mut cfg = tiny_train_config(4, 1, 2, 0);
    cfg.dca.token_length = 2;
    let mut worst_box = 0f64;
    let mut worst_loss = 0f64;
    for (i, seq) in seqs.iter().enumerate() {
        for epoch in [1, 3] {
            let sample = sample_of(seq, i, 3);
            let mut r = rng(i as u64);
            let out = cycle::cycle_loss(&oracle, &[sample], epoch, &cfg, false, &mut r).map_err(|e| e.to_string())?;
            let b = out.backward.boxes[0];
            let y0 = seq.first_annotation;
            let d = b.params().iter().zip(y0.params()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            worst_box = worst_box.max(d);
            let total = out
                .total
                .ok_or_else(|| format!("{}: target invisible on the labeled frame", seq.id))?
                .to_scalar::<f64>()
                .map_err(|e| e.to_string())?;
            worst_loss = worst_loss.max(total.abs());
        }
    }
    if worst_box > 1e-6 {
        return Err(format!("recovered box off by {worst_box:.2e} px"));
    }
    if worst_loss > 1e-6 {
        return Err(format!("oracle loss {worst_loss:.2e}"));
    }
    Ok(format!("{n} sequences: box error {worst_box:.1e} px, loss {worst_loss:.1e}"))
}

/// Runs a tiny `epochs`-epoch training with switch epoch `k` and checks the
/// logged mode of every step against the schedule.
pub fn check_schedule_in_log(epochs: usize, k: usize) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seqs = tiny_corpus(3, 5);
    let trainer = tiny_trainer(tiny_train_config(epochs, 2, k, 0), 0);
    train_into(trainer, &seqs, dir.path(), None);
    let log = cycle::read_log(&cycle::RunPaths::new(dir.path()).log).map_err(|e| e.to_string())?;
    if log.len() != epochs * 2 {
        return Err(format!("{} log lines for {} steps", log.len(), epochs * 2));
    }
    for r in &log {
        let want = if r.epoch <= k { Mode::Prompt } else { Mode::Noise };
        if r.mode != want {
            return Err(format!("step {} of epoch {} logged {:?}", r.step, r.epoch, r.mode));
        }
    }
    Ok(format!("{} logged steps over {epochs} epochs switch after epoch {k}", log.len()))
}

/// Full tiny training run; no ground truth from frames past 0 may reach a loss.
pub fn check_label_hygiene() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seqs = tiny_corpus(4, 6);
    let trainer = tiny_trainer(tiny_train_config(4, 5, 2, 3), 3);
    let before = cycletrack::instrument::snapshot();
    train_into(trainer, &seqs, dir.path(), None);
    let c = cycletrack::instrument::snapshot().since(&before);
    if c.unlabeled_gt_in_loss != 0 {
        return Err(format!("{} unlabeled ground-truth boxes reached a loss", c.unlabeled_gt_in_loss));
    }
    if c.labeled_gt_in_loss == 0 {
        return Err("no supervision reached the loss at all".into());
    }
    Ok(format!("0 unlabeled vs {} labeled boxes in the loss over 20 steps", c.labeled_gt_in_loss))
}

// ---------------------------------------------------------------- metrics

pub fn check_metric_oracles() -> Check {
    use cycletrack::eval;
    let gt: Vec<BBox> = (0..20).map(|i| BBox::from_corner(3.0 * i as f64, 10.0, 20.0, 10.0, geometry::Space::FramePixels)).collect();
    let (auc, p, pn) = (
        eval::success_auc(&gt, &gt).map_err(|e| e.to_string())?,
        eval::precision(&gt, &gt, eval::PRECISION_THRESHOLD_PX).map_err(|e| e.to_string())?,
        eval::norm_precision(&gt, &gt).map_err(|e| e.to_string())?,
    );
    if (auc, p, pn) != (1.0, 1.0, 1.0) {
        return Err(format!("perfect tracker scored auc {auc}, precision {p}, norm precision {pn}"));
    }
    // a box twice as wide with the same left edge: IoU is exactly 1/2
    let half: Vec<BBox> = gt.iter().map(|b| { let [x, y, w, h] = b.to_corner_form(); BBox::from_corner(x, y, 2.0 * w, h, geometry::Space::FramePixels) }).collect();
    let auc_half = eval::success_auc(&half, &gt).map_err(|e| e.to_string())?;
    if auc_half != 51.0 / 101.0 {
        return Err(format!("constant IoU 0.5 gives auc {auc_half}, expected 51/101"));
    }
    let shifted: Vec<BBox> = gt.iter().map(|b| b.translated(21.0, 0.0)).collect();
    let p21 = eval::precision(&shifted, &gt, eval::PRECISION_THRESHOLD_PX).map_err(|e| e.to_string())?;
    if p21 != 0.0 {
        return Err(format!("21 px error gives precision {p21}"));
    }
    Ok("perfect = 1/1/1, constant IoU 0.5 = 51/101, 21 px error = 0".into())
}

/// The oracle evaluated end to end scores perfectly.
pub fn check_oracle_evaluation(n: usize) -> Check {
    let seqs: Vec<FrameSequence> = (0..n as u64).map(|i| sequence(700 + i, 8)).collect();
    let oracle = oracle_for(&seqs, &tiny_encoder_config(1));
    let (report, _) = cycletrack::eval::evaluate(&oracle, &seqs, &Default::default()).map_err(|e| e.to_string())?;
    if report.auc != 1.0 || report.precision != 1.0 || report.norm_precision != 1.0 {
        return Err(format!("oracle scored auc {} p {} pn {}", report.auc, report.precision, report.norm_precision));
    }
    Ok(format!("oracle over {n} sequences: auc = precision = norm precision = 1"))
}

/// Two evaluations of one trained model: no sampling calls, identical output.
pub fn check_inference_purity() -> Check {
    let seqs = tiny_corpus(3, 6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // train through the noise phase so every DCA path has been exercised
    let t = train_into(tiny_trainer(tiny_train_config(2, 3, 1, 1), 1), &seqs, dir.path(), None);
    let eval_seqs: Vec<FrameSequence> = (0..3u64).map(|i| sequence(900 + i, 8)).collect();
    let run = || cycletrack::eval::evaluate(&t.model, &eval_seqs, &Default::default()).map_err(|e| e.to_string());
    let (ra, a) = run()?;
    let (rb, b) = run()?;
    if ra.dca_calls != 0 || rb.dca_calls != 0 {
        return Err(format!("{} sampling calls during evaluation", ra.dca_calls + rb.dca_calls));
    }
    let bits = |rs: &[cycletrack::eval::TrackResult]| -> Vec<u64> {
        rs.iter().flat_map(|r| r.boxes.iter().flat_map(|b| b.params().map(f64::to_bits))).collect()
    };
    if bits(&a) != bits(&b) {
        return Err("two evaluations produced different boxes".into());
    }
    let mut ra_t = ra.clone();
    ra_t.fps = rb.fps;
    if ra_t != rb {
        return Err("two evaluations produced different reports".into());
    }
    Ok(format!("0 sampling calls, {} boxes bitwise identical across runs", bits(&a).len() / 4))
}
