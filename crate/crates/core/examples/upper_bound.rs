//! Fully supervised reference run: the same model, crops and loss as cycle
//! training, but every step is supervised with the true box of a later
//! frame. It bounds what the self-supervised run can reach at equal budget.
//!
//! ```text
//! cargo run --release -p cycletrack-core --example upper_bound -- <train_dir> <eval_dir> [steps] [seed] [model_out]
//! ```

use std::path::PathBuf;

use candle_core::{DType, Device};
use cycletrack::cycle::{CycleConfig, TrainSchedule};
use cycletrack::data::{self, pixel_norm};
use cycletrack::dca::ContextTokens;
use cycletrack::eval;
use cycletrack::geometry::{crop, map_box, Direction};
use cycletrack::heads::{box_at_cells, gaussian_target, peak_cells, target_tensor, total_loss, LossWeights};
use cycletrack::model::{FrameTag, ModelConfig, TrackModel, Tracker};
use cycletrack::nn::{AdamW, Group};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cycletrack::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: upper_bound <train_dir> <eval_dir> [steps] [seed] [model_out]");
        std::process::exit(2);
    }
    let train = data::load_dataset(&PathBuf::from(&args[1]))?;
    let heldout = data::load_dataset(&PathBuf::from(&args[2]))?;
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut model = Tracker::new(&ModelConfig::default(), seed, DType::F32, &Device::Cpu)?;
    model.pixel_norm = pixel_norm(&train);
    let sched = TrainSchedule::default();
    let cyc = CycleConfig::default();
    let weights = LossWeights::default();
    let group = |g: Group| -> Vec<(String, candle_core::Var)> {
        model.store.vars().filter(|v| v.2 == g).map(|(n, v, _)| (n.to_string(), v.clone())).collect()
    };
    let mut opt_b = AdamW::new(group(Group::Backbone), sched.lr_backbone, sched.weight_decay)?;
    let mut opt_r = AdamW::new(group(Group::Rest), sched.lr_rest, sched.weight_decay)?;
    let ec = model.config.encoder.clone();
    let grid = ec.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = ContextTokens::none();
    let mut running = 0.0;
    for step in 1..=steps {
        if step == steps * sched.lr_decay_epoch / sched.total_epochs + 1 {
            opt_b.lr *= 0.1;
            opt_r.lr *= 0.1;
        }
        let seq = train.choose(&mut rng).expect("non-empty corpus");
        let gt_all = seq.full_annotations.as_ref().expect("full annotations");
        let u = rng.random_range(1..seq.len());
        let gt = gt_all[u];
        // search around a perturbed previous-frame box, as in tracking
        let side = cyc.search_factor * (gt.w * gt.h).sqrt();
        let j = cyc.final_center_jitter;
        let center = gt.translated(rng.random_range(-j..=j) * side, rng.random_range(-j..=j) * side);
        let factor = cyc.search_factor * rng.random_range(-cyc.final_scale_jitter..=cyc.final_scale_jitter).exp();
        let (z, _) = crop(&*seq.frames[0], &seq.first_annotation, cyc.template_factor, ec.template_res)?;
        let (x, t) = crop(&*seq.frames[u], &center, factor, ec.search_res)?;
        let template = model.embed_template(&[z])?;
        let tag = FrameTag {
            sequence_id: seq.id.clone(),
            frame_index: u,
            transform: t,
        };
        let out = model.hop(&template, &[x], &none, &[tag])?;
        let (g, visible) = map_box(&gt, &t, Direction::ToCrop)?.clip_to_unit()?;
        if !visible {
            continue;
        }
        let gt_t = cycletrack::heads::boxes_tensor(&[g], DType::F32, &Device::Cpu)?;
        let target = target_tensor(&[gaussian_target(&g, grid)?], grid, DType::F32, &Device::Cpu)?;
        let pred = box_at_cells(&out.maps, &peak_cells(&out.maps)?)?;
        let loss = total_loss(&pred, &gt_t, &out.maps.cls, &target, &weights)?;
        let grads = loss.total.backward()?;
        opt_b.step(&grads)?;
        opt_r.step(&grads)?;
        running += loss.scalars()?[0];
        if step % 200 == 0 {
            eprintln!("step {step}: loss {:.4}", running / 200.0);
            running = 0.0;
        }
    }
    if let Some(out) = args.get(5) {
        cycletrack::checkpoint::save(&PathBuf::from(out), &model, &Default::default(), None)?;
    }
    let (report, _) = eval::evaluate(&model, &heldout, &eval::TrackSettings::default())?;
    println!(
        "supervised upper bound ({steps} steps, seed {seed}): auc {:.4} precision {:.4} mean_iou {:.4}",
        report.auc, report.precision, report.mean_iou
    );
    Ok(())
}
