//! Per-frame accuracy of a checkpoint with the search region centered on
//! the previous true box, which separates localization quality from drift.
//!
//! ```text
//! cargo run -p cycletrack-core --example probe -- <checkpoint> <eval_dir>
//! ```

use std::path::PathBuf;

use candle_core::Device;
use cycletrack::dca::ContextTokens;
use cycletrack::eval::TrackSettings;
use cycletrack::geometry::{crop, iou, map_box, Direction};
use cycletrack::heads::decode_box;
use cycletrack::model::{FrameTag, TrackModel};
use cycletrack::{checkpoint, data};

fn main() -> cycletrack::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: probe <checkpoint> <eval_dir>");
        std::process::exit(2);
    }
    let model = checkpoint::load(&PathBuf::from(&args[1]), &Device::Cpu)?.tracker;
    let seqs = data::load_dataset(&PathBuf::from(&args[2]))?;
    let s = TrackSettings::default();
    let ec = model.encoder_config().clone();
    let none = ContextTokens::none();
    let mut ious = Vec::new();
    for seq in &seqs {
        let gt = seq.full_annotations.as_ref().expect("full annotations");
        let (z, _) = crop(&*seq.frames[0], &gt[0], s.template_factor, ec.template_res)?;
        let template = model.embed_template(&[z])?;
        for u in 1..seq.len() {
            let (x, t) = crop(&*seq.frames[u], &gt[u - 1], s.search_factor, ec.search_res)?;
            let tag = FrameTag {
                sequence_id: seq.id.clone(),
                frame_index: u,
                transform: t,
            };
            let out = model.hop(&template, &[x], &none, &[tag])?;
            let b = map_box(&decode_box(&out.maps)?[0], &t, Direction::ToFrame)?;
            ious.push(iou(&b, &gt[u])?);
        }
    }
    ious.sort_by(f64::total_cmp);
    let q = |p: f64| ious[((ious.len() - 1) as f64 * p) as usize];
    println!(
        "one-step IoU over {} frames: mean {:.4}, p10 {:.3}, median {:.3}, p90 {:.3}",
        ious.len(),
        ious.iter().sum::<f64>() / ious.len() as f64,
        q(0.1),
        q(0.5),
        q(0.9)
    );
    Ok(())
}
