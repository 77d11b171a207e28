//! Per-thread event counters used to audit the training and inference paths.
//!
//! Counters are thread-local so concurrent runs (and concurrent tests) never
//! observe each other's events.

use std::cell::Cell;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Calls to prompt-token sampling.
    pub prompt_samples: u64,
    /// Calls to noise-token sampling.
    pub noise_samples: u64,
    /// Encoder invocations that carried context tokens.
    pub context_encodes: u64,
    /// Encoder invocations without context tokens.
    pub plain_encodes: u64,
    /// Ground-truth boxes from frames other than the labeled initial frame that reached a loss.
    pub unlabeled_gt_in_loss: u64,
    /// Ground-truth boxes of the labeled initial frame that reached a loss.
    pub labeled_gt_in_loss: u64,
    /// Predicted boxes clamped to the minimum size.
    pub degenerate_boxes: u64,
    /// Supervision targets dropped because they fell outside the search crop.
    pub invisible_targets: u64,
}

impl Counters {
    pub fn dca_calls(&self) -> u64 {
        self.prompt_samples + self.noise_samples
    }

    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            prompt_samples: self.prompt_samples - earlier.prompt_samples,
            noise_samples: self.noise_samples - earlier.noise_samples,
            context_encodes: self.context_encodes - earlier.context_encodes,
            plain_encodes: self.plain_encodes - earlier.plain_encodes,
            unlabeled_gt_in_loss: self.unlabeled_gt_in_loss - earlier.unlabeled_gt_in_loss,
            labeled_gt_in_loss: self.labeled_gt_in_loss - earlier.labeled_gt_in_loss,
            degenerate_boxes: self.degenerate_boxes - earlier.degenerate_boxes,
            invisible_targets: self.invisible_targets - earlier.invisible_targets,
        }
    }
}

thread_local! {
    static COUNTERS: Cell<Counters> = Cell::new(Counters::default());
}

pub fn snapshot() -> Counters {
    COUNTERS.with(|c| c.get())
}

pub fn reset() {
    COUNTERS.with(|c| c.set(Counters::default()));
}

pub(crate) fn record(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}
