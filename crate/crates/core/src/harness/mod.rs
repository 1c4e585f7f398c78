//! Training, evaluation, fusion and hull analysis as library calls; the
//! `wbfusion` binary is a thin layer over these.

mod eval;
mod train;

pub use eval::{evaluate, fuse_files, hull_scenes, mean_delta_e, predict, Baseline, HullSummary, Prediction, SceneHull};
pub use train::{manifest_path, train, train_from_disk, RunManifest, TrainConfig, TrainOptions, TrainOutcome, Validation};

use crate::error::Result;

/// Maps `f` over `items` on up to `threads` scoped threads. Results come
/// back in input order, so output does not depend on the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}
