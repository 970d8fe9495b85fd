//! Whole-sequence evaluation across worker threads and the CSV report.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dfpn_core::data::FrameSequence;
use dfpn_core::eval::{eval_row, predictable_frames, EvalReport, EvalRow, Predictor};
use dfpn_core::Real;

use crate::{Error, Result};

/// Worker count from `DFPN_THREADS` (unset or 0 means all cores).
pub fn thread_count() -> usize {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DFPN_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

/// Score every predictable frame; rows are ordered by frame index whatever
/// the thread count.
pub fn evaluate_sequence<S, P>(seq: &FrameSequence<S>, predictor: &P, threads: usize) -> Result<EvalReport>
where
    S: Real,
    P: Predictor<S> + Sync,
{
    let n = predictor.n_inputs();
    if seq.len() <= n {
        return Err(dfpn_core::Error::SequenceTooShort {
            len: seq.len(),
            needed: n + 1,
        }
        .into());
    }
    let frames: Vec<usize> = predictable_frames(seq.len(), n).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<dfpn_core::Result<EvalRow>>> = Mutex::new(Vec::new());
    let workers = threads.clamp(1, frames.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&t) = frames.get(i) else { break };
                let row = eval_row(seq, predictor, t);
                results.lock().expect("no worker panicked").push(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .collect::<dfpn_core::Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// CSV with header `frame,psnr_db,baseline_psnr_db`.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    w.write_record(["frame", "psnr_db", "baseline_psnr_db"]).map_err(Error::csv(path))?;
    for r in &report.rows {
        w.write_record([r.frame.to_string(), format!("{:.6}", r.psnr_db), format!("{:.6}", r.baseline_psnr_db)])
            .map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}
