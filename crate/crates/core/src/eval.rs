//! PSNR on the 8-bit scale and the per-frame evaluation protocol.

use alloc::vec::Vec;

use crate::data::FrameSequence;
use crate::model::{predict, ModelConfig, Parameters};
use crate::{Error, Real, Result, Shape, Tensor4};

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 99.0;

/// `[0, 1]` value to an 8-bit sample: scale, clamp, round.
pub fn to_u8<S: Real>(v: S) -> u8 {
    let x = (v.to_f64() * 255.0).clamp(0.0, 255.0);
    num_traits::Float::round(x) as u8
}

/// `10 log10(255^2 / mse)`, or [`PSNR_CAP`] when `mse` is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        10.0 * num_traits::Float::log10(255.0 * 255.0 / mse)
    }
}

pub fn psnr_u8(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DataLength {
            shape: Shape::new(1, 1, 1, gt.len()),
            found: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::Empty { op: "psnr" });
    }
    let se: u64 = pred
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    Ok(psnr_from_mse(se as f64 / gt.len() as f64))
}

/// PSNR of two `[0, 1]` frames after conversion to 8-bit.
pub fn psnr<S: Real>(pred: &[S], gt: &[S]) -> Result<f64> {
    let a: Vec<u8> = pred.iter().map(|&v| to_u8(v)).collect();
    let b: Vec<u8> = gt.iter().map(|&v| to_u8(v)).collect();
    psnr_u8(&a, &b)
}

/// Anything that maps the previous frames to a next-frame estimate.
pub trait Predictor<S> {
    fn n_inputs(&self) -> usize;

    /// `inputs` holds `n_inputs()` frames of `h * w` samples, oldest first.
    fn predict(&self, inputs: &[&[S]], h: usize, w: usize) -> Result<Vec<S>>;
}

/// Outputs the most recent frame.
#[derive(Debug, Clone, Copy)]
pub struct CopyLast {
    pub n_inputs: usize,
}

impl<S: Real> Predictor<S> for CopyLast {
    fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn predict(&self, inputs: &[&[S]], _h: usize, _w: usize) -> Result<Vec<S>> {
        inputs
            .last()
            .map(|f| f.to_vec())
            .ok_or(Error::Empty { op: "copy_last" })
    }
}

/// The network as a [`Predictor`].
#[derive(Debug, Clone)]
pub struct DfpnPredictor<S> {
    pub cfg: ModelConfig,
    pub params: Parameters<S>,
}

impl<S: Real> Predictor<S> for DfpnPredictor<S> {
    fn n_inputs(&self) -> usize {
        self.cfg.n_inputs
    }

    fn predict(&self, inputs: &[&[S]], h: usize, w: usize) -> Result<Vec<S>> {
        if self.cfg.image_channels != 1 {
            return Err(Error::ChannelMismatch {
                op: "predict_sequence",
                expected: 1,
                found: self.cfg.image_channels,
            });
        }
        let mut data = Vec::with_capacity(inputs.len() * h * w);
        for f in inputs {
            data.extend_from_slice(f);
        }
        let x = Tensor4::from_vec(Shape::new(1, inputs.len(), h, w), data)?;
        Ok(predict(&self.cfg, &self.params, &x)?.into_data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub frame: usize,
    pub psnr_db: f64,
    pub baseline_psnr_db: f64,
}

impl EvalRow {
    pub fn is_capped(&self) -> bool {
        self.psnr_db >= PSNR_CAP || self.baseline_psnr_db >= PSNR_CAP
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One row per predictable frame, ordered by frame index.
    pub rows: Vec<EvalRow>,
    /// Mean over rows where neither value hit the cap.
    pub mean_psnr_db: Option<f64>,
    pub mean_baseline_psnr_db: Option<f64>,
    /// Frame indices excluded from the means.
    pub capped: Vec<usize>,
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by_key(|r| r.frame);
        let kept: Vec<&EvalRow> = rows.iter().filter(|r| !r.is_capped()).collect();
        let mean = |f: fn(&EvalRow) -> f64| {
            (!kept.is_empty()).then(|| kept.iter().map(|r| f(r)).sum::<f64>() / kept.len() as f64)
        };
        let mean_psnr_db = mean(|r| r.psnr_db);
        let mean_baseline_psnr_db = mean(|r| r.baseline_psnr_db);
        let capped = rows.iter().filter(|r| r.is_capped()).map(|r| r.frame).collect();
        EvalReport {
            rows,
            mean_psnr_db,
            mean_baseline_psnr_db,
            capped,
        }
    }
}

/// Predict frame `t` from the ground-truth frames `t - n .. t` and score it
/// against frame `t` alongside the copy-last baseline.
pub fn eval_row<S: Real, P: Predictor<S> + ?Sized>(seq: &FrameSequence<S>, predictor: &P, t: usize) -> Result<EvalRow> {
    let n = predictor.n_inputs();
    if t < n || t >= seq.len() {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            needed: t.max(n) + 1,
        });
    }
    let inputs: Vec<&[S]> = (t - n..t).map(|i| seq.frame(i)).collect();
    let pred = predictor.predict(&inputs, seq.height(), seq.width())?;
    let gt = seq.frame(t);
    Ok(EvalRow {
        frame: t,
        psnr_db: psnr(&pred, gt)?,
        baseline_psnr_db: psnr(seq.frame(t - 1), gt)?,
    })
}

/// Frame indices scored by [`predict_sequence`].
pub fn predictable_frames(len: usize, n_inputs: usize) -> core::ops::Range<usize> {
    n_inputs.min(len)..len
}

/// Score every predictable frame sequentially.
pub fn predict_sequence<S: Real, P: Predictor<S> + ?Sized>(seq: &FrameSequence<S>, predictor: &P) -> Result<EvalReport> {
    let n = predictor.n_inputs();
    if seq.len() <= n {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            needed: n + 1,
        });
    }
    let rows = predictable_frames(seq.len(), n)
        .map(|t| eval_row(seq, predictor, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}
