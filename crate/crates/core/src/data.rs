//! Frame sequences, aligned clip sampling and synthetic global-motion video.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::bilinear_sample;
use crate::{Error, Real, Result, Shape, Tensor4};

/// Gray value of an 8-bit RGB pixel with BT.601 weights, rounded.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    // Round half up; the weights sum to one so the result stays in range.
    let v = (y + 0.5) as i64;
    v.clamp(0, 255) as u8
}

/// Ordered single-channel frames of equal size with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence<S> {
    h: usize,
    w: usize,
    frames: Vec<Vec<S>>,
    /// Values were decoded from 8-bit samples.
    pub eight_bit: bool,
    pub source: String,
}

impl<S: Real> FrameSequence<S> {
    pub fn new(h: usize, w: usize, frames: Vec<Vec<S>>, source: impl Into<String>) -> Result<Self> {
        for (index, f) in frames.iter().enumerate() {
            if f.len() != h * w {
                return Err(Error::FrameSize {
                    index,
                    h,
                    w,
                    found_h: f.len() / w.max(1),
                    found_w: w,
                });
            }
        }
        Ok(FrameSequence {
            h,
            w,
            frames,
            eight_bit: false,
            source: source.into(),
        })
    }

    /// Frames from 8-bit gray samples, scaled by `1/255`.
    pub fn from_u8(h: usize, w: usize, frames: &[Vec<u8>], source: impl Into<String>) -> Result<Self> {
        let scale = S::one() / S::from_f64(255.0);
        let frames = frames
            .iter()
            .map(|f| f.iter().map(|&v| S::from_f64(v as f64) * scale).collect())
            .collect();
        let mut seq = Self::new(h, w, frames, source)?;
        seq.eight_bit = true;
        Ok(seq)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[S] {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Vec<S>] {
        &self.frames
    }

    /// Frames `start..start + count` stacked along channels, `(1, count, h, w)`.
    pub fn stack(&self, start: usize, count: usize) -> Tensor4<S> {
        let mut data = Vec::with_capacity(count * self.h * self.w);
        for f in &self.frames[start..start + count] {
            data.extend_from_slice(f);
        }
        Tensor4::from_vec(Shape::new(1, count, self.h, self.w), data).expect("frame sizes checked")
    }

    /// Number of `(n_inputs + 1)`-frame windows.
    pub fn windows(&self, n_inputs: usize) -> usize {
        (self.len() + 1).saturating_sub(n_inputs + 1)
    }
}

/// `n_inputs` input frames followed by the ground truth, all cropped at the
/// same origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip<S> {
    pub frames: Vec<Vec<S>>,
    pub h: usize,
    pub w: usize,
    /// Top-left corner of the crop in the source frames.
    pub origin: (usize, usize),
    /// Index of the first frame in the source sequence.
    pub start: usize,
}

impl<S: Real> Clip<S> {
    /// Cut a clip of `n_inputs + 1` frames starting at `start`.
    pub fn cut(
        seq: &FrameSequence<S>,
        n_inputs: usize,
        start: usize,
        origin: (usize, usize),
        crop: (usize, usize),
    ) -> Result<Self> {
        let needed = n_inputs + 1;
        if seq.len() < start + needed {
            return Err(Error::SequenceTooShort {
                len: seq.len(),
                needed: start + needed,
            });
        }
        let (ch, cw) = crop;
        if ch == 0 || cw == 0 || origin.0 + ch > seq.h || origin.1 + cw > seq.w {
            return Err(Error::CropTooLarge {
                crop_h: origin.0 + ch,
                crop_w: origin.1 + cw,
                frame_h: seq.h,
                frame_w: seq.w,
            });
        }
        let frames = (start..start + needed)
            .map(|i| {
                let f = seq.frame(i);
                let mut out = Vec::with_capacity(ch * cw);
                for y in origin.0..origin.0 + ch {
                    out.extend_from_slice(&f[y * seq.w + origin.1..y * seq.w + origin.1 + cw]);
                }
                out
            })
            .collect();
        Ok(Clip {
            frames,
            h: ch,
            w: cw,
            origin,
            start,
        })
    }

    /// Re-crop all frames at one origin.
    pub fn crop(&self, origin: (usize, usize), crop: (usize, usize)) -> Result<Self> {
        let seq = FrameSequence::new(self.h, self.w, self.frames.clone(), "")?;
        let mut c = Clip::cut(&seq, self.frames.len() - 1, 0, origin, crop)?;
        c.origin = (self.origin.0 + origin.0, self.origin.1 + origin.1);
        c.start = self.start;
        Ok(c)
    }
}

fn random_origin<R: Rng + ?Sized>(h: usize, w: usize, crop: (usize, usize), rng: &mut R) -> Result<(usize, usize)> {
    if crop.0 > h || crop.1 > w || crop.0 == 0 || crop.1 == 0 {
        return Err(Error::CropTooLarge {
            crop_h: crop.0,
            crop_w: crop.1,
            frame_h: h,
            frame_w: w,
        });
    }
    Ok((rng.random_range(0..=h - crop.0), rng.random_range(0..=w - crop.1)))
}

/// Uniformly random window and crop origin.
pub fn sample_clip<S: Real, R: Rng + ?Sized>(
    seq: &FrameSequence<S>,
    n_inputs: usize,
    crop: (usize, usize),
    rng: &mut R,
) -> Result<Clip<S>> {
    let windows = seq.windows(n_inputs);
    if windows == 0 {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            needed: n_inputs + 1,
        });
    }
    let origin = random_origin(seq.h, seq.w, crop, rng)?;
    let start = rng.random_range(0..windows);
    Clip::cut(seq, n_inputs, start, origin, crop)
}

/// Training data: whole sequences or a fixed set of clips.
#[derive(Debug, Clone)]
pub enum ClipSource<S> {
    Sequences(Vec<FrameSequence<S>>),
    Clips(Vec<Clip<S>>),
}

impl<S: Real> ClipSource<S> {
    pub fn is_empty(&self) -> bool {
        match self {
            ClipSource::Sequences(s) => s.iter().all(|q| q.is_empty()),
            ClipSource::Clips(c) => c.is_empty(),
        }
    }

    /// `batch` clips, each drawn uniformly over all available windows (or
    /// fixed clips) and cropped to `crop` at a uniform origin.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        n_inputs: usize,
        batch: usize,
        crop: (usize, usize),
        rng: &mut R,
    ) -> Result<Vec<Clip<S>>> {
        let mut out = Vec::with_capacity(batch);
        match self {
            ClipSource::Sequences(seqs) => {
                let counts: Vec<usize> = seqs.iter().map(|s| s.windows(n_inputs)).collect();
                let total: usize = counts.iter().sum();
                if total == 0 {
                    return Err(Error::EmptyDataset);
                }
                for _ in 0..batch {
                    let mut k = rng.random_range(0..total);
                    let mut idx = 0;
                    while k >= counts[idx] {
                        k -= counts[idx];
                        idx += 1;
                    }
                    let seq = &seqs[idx];
                    let origin = random_origin(seq.h, seq.w, crop, rng)?;
                    out.push(Clip::cut(seq, n_inputs, k, origin, crop)?);
                }
            }
            ClipSource::Clips(clips) => {
                if clips.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                for _ in 0..batch {
                    let c = &clips[rng.random_range(0..clips.len())];
                    if c.frames.len() != n_inputs + 1 {
                        return Err(Error::MalformedBatch(alloc::format!(
                            "clip has {} frames, expected {}",
                            c.frames.len(),
                            n_inputs + 1
                        )));
                    }
                    if (c.h, c.w) == crop {
                        out.push(c.clone());
                    } else {
                        let origin = random_origin(c.h, c.w, crop, rng)?;
                        out.push(c.crop(origin, crop)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A training batch: stacked inputs `(b, n_inputs, h, w)` and targets
/// `(b, 1, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub inputs: Tensor4<S>,
    pub target: Tensor4<S>,
}

impl<S: Real> Batch<S> {
    pub fn from_clips(clips: &[Clip<S>]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::MalformedBatch("no clips".into()))?;
        let nf = first.frames.len();
        if nf < 2 {
            return Err(Error::MalformedBatch("clips need at least two frames".into()));
        }
        let (h, w) = (first.h, first.w);
        let mut inputs = Vec::with_capacity(clips.len() * (nf - 1) * h * w);
        let mut target = Vec::with_capacity(clips.len() * h * w);
        for c in clips {
            if c.frames.len() != nf || c.h != h || c.w != w || c.frames.iter().any(|f| f.len() != h * w) {
                return Err(Error::MalformedBatch("clips differ in frame count or size".into()));
            }
            for f in &c.frames[..nf - 1] {
                inputs.extend_from_slice(f);
            }
            target.extend_from_slice(&c.frames[nf - 1]);
        }
        Ok(Batch {
            inputs: Tensor4::from_vec(Shape::new(clips.len(), nf - 1, h, w), inputs)?,
            target: Tensor4::from_vec(Shape::new(clips.len(), 1, h, w), target)?,
        })
    }

    pub fn check(&self, cfg: &crate::model::ModelConfig) -> Result<()> {
        let (i, t) = (self.inputs.shape(), self.target.shape());
        if i.c != cfg.n_inputs * cfg.image_channels {
            return Err(Error::MalformedBatch(alloc::format!(
                "batch has {} input channels, model expects {}",
                i.c,
                cfg.n_inputs * cfg.image_channels
            )));
        }
        if t != Shape::new(i.n, cfg.image_channels, i.h, i.w) {
            return Err(Error::MalformedBatch(alloc::format!("target shape {t} does not match inputs {i}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Smooth value noise on a 4-pixel lattice.
    Noise,
    Checker,
    /// Linear ramp with Gaussian blobs.
    GradientBlob,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Noise, Pattern::Checker, Pattern::GradientBlob];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Noise => "noise",
            Pattern::Checker => "checker",
            Pattern::GradientBlob => "gradient-blob",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

/// Largest accepted speed per axis, in pixels per frame.
pub const MAX_SPEED: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    /// Displacement per frame, `(vy, vx)`.
    pub velocity: (f64, f64),
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (vy, vx) = self.velocity;
        if !(vy.abs() <= MAX_SPEED && vx.abs() <= MAX_SPEED) {
            return Err(Error::InvalidConfig(alloc::format!(
                "velocity ({vy}, {vx}) exceeds {MAX_SPEED} px/frame"
            )));
        }
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::InvalidConfig("synthetic size and frame count must be positive".into()));
        }
        Ok(())
    }

    /// Border around the visible window so moving content never runs out.
    pub fn margin(&self) -> usize {
        let travel = self.velocity.0.abs().max(self.velocity.1.abs()) * self.frames as f64;
        Float::ceil(travel) as usize + 2
    }
}

fn lerp_lattice(lattice: &[f64], lw: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y as usize, x as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| lattice[r * lw + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// The base pattern on a `(h, w)` canvas, values in `[0, 1]`.
pub fn render_pattern(pattern: Pattern, h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; h * w];
    match pattern {
        Pattern::Noise => {
            const CELL: f64 = 4.0;
            let lh = h / CELL as usize + 2;
            let lw = w / CELL as usize + 2;
            let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random_range(0.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = lerp_lattice(&lattice, lw, y as f64 / CELL, x as f64 / CELL);
                }
            }
        }
        Pattern::Checker => {
            let size = rng.random_range(3..=8);
            let (lo, hi) = (rng.random_range(0.05..0.35), rng.random_range(0.65..0.95));
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = if (y / size + x / size) % 2 == 0 { lo } else { hi };
                }
            }
        }
        Pattern::GradientBlob => {
            let (gy, gx) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            let blobs: Vec<(f64, f64, f64, f64)> = (0..(h * w / 150).clamp(3, 200))
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(1.5..5.0),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.5 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
                    for &(cy, cx, s, a) in &blobs {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d2 < 16.0 * s * s {
                            v += a * Float::exp(-d2 / (2.0 * s * s));
                        }
                    }
                    out[y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Render the sequence: frame `k` is the base pattern translated by
/// `k * velocity`, resampled bilinearly with zero fill outside the canvas.
pub fn generate_synthetic<S: Real>(spec: &SyntheticSpec) -> Result<FrameSequence<S>> {
    spec.validate()?;
    let m = spec.margin();
    let (ch, cw) = (spec.height + 2 * m, spec.width + 2 * m);
    let canvas = render_pattern(spec.pattern, ch, cw, spec.seed);
    let (vy, vx) = spec.velocity;
    let frames = (0..spec.frames)
        .map(|k| {
            let (dy, dx) = (k as f64 * vy, k as f64 * vx);
            let mut f = Vec::with_capacity(spec.height * spec.width);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let sy = (y + m) as f64 - dy;
                    let sx = (x + m) as f64 - dx;
                    f.push(S::from_f64(bilinear_sample(&canvas, ch, cw, sy, sx)));
                }
            }
            f
        })
        .collect();
    let mut seq = FrameSequence::new(spec.height, spec.width, frames, alloc::format!("synthetic:{}", spec.pattern.as_str()))?;
    seq.eight_bit = false;
    Ok(seq)
}
