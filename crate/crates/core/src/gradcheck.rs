//! Central finite-difference checks of every backward pass at 64-bit.
//!
//! Each check contracts the layer output with a fixed random tensor `r`,
//! `L = sum(r * f(theta))`, and compares the analytic gradient of `L` with
//! `(L(theta + h) - L(theta - h)) / 2h` entry by entry. For piecewise
//! functions, entries whose stencil straddles a kink (ReLU, max, bilinear
//! cell edge) are counted as skipped instead of compared.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention, channel_attention_backward, channel_attention_tape, spatial_attention,
    spatial_attention_backward, spatial_attention_tape, AttentionMode, ChannelGate,
};
use crate::layers::{
    conv2d, conv2d_backward, deform_conv2d, deform_conv2d_backward, rdb_backward, rdb_forward, rdb_forward_tape, relu,
    relu_backward, ConvParams, RdbParams,
};
use crate::model::{backward, forward, init_parameters, ModelConfig};
use crate::optim::l1_loss;
use crate::{Result, Shape, Tensor4};

/// Tolerance for single layers.
pub const UNIT_TOL: f64 = 1e-3;
/// Tolerance for the reduced full model.
pub const MODEL_TOL: f64 = 1e-2;
/// Largest fraction of a suite's entries that may be skipped as kinks.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.checked > 0
    }
}

/// Every check passed and kinks were rare.
pub fn suite_passed(results: &[CheckResult]) -> bool {
    let skipped: usize = results.iter().map(|r| r.skipped).sum();
    let total: usize = results.iter().map(|r| r.skipped + r.checked).sum();
    results.iter().all(CheckResult::passed) && (skipped as f64) <= MAX_SKIP_FRACTION * total as f64
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Detect and skip kinks; only meaningful for piecewise functions.
    pub kinks: bool,
    /// Check at most this many entries, chosen at random.
    pub max_entries: Option<usize>,
    pub tol: f64,
}

/// Compare `analytic` with central differences of `loss` around `values`.
pub fn fd_check(
    name: impl Into<String>,
    values: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    opts: FdOptions,
    rng: &mut impl Rng,
) -> CheckResult {
    assert_eq!(values.len(), analytic.len(), "gradient length");
    let idx: Vec<usize> = match opts.max_entries {
        Some(m) if m < values.len() => {
            let mut v = sample(rng, values.len(), m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..values.len()).collect(),
    };
    let h = opts.step;
    let mut theta = values.to_vec();
    let base = if opts.kinks { loss(&theta) } else { 0.0 };
    let (mut max_rel_err, mut checked, mut skipped) = (0.0f64, 0, 0);
    for i in idx {
        let v = theta[i];
        theta[i] = v + h;
        let plus = loss(&theta);
        theta[i] = v - h;
        let minus = loss(&theta);
        if opts.kinks {
            // Slopes over the four unit intervals of a five-point stencil.
            // On a smooth function their successive differences agree to
            // O(h^2); a slope jump inside the stencil breaks that.
            theta[i] = v + 2.0 * h;
            let plus2 = loss(&theta);
            theta[i] = v - 2.0 * h;
            let minus2 = loss(&theta);
            let s = [minus - minus2, base - minus, plus - base, plus2 - plus].map(|d| d / h);
            let d = [s[1] - s[0], s[2] - s[1], s[3] - s[2]];
            let third = (d[1] - d[0]).abs().max((d[2] - d[1]).abs());
            let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if third > 1e-6 + 0.1 * scale {
                theta[i] = v;
                skipped += 1;
                continue;
            }
        }
        theta[i] = v;
        let numeric = (plus - minus) / (2.0 * h);
        max_rel_err = max_rel_err.max(rel_err(analytic[i], numeric));
        checked += 1;
    }
    CheckResult {
        name: name.into(),
        max_rel_err,
        checked,
        skipped,
        tol: opts.tol,
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor4<f64>, v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(t.shape(), v.to_vec()).expect("same length")
}

fn conv_flat(p: &ConvParams<f64>) -> Vec<f64> {
    let mut v = p.weight.data().to_vec();
    v.extend_from_slice(&p.bias);
    v
}

fn conv_set(p: &mut ConvParams<f64>, v: &[f64]) -> usize {
    let n = p.weight.data().len();
    p.weight.data_mut().copy_from_slice(&v[..n]);
    let nb = p.bias.len();
    p.bias.copy_from_slice(&v[n..n + nb]);
    n + nb
}

fn rdb_flat(p: &RdbParams<f64>) -> Vec<f64> {
    p.dense.iter().chain(core::iter::once(&p.fusion)).flat_map(conv_flat).collect()
}

fn rdb_set(p: &mut RdbParams<f64>, v: &[f64]) {
    let mut off = 0;
    for c in p.dense.iter_mut().chain(core::iter::once(&mut p.fusion)) {
        off += conv_set(c, &v[off..]);
    }
}

fn gate_flat(p: &ChannelGate<f64>) -> Vec<f64> {
    let mut v = conv_flat(&p.fc1);
    v.extend(conv_flat(&p.fc2));
    v
}

fn gate_set(p: &mut ChannelGate<f64>, v: &[f64]) {
    let n = conv_set(&mut p.fc1, v);
    conv_set(&mut p.fc2, &v[n..]);
}

fn linear(tol: f64) -> FdOptions {
    FdOptions {
        step: 1e-3,
        kinks: false,
        max_entries: None,
        tol,
    }
}

fn piecewise(step: f64, tol: f64) -> FdOptions {
    FdOptions {
        step,
        kinks: true,
        max_entries: None,
        tol,
    }
}

/// Checks of every layer's backward pass.
pub fn unit_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Plain convolution, 1x2x5x5 input.
    {
        let x = uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let mut p = ConvParams::<f64>::fan_in(3, 2, 3, &mut rng);
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let r = uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &p, 1, &r)?;
        out.push(fd_check(
            "conv2d.input",
            x.data(),
            g.d_input.data(),
            |v| dot(&conv2d(&with_data(&x, v), &p, 1).unwrap(), &r),
            linear(UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "conv2d.params",
            &conv_flat(&p),
            &conv_flat(&g.d_params),
            |v| {
                let mut q = p.clone();
                conv_set(&mut q, v);
                dot(&conv2d(&x, &q, 1).unwrap(), &r)
            },
            linear(UNIT_TOL),
            &mut rng,
        ));
    }

    // ReLU away from zero.
    {
        let x = Tensor4::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| {
            let m = rng.random_range(0.02..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
        let d = relu_backward(&x, &r)?;
        out.push(fd_check(
            "relu.input",
            x.data(),
            d.data(),
            |v| dot(&relu(&with_data(&x, v)), &r),
            linear(UNIT_TOL),
            &mut rng,
        ));
    }

    // Deformable convolution, 1x2x6x6, offsets shifted off the integer grid.
    {
        let x = uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
        let theta = uniform(Shape::new(1, 18, 6, 6), -1.5, 1.5, &mut rng).map(|v| v + 0.37);
        let mut p = ConvParams::<f64>::fan_in(3, 2, 3, &mut rng);
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let r = uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut rng);
        let g = deform_conv2d_backward(&x, &theta, &p, &r)?;
        out.push(fd_check(
            "deform_conv2d.input",
            x.data(),
            g.d_input.data(),
            |v| dot(&deform_conv2d(&with_data(&x, v), &theta, &p).unwrap(), &r),
            linear(UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "deform_conv2d.params",
            &conv_flat(&p),
            &conv_flat(&g.d_params),
            |v| {
                let mut q = p.clone();
                conv_set(&mut q, v);
                dot(&deform_conv2d(&x, &theta, &q).unwrap(), &r)
            },
            linear(UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "deform_conv2d.offsets",
            theta.data(),
            g.d_offsets.data(),
            |v| dot(&deform_conv2d(&x, &with_data(&theta, v), &p).unwrap(), &r),
            piecewise(1e-3, UNIT_TOL),
            &mut rng,
        ));
    }

    // Residual dense block, G0=8, G=4, D=2.
    {
        let x = uniform(Shape::new(1, 8, 5, 5), -1.0, 1.0, &mut rng);
        let mut p = RdbParams::<f64>::new(8, 4, 2, &mut rng);
        for c in p.dense.iter_mut().chain(core::iter::once(&mut p.fusion)) {
            c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
        let (_, tape) = rdb_forward_tape(&x, &p)?;
        let mut dp = RdbParams::zeros(8, 4, 2);
        let dx = rdb_backward(&p, &tape, &r, &mut dp)?;
        out.push(fd_check(
            "rdb.input",
            x.data(),
            dx.data(),
            |v| dot(&rdb_forward(&with_data(&x, v), &p).unwrap(), &r),
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "rdb.params",
            &rdb_flat(&p),
            &rdb_flat(&dp),
            |v| {
                let mut q = p.clone();
                rdb_set(&mut q, v);
                dot(&rdb_forward(&x, &q).unwrap(), &r)
            },
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
    }

    // Channel attention, c=8, r=2.
    {
        let x = uniform(Shape::new(1, 8, 4, 4), -1.0, 1.0, &mut rng);
        let mut p = ChannelGate::<f64>::new(8, 2, &mut rng)?;
        p.fc1.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        p.fc2.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
        let (_, tape) = channel_attention_tape(&x, &p)?;
        let mut dp = ChannelGate::zeros(8, 2)?;
        let dx = channel_attention_backward(&p, &tape, &r, &mut dp)?;
        out.push(fd_check(
            "channel_attention.input",
            x.data(),
            dx.data(),
            |v| dot(&channel_attention(&with_data(&x, v), &p).unwrap(), &r),
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "channel_attention.params",
            &gate_flat(&p),
            &gate_flat(&dp),
            |v| {
                let mut q = p.clone();
                gate_set(&mut q, v);
                dot(&channel_attention(&x, &q).unwrap(), &r)
            },
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
    }

    // Spatial attention on 1x4x6x6.
    {
        let x = uniform(Shape::new(1, 4, 6, 6), -1.0, 1.0, &mut rng);
        let mut p = ConvParams::<f64>::fan_in(1, 2, 7, &mut rng);
        p.bias[0] = 0.1;
        let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
        let (_, tape) = spatial_attention_tape(&x, &p)?;
        let mut dp = ConvParams::zeros(1, 2, 7);
        let dx = spatial_attention_backward(&p, &tape, &r, &mut dp)?;
        out.push(fd_check(
            "spatial_attention.input",
            x.data(),
            dx.data(),
            |v| dot(&spatial_attention(&with_data(&x, v), &p).unwrap(), &r),
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
        out.push(fd_check(
            "spatial_attention.params",
            &conv_flat(&p),
            &conv_flat(&dp),
            |v| {
                let mut q = p.clone();
                conv_set(&mut q, v);
                dot(&spatial_attention(&x, &q).unwrap(), &r)
            },
            piecewise(1e-5, UNIT_TOL),
            &mut rng,
        ));
    }

    // Mean L1 with every difference at least 1e-2 away from zero.
    {
        let gt = uniform(Shape::new(1, 1, 4, 4), 0.0, 1.0, &mut rng);
        let pred = Tensor4::from_fn(gt.shape(), |b, c, y, x| {
            let d = rng.random_range(0.02..0.5);
            gt.at(b, c, y, x) + if rng.random_bool(0.5) { d } else { -d }
        });
        let g = l1_loss(&pred, &gt)?.grad;
        out.push(fd_check(
            "l1_loss.pred",
            pred.data(),
            g.data(),
            |v| l1_loss(&with_data(&pred, v), &gt).unwrap().loss,
            linear(UNIT_TOL),
            &mut rng,
        ));
    }

    Ok(out)
}

/// Configuration of the full-model check.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        attention: AttentionMode::Both,
        ..ModelConfig::tiny()
    }
}

/// Full-model check on 8x8 frames: every parameter tensor and the input
/// frames. Offsets are pushed off the integer grid by a bias of 0.37 on the
/// offset convolution plus small random weights.
pub fn model_suite(seed: u64, max_entries: Option<usize>) -> Result<Vec<CheckResult>> {
    let cfg = model_check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_parameters::<f64>(&cfg, seed)?;
    p.offset.bias.iter_mut().for_each(|b| *b = 0.37);
    p.offset
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-0.05..0.05));
    let x = uniform(Shape::new(1, cfg.n_inputs, 8, 8), 0.0, 1.0, &mut rng);
    let (y, tape) = forward(&cfg, &p, &x)?;
    let r = uniform(y.shape(), -1.0, 1.0, &mut rng);
    let g = backward(&p, &tape, &r, true)?;
    let opts = FdOptions {
        step: 1e-6,
        kinks: true,
        max_entries,
        tol: MODEL_TOL,
    };
    let mut out = Vec::new();
    let names = p.names();
    let analytic: Vec<Vec<f64>> = g.params.named().into_iter().map(|(_, t)| t.data.to_vec()).collect();
    for (k, name) in names.iter().enumerate() {
        let values = p.named()[k].1.data.to_vec();
        let mut q = p.clone();
        out.push(fd_check(
            name.clone(),
            &values,
            &analytic[k],
            |v| {
                q.slices_mut()[k].copy_from_slice(v);
                let y = crate::model::predict(&cfg, &q, &x).unwrap();
                dot(&y, &r)
            },
            opts,
            &mut rng,
        ));
    }
    let d_frames = g.frames.expect("input gradient requested");
    out.push(fd_check(
        "frames",
        x.data(),
        d_frames.data(),
        |v| dot(&crate::model::predict(&cfg, &p, &with_data(&x, v)).unwrap(), &r),
        opts,
        &mut rng,
    ));
    Ok(out)
}
