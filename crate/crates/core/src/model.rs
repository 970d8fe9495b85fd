//! End-to-end network: shared feature extractor, bottleneck with offset
//! prediction, one deformable convolution per input frame, block attention
//! and reconstruction.
//!
//! Parameter names follow `stage.block.layer.{weight,bias}`:
//!
//! | stage | layers |
//! |---|---|
//! | `feature` | `conv`, `rdb{i}.dense{j}`, `rdb{i}.fusion` |
//! | `bottleneck` | `reduce`, `rdb{i}.*`, `offset` |
//! | `deform` | `{k}` for input frame `k` (oldest first) |
//! | `attention` | `channel.fc1`, `channel.fc2`, `spatial` (only if enabled) |
//! | `reconstruction` | `fusion`, `rdb{i}.*`, `output` |

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{cbam_backward, cbam_tape, AttentionMode, AttentionParams, CbamTape};
use crate::layers::{
    conv2d, conv2d_backward_acc, deform_conv2d, deform_conv2d_backward_acc, rdb_backward, rdb_forward_tape,
    ConvParams, RdbParams, RdbTape,
};
use crate::tensor::{concat_channels, Shape, Tensor4};
use crate::{Error, Real, Result};

/// Kernel size of every convolution except the 1x1 fusions inside RDBs.
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of past frames fed to the network.
    pub n_inputs: usize,
    pub base_channels: usize,
    pub feature_rdbs: usize,
    pub bottleneck_rdbs: usize,
    pub reconstruction_rdbs: usize,
    /// Dense layers per residual dense block.
    pub rdb_depth: usize,
    pub rdb_growth: usize,
    pub attention: AttentionMode,
    pub attention_ratio: usize,
    pub spatial_kernel: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_inputs: 4,
            base_channels: 64,
            feature_rdbs: 2,
            bottleneck_rdbs: 12,
            reconstruction_rdbs: 8,
            rdb_depth: 6,
            rdb_growth: 32,
            attention: AttentionMode::Both,
            attention_ratio: 16,
            spatial_kernel: 7,
            image_channels: 1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for training smoke tests.
    pub fn small() -> Self {
        ModelConfig {
            base_channels: 16,
            feature_rdbs: 1,
            bottleneck_rdbs: 2,
            reconstruction_rdbs: 1,
            rdb_depth: 3,
            rdb_growth: 8,
            ..Self::default()
        }
    }

    /// Smallest configuration exercising every stage; used for full-model
    /// gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: 8,
            feature_rdbs: 1,
            bottleneck_rdbs: 2,
            reconstruction_rdbs: 1,
            rdb_depth: 2,
            rdb_growth: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_inputs == 0 {
            return bad("n_inputs must be at least 1".into());
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.base_channels < self.rdb_growth {
            return bad(format!(
                "base_channels {} smaller than rdb_growth {}",
                self.base_channels, self.rdb_growth
            ));
        }
        let uses_rdbs = self.feature_rdbs + self.bottleneck_rdbs + self.reconstruction_rdbs > 0;
        if uses_rdbs && (self.rdb_depth == 0 || self.rdb_growth == 0) {
            return bad("rdb_depth and rdb_growth must be positive".into());
        }
        if self.attention.has_channel() {
            let c = self.fused_channels();
            let r = self.attention_ratio;
            if r == 0 || c % r != 0 || c / r == 0 {
                return Err(Error::RatioMismatch { channels: c, ratio: r });
            }
        }
        if self.attention.has_spatial() && self.spatial_kernel % 2 == 0 {
            return bad(format!("spatial_kernel {} must be odd", self.spatial_kernel));
        }
        Ok(())
    }

    /// Channels of the concatenated per-frame features.
    pub fn fused_channels(&self) -> usize {
        self.base_channels * self.n_inputs
    }

    /// Channels of one offset field.
    pub fn offset_channels(&self) -> usize {
        2 * KERNEL * KERNEL
    }
}

/// One convolution in the canonical layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn num_values(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

/// Every convolution of the network in canonical order.
pub fn layer_table(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut t = Vec::new();
    let mut push = |name: String, c_out, c_in, kernel| {
        t.push(LayerSpec {
            name,
            c_out,
            c_in,
            kernel,
        })
    };
    let c = cfg.base_channels;
    let rdb = |push: &mut dyn FnMut(String, usize, usize, usize), stage: &str, i: usize| {
        for j in 0..cfg.rdb_depth {
            push(format!("{stage}.rdb{i}.dense{j}"), cfg.rdb_growth, c + j * cfg.rdb_growth, 3);
        }
        push(format!("{stage}.rdb{i}.fusion"), c, c + cfg.rdb_depth * cfg.rdb_growth, 1);
    };
    push("feature.conv".into(), c, cfg.image_channels, KERNEL);
    for i in 0..cfg.feature_rdbs {
        rdb(&mut push, "feature", i);
    }
    push("bottleneck.reduce".into(), c, cfg.fused_channels(), KERNEL);
    for i in 0..cfg.bottleneck_rdbs {
        rdb(&mut push, "bottleneck", i);
    }
    push(
        "bottleneck.offset".into(),
        cfg.offset_channels() * cfg.n_inputs,
        c,
        KERNEL,
    );
    for k in 0..cfg.n_inputs {
        push(format!("deform.{k}"), c, c, KERNEL);
    }
    if cfg.attention.has_channel() {
        let hidden = cfg.fused_channels() / cfg.attention_ratio.max(1);
        push("attention.channel.fc1".into(), hidden, cfg.fused_channels(), 1);
        push("attention.channel.fc2".into(), cfg.fused_channels(), hidden, 1);
    }
    if cfg.attention.has_spatial() {
        push("attention.spatial".into(), 1, 2, cfg.spatial_kernel);
    }
    push("reconstruction.fusion".into(), c, cfg.fused_channels(), KERNEL);
    for i in 0..cfg.reconstruction_rdbs {
        rdb(&mut push, "reconstruction", i);
    }
    push("reconstruction.output".into(), cfg.image_channels, c, KERNEL);
    t
}

/// Exact number of trainable scalars.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    layer_table(cfg).iter().map(LayerSpec::num_values).sum()
}

/// All trainable tensors of the network. Gradients and optimizer moments use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S> {
    pub feature_conv: ConvParams<S>,
    pub feature_rdbs: Vec<RdbParams<S>>,
    pub reduce: ConvParams<S>,
    pub bottleneck_rdbs: Vec<RdbParams<S>>,
    pub offset: ConvParams<S>,
    pub deform: Vec<ConvParams<S>>,
    pub attention: AttentionParams<S>,
    pub fusion: ConvParams<S>,
    pub reconstruction_rdbs: Vec<RdbParams<S>>,
    pub output: ConvParams<S>,
}

/// A named parameter tensor as stored in checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct NamedTensor<'a, S> {
    pub dims: [usize; 4],
    pub rank: usize,
    pub data: &'a [S],
}

impl<'a, S> NamedTensor<'a, S> {
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

impl<S: Real> Parameters<S> {
    /// All-zero parameters with the layout of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let rdbs = |n: usize| {
            (0..n)
                .map(|_| RdbParams::zeros(c, cfg.rdb_growth, cfg.rdb_depth))
                .collect::<Vec<_>>()
        };
        Ok(Parameters {
            feature_conv: ConvParams::zeros(c, cfg.image_channels, KERNEL),
            feature_rdbs: rdbs(cfg.feature_rdbs),
            reduce: ConvParams::zeros(c, cfg.fused_channels(), KERNEL),
            bottleneck_rdbs: rdbs(cfg.bottleneck_rdbs),
            offset: ConvParams::zeros(cfg.offset_channels() * cfg.n_inputs, c, KERNEL),
            deform: (0..cfg.n_inputs).map(|_| ConvParams::zeros(c, c, KERNEL)).collect(),
            attention: AttentionParams::zeros(
                cfg.attention,
                cfg.fused_channels(),
                cfg.attention_ratio,
                cfg.spatial_kernel,
            )?,
            fusion: ConvParams::zeros(c, cfg.fused_channels(), KERNEL),
            reconstruction_rdbs: rdbs(cfg.reconstruction_rdbs),
            output: ConvParams::zeros(cfg.image_channels, c, KERNEL),
        })
    }

    /// Convolutions in canonical order, named as in [`layer_table`].
    pub fn convs(&self) -> Vec<(String, &ConvParams<S>)> {
        let mut out: Vec<(String, &ConvParams<S>)> = Vec::new();
        fn rdbs<'a, S>(out: &mut Vec<(String, &'a ConvParams<S>)>, stage: &str, blocks: &'a [RdbParams<S>]) {
            for (i, b) in blocks.iter().enumerate() {
                for (j, d) in b.dense.iter().enumerate() {
                    out.push((format!("{stage}.rdb{i}.dense{j}"), d));
                }
                out.push((format!("{stage}.rdb{i}.fusion"), &b.fusion));
            }
        }
        out.push(("feature.conv".into(), &self.feature_conv));
        rdbs(&mut out, "feature", &self.feature_rdbs);
        out.push(("bottleneck.reduce".into(), &self.reduce));
        rdbs(&mut out, "bottleneck", &self.bottleneck_rdbs);
        out.push(("bottleneck.offset".into(), &self.offset));
        for (k, d) in self.deform.iter().enumerate() {
            out.push((format!("deform.{k}"), d));
        }
        if let Some(g) = &self.attention.channel {
            out.push(("attention.channel.fc1".into(), &g.fc1));
            out.push(("attention.channel.fc2".into(), &g.fc2));
        }
        if let Some(s) = &self.attention.spatial {
            out.push(("attention.spatial".into(), s));
        }
        out.push(("reconstruction.fusion".into(), &self.fusion));
        rdbs(&mut out, "reconstruction", &self.reconstruction_rdbs);
        out.push(("reconstruction.output".into(), &self.output));
        out
    }

    /// Mutable convolutions in the same order as [`Parameters::convs`].
    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams<S>> {
        let mut out: Vec<&mut ConvParams<S>> = Vec::new();
        fn rdbs<'a, S>(out: &mut Vec<&'a mut ConvParams<S>>, blocks: &'a mut [RdbParams<S>]) {
            for b in blocks.iter_mut() {
                out.extend(b.dense.iter_mut());
                out.push(&mut b.fusion);
            }
        }
        out.push(&mut self.feature_conv);
        rdbs(&mut out, &mut self.feature_rdbs);
        out.push(&mut self.reduce);
        rdbs(&mut out, &mut self.bottleneck_rdbs);
        out.push(&mut self.offset);
        out.extend(self.deform.iter_mut());
        if let Some(g) = &mut self.attention.channel {
            out.push(&mut g.fc1);
            out.push(&mut g.fc2);
        }
        if let Some(s) = &mut self.attention.spatial {
            out.push(s);
        }
        out.push(&mut self.fusion);
        rdbs(&mut out, &mut self.reconstruction_rdbs);
        out.push(&mut self.output);
        out
    }

    /// Weight and bias tensors in canonical order.
    pub fn named(&self) -> Vec<(String, NamedTensor<'_, S>)> {
        let mut out = Vec::new();
        for (name, c) in self.convs() {
            out.push((
                format!("{name}.weight"),
                NamedTensor {
                    dims: c.weight.shape().dims(),
                    rank: 4,
                    data: c.weight.data(),
                },
            ));
            out.push((
                format!("{name}.bias"),
                NamedTensor {
                    dims: [c.bias.len(), 0, 0, 0],
                    rank: 1,
                    data: &c.bias,
                },
            ));
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Flat value slices in canonical order.
    pub fn slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        for c in self.convs_mut() {
            let ConvParams { weight, bias } = c;
            out.push(weight.data_mut());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.num_values()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.convs()
            .iter()
            .all(|(_, c)| c.weight.is_finite() && c.bias.iter().all(|b| b.is_finite()))
    }

    pub fn cast<T: Real>(&self) -> Parameters<T> {
        let rdbs = |v: &[RdbParams<S>]| v.iter().map(RdbParams::cast).collect::<Vec<_>>();
        Parameters {
            feature_conv: self.feature_conv.cast(),
            feature_rdbs: rdbs(&self.feature_rdbs),
            reduce: self.reduce.cast(),
            bottleneck_rdbs: rdbs(&self.bottleneck_rdbs),
            offset: self.offset.cast(),
            deform: self.deform.iter().map(ConvParams::cast).collect(),
            attention: AttentionParams {
                channel: self.attention.channel.as_ref().map(|g| crate::attention::ChannelGate {
                    fc1: g.fc1.cast(),
                    fc2: g.fc2.cast(),
                }),
                spatial: self.attention.spatial.as_ref().map(ConvParams::cast),
            },
            fusion: self.fusion.cast(),
            reconstruction_rdbs: rdbs(&self.reconstruction_rdbs),
            output: self.output.cast(),
        }
    }

    /// Check that `other` has exactly the same names and dims.
    pub fn check_aligned<T: Real>(&self, other: &Parameters<T>) -> Result<()> {
        let a = self.named();
        let b = other.named();
        let missing: Vec<String> = a
            .iter()
            .filter(|(n, _)| !b.iter().any(|(m, _)| m == n))
            .map(|(n, _)| n.clone())
            .collect();
        let extra: Vec<String> = b
            .iter()
            .filter(|(n, _)| !a.iter().any(|(m, _)| m == n))
            .map(|(n, _)| n.clone())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if x.dims() != y.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: x.dims().to_vec(),
                    found: y.dims().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Seeded initialization: fan-in uniform everywhere except the offset
/// convolution, which starts at exactly zero so no deformation is applied.
pub fn init_parameters<S: Real>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.base_channels;
    let rdbs = |n: usize, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| RdbParams::new(c, cfg.rdb_growth, cfg.rdb_depth, rng))
            .collect::<Vec<_>>()
    };
    let feature_conv = ConvParams::fan_in(c, cfg.image_channels, KERNEL, &mut rng);
    let feature_rdbs = rdbs(cfg.feature_rdbs, &mut rng);
    let reduce = ConvParams::fan_in(c, cfg.fused_channels(), KERNEL, &mut rng);
    let bottleneck_rdbs = rdbs(cfg.bottleneck_rdbs, &mut rng);
    let offset = ConvParams::zeros(cfg.offset_channels() * cfg.n_inputs, c, KERNEL);
    let deform = (0..cfg.n_inputs)
        .map(|_| ConvParams::fan_in(c, c, KERNEL, &mut rng))
        .collect();
    let attention = AttentionParams::new(
        cfg.attention,
        cfg.fused_channels(),
        cfg.attention_ratio,
        cfg.spatial_kernel,
        &mut rng,
    )?;
    let fusion = ConvParams::fan_in(c, cfg.fused_channels(), KERNEL, &mut rng);
    let reconstruction_rdbs = rdbs(cfg.reconstruction_rdbs, &mut rng);
    let output = ConvParams::fan_in(cfg.image_channels, c, KERNEL, &mut rng);
    Ok(Parameters {
        feature_conv,
        feature_rdbs,
        reduce,
        bottleneck_rdbs,
        offset,
        deform,
        attention,
        fusion,
        reconstruction_rdbs,
        output,
    })
}

/// Everything [`backward`] needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    cfg: ModelConfig,
    frames: Tensor4<S>,
    feature_rdbs: Vec<RdbTape<S>>,
    features: Tensor4<S>,
    bottleneck_rdbs: Vec<RdbTape<S>>,
    bottleneck: Tensor4<S>,
    offsets: Tensor4<S>,
    cbam: CbamTape<S>,
    attended: Tensor4<S>,
    reconstruction_rdbs: Vec<RdbTape<S>>,
    reconstructed: Tensor4<S>,
}

impl<S: Real> Tape<S> {
    /// Predicted offset fields, `(n, 18 * n_inputs, h, w)`.
    pub fn offsets(&self) -> &Tensor4<S> {
        &self.offsets
    }

    pub fn attention(&self) -> &CbamTape<S> {
        &self.cbam
    }
}

/// Gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub params: Parameters<S>,
    /// Gradient with respect to the stacked input frames.
    pub frames: Option<Tensor4<S>>,
}

/// Stack `n_inputs` frames of shape `(n, image_channels, h, w)` along channels.
pub fn stack_frames<S: Real>(frames: &[&Tensor4<S>]) -> Result<Tensor4<S>> {
    concat_channels(frames)
}

fn check_frames(cfg: &ModelConfig, frames: Shape) -> Result<()> {
    if frames.c != cfg.n_inputs * cfg.image_channels {
        return Err(Error::FrameCount {
            expected: cfg.n_inputs,
            found: frames.c / cfg.image_channels.max(1),
        });
    }
    if frames.h == 0 || frames.w == 0 || frames.n == 0 {
        return Err(Error::Empty { op: "forward" });
    }
    Ok(())
}

fn rdb_chain<S: Real>(
    x: Tensor4<S>,
    blocks: &[RdbParams<S>],
    keep: bool,
) -> Result<(Tensor4<S>, Vec<RdbTape<S>>)> {
    let mut tapes = Vec::new();
    let mut y = x;
    for b in blocks {
        let (out, tape) = rdb_forward_tape(&y, b)?;
        if keep {
            tapes.push(tape);
        }
        y = out;
    }
    Ok((y, tapes))
}

fn rdb_chain_backward<S: Real>(
    blocks: &[RdbParams<S>],
    tapes: &[RdbTape<S>],
    d: Tensor4<S>,
    grads: &mut [RdbParams<S>],
) -> Result<Tensor4<S>> {
    let mut d = d;
    for ((b, t), g) in blocks.iter().zip(tapes).zip(grads.iter_mut()).rev() {
        d = rdb_backward(b, t, &d, g)?;
    }
    Ok(d)
}

fn run<S: Real>(
    cfg: &ModelConfig,
    p: &Parameters<S>,
    frames: &Tensor4<S>,
    keep: bool,
) -> Result<(Tensor4<S>, Option<Tape<S>>)> {
    cfg.validate()?;
    let s = frames.shape();
    check_frames(cfg, s)?;
    let (n, nf, c, h, w) = (s.n, cfg.n_inputs, cfg.base_channels, s.h, s.w);
    let pad = KERNEL / 2;

    // Each frame goes through the shared extractor as its own batch item;
    // (n, nf, ...) and (n * nf, 1, ...) share one memory layout.
    let per_frame = frames
        .clone()
        .reshape(Shape::new(n * nf, cfg.image_channels, h, w))?;
    let shallow = conv2d(&per_frame, &p.feature_conv, pad)?;
    let (feat, feature_rdbs) = rdb_chain(shallow, &p.feature_rdbs, keep)?;
    let features = feat.reshape(Shape::new(n, nf * c, h, w))?;

    let reduced = conv2d(&features, &p.reduce, pad)?;
    let (bottleneck, bottleneck_rdbs) = rdb_chain(reduced, &p.bottleneck_rdbs, keep)?;
    let offsets = conv2d(&bottleneck, &p.offset, pad)?;

    let oc = cfg.offset_channels();
    let mut parts = Vec::with_capacity(nf);
    for k in 0..nf {
        let f_k = features.channel_range(k * c, (k + 1) * c);
        let theta_k = offsets.channel_range(k * oc, (k + 1) * oc);
        parts.push(deform_conv2d(&f_k, &theta_k, &p.deform[k])?);
    }
    let refs: Vec<&Tensor4<S>> = parts.iter().collect();
    let deformed = concat_channels(&refs)?;
    drop(parts);

    let (attended, cbam) = cbam_tape(&deformed, &p.attention, cfg.attention)?;
    drop(deformed);
    let fused = conv2d(&attended, &p.fusion, pad)?;
    let (reconstructed, reconstruction_rdbs) = rdb_chain(fused, &p.reconstruction_rdbs, keep)?;
    let prediction = conv2d(&reconstructed, &p.output, pad)?;

    let tape = keep.then(|| Tape {
        cfg: *cfg,
        frames: per_frame,
        feature_rdbs,
        features,
        bottleneck_rdbs,
        bottleneck,
        offsets,
        cbam,
        attended,
        reconstruction_rdbs,
        reconstructed,
    });
    Ok((prediction, tape))
}

/// Forward pass over `frames` of shape `(n, n_inputs * image_channels, h, w)`,
/// oldest frame first, pixel values in `[0, 1]`. Returns the predicted next
/// frame `(n, image_channels, h, w)` and the tape for [`backward`].
pub fn forward<S: Real>(cfg: &ModelConfig, p: &Parameters<S>, frames: &Tensor4<S>) -> Result<(Tensor4<S>, Tape<S>)> {
    let (y, tape) = run(cfg, p, frames, true)?;
    Ok((y, tape.expect("tape requested")))
}

/// Forward pass without retaining intermediates.
pub fn predict<S: Real>(cfg: &ModelConfig, p: &Parameters<S>, frames: &Tensor4<S>) -> Result<Tensor4<S>> {
    run(cfg, p, frames, false).map(|(y, _)| y)
}

/// Backpropagate `d_prediction` through a recorded forward pass.
pub fn backward<S: Real>(
    p: &Parameters<S>,
    tape: &Tape<S>,
    d_prediction: &Tensor4<S>,
    want_input: bool,
) -> Result<Gradients<S>> {
    let cfg = &tape.cfg;
    let mut g = Parameters::zeros(cfg)?;
    g.check_aligned(p)?;
    let fs = tape.features.shape();
    let expected = Shape::new(fs.n, cfg.image_channels, fs.h, fs.w);
    if d_prediction.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "backward",
            expected,
            found: d_prediction.shape(),
        });
    }
    let pad = KERNEL / 2;
    let (nf, c, oc) = (cfg.n_inputs, cfg.base_channels, cfg.offset_channels());

    let d_rec = conv2d_backward_acc(&tape.reconstructed, &p.output, pad, d_prediction, &mut g.output, true)?
        .expect("input grad");
    let d_fused = rdb_chain_backward(
        &p.reconstruction_rdbs,
        &tape.reconstruction_rdbs,
        d_rec,
        &mut g.reconstruction_rdbs,
    )?;
    let d_att = conv2d_backward_acc(&tape.attended, &p.fusion, pad, &d_fused, &mut g.fusion, true)?
        .expect("input grad");
    let d_deformed = cbam_backward(&p.attention, &tape.cbam, &d_att, &mut g.attention)?;

    let mut d_features = Tensor4::zeros(fs);
    let mut d_offsets = Tensor4::zeros(tape.offsets.shape());
    for k in 0..nf {
        let f_k = tape.features.channel_range(k * c, (k + 1) * c);
        let theta_k = tape.offsets.channel_range(k * oc, (k + 1) * oc);
        let d_k = d_deformed.channel_range(k * c, (k + 1) * c);
        let (d_f, d_theta) = deform_conv2d_backward_acc(&f_k, &theta_k, &p.deform[k], &d_k, &mut g.deform[k])?;
        d_features.add_channel_block(k * c, &d_f);
        d_offsets.add_channel_block(k * oc, &d_theta);
    }

    let d_bott = conv2d_backward_acc(&tape.bottleneck, &p.offset, pad, &d_offsets, &mut g.offset, true)?
        .expect("input grad");
    let d_reduced = rdb_chain_backward(&p.bottleneck_rdbs, &tape.bottleneck_rdbs, d_bott, &mut g.bottleneck_rdbs)?;
    let d_from_reduce = conv2d_backward_acc(&tape.features, &p.reduce, pad, &d_reduced, &mut g.reduce, true)?
        .expect("input grad");
    d_features.add_assign(&d_from_reduce);

    let d_feat = d_features.reshape(Shape::new(fs.n * nf, c, fs.h, fs.w))?;
    let d_shallow = rdb_chain_backward(&p.feature_rdbs, &tape.feature_rdbs, d_feat, &mut g.feature_rdbs)?;
    let d_frames = conv2d_backward_acc(&tape.frames, &p.feature_conv, pad, &d_shallow, &mut g.feature_conv, want_input)?;
    let frames = match d_frames {
        Some(d) => Some(d.reshape(Shape::new(fs.n, nf * cfg.image_channels, fs.h, fs.w))?),
        None => None,
    };
    Ok(Gradients { params: g, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_count_is_in_expected_range() {
        let n = count_parameters(&ModelConfig::default());
        assert_eq!(n, 6_334_460);
    }

    #[test]
    fn count_by_hand_without_rdbs() {
        let cfg = ModelConfig {
            n_inputs: 1,
            feature_rdbs: 0,
            bottleneck_rdbs: 0,
            reconstruction_rdbs: 0,
            attention: AttentionMode::None,
            ..ModelConfig::default()
        };
        // feature conv 1->64; reduce, deform and fusion 64->64; offset
        // 64->18; output 64->1; all 3x3 with bias.
        let expect = (64 * 9 + 64) + 3 * (64 * 64 * 9 + 64) + (18 * 64 * 9 + 18) + (64 * 9 + 1);
        assert_eq!(count_parameters(&cfg), expect);
    }

    #[test]
    fn count_is_additive_in_reconstruction_blocks() {
        let cfg = ModelConfig::default();
        let doubled = ModelConfig {
            reconstruction_rdbs: 16,
            ..cfg
        };
        let one_rdb = RdbParams::<f32>::zeros(64, 32, 6).num_values();
        assert_eq!(count_parameters(&doubled) - count_parameters(&cfg), 8 * one_rdb);
    }

    #[test]
    fn names_agree_with_layer_table() {
        for cfg in [ModelConfig::tiny(), ModelConfig::small()] {
            for mode in AttentionMode::ALL {
                let cfg = ModelConfig { attention: mode, ..cfg };
                let p = init_parameters::<f32>(&cfg, 1).unwrap();
                let names: Vec<String> = p.convs().into_iter().map(|(n, _)| n).collect();
                let table: Vec<String> = layer_table(&cfg).into_iter().map(|l| l.name).collect();
                assert_eq!(names, table);
                assert_eq!(p.num_values(), count_parameters(&cfg));
                for ((_, c), spec) in p.convs().iter().zip(layer_table(&cfg)) {
                    assert_eq!(c.weight.shape().dims(), [spec.c_out, spec.c_in, spec.kernel, spec.kernel]);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_offsets() {
        let cfg = ModelConfig::tiny();
        let a = init_parameters::<f32>(&cfg, 7).unwrap();
        let b = init_parameters::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.offset.weight.data().iter().all(|&v| v == 0.0));
        assert!(a.offset.bias.iter().all(|&v| v == 0.0));
        let c = init_parameters::<f32>(&cfg, 8).unwrap();
        assert_ne!(a.feature_conv, c.feature_conv);
        assert_ne!(a.output, c.output);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_inputs: 0,
            ..ModelConfig::tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = ModelConfig {
            attention_ratio: 5,
            ..ModelConfig::tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::RatioMismatch { .. })));
        let bad = ModelConfig {
            spatial_kernel: 4,
            ..ModelConfig::tiny()
        };
        assert!(bad.validate().is_err());
    }

    fn frames(cfg: &ModelConfig, n: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Shape::new(n, cfg.n_inputs, h, w), |_, _, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn forward_preserves_shape_and_rejects_bad_input() {
        let cfg = ModelConfig::tiny();
        let p = init_parameters::<f64>(&cfg, 1).unwrap();
        for (h, w) in [(8, 8), (9, 13)] {
            let x = frames(&cfg, 2, h, w, 2);
            let (y, _) = forward(&cfg, &p, &x).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 1, h, w));
            assert_eq!(predict(&cfg, &p, &x).unwrap(), y);
        }
        let x = Tensor4::zeros(Shape::new(1, 3, 8, 8));
        assert!(matches!(forward(&cfg, &p, &x), Err(Error::FrameCount { expected: 4, found: 3 })));
    }

    #[test]
    fn backward_zero_and_linear() {
        let cfg = ModelConfig::tiny();
        let mut p = init_parameters::<f64>(&cfg, 3).unwrap();
        p.offset.bias.iter_mut().for_each(|b| *b = 0.37);
        let x = frames(&cfg, 1, 8, 8, 4);
        let (y, tape) = forward(&cfg, &p, &x).unwrap();
        let zero = backward(&p, &tape, &Tensor4::zeros(y.shape()), true).unwrap();
        for (_, t) in zero.params.named() {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let d = Tensor4::from_fn(y.shape(), |_, _, _, _| r.random_range(-1.0..1.0));
        let g1 = backward(&p, &tape, &d, true).unwrap();
        let g2 = backward(&p, &tape, &d.scale(2.0), true).unwrap();
        for ((_, a), (_, b)) in g1.params.named().iter().zip(g2.params.named().iter()) {
            for (&u, &v) in a.data.iter().zip(b.data) {
                assert!((2.0 * u - v).abs() <= 1e-6 * v.abs().max(1e-12));
            }
        }
        assert!(g1.params.is_finite());
        assert!(g1.params.offset.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn offset_gradient_nonzero_from_zero_init() {
        let cfg = ModelConfig::tiny();
        let p = init_parameters::<f64>(&cfg, 9).unwrap();
        let x = frames(&cfg, 1, 8, 8, 10);
        let (y, tape) = forward(&cfg, &p, &x).unwrap();
        assert!(tape.offsets().data().iter().all(|&v| v == 0.0));
        let g = backward(&p, &tape, &Tensor4::full(y.shape(), 1.0), false).unwrap();
        assert!(g.params.offset.weight.data().iter().any(|&v| v.abs() > 1e-8));
        assert!(g.params.is_finite());
        assert!(g.frames.is_none());
    }
}
