//! Convolutional block attention: a channel gate from pooled channel
//! descriptors followed by a spatial gate from pooled channel maps.

use alloc::vec::Vec;

use rand::Rng;

use crate::layers::{conv2d, conv2d_backward_acc, ConvParams};
use crate::tensor::{concat_channels, reduce_channels, reduce_spatial, Reduce, Tensor4};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttentionMode {
    None,
    Channel,
    Spatial,
    #[default]
    Both,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::Channel,
        AttentionMode::Spatial,
        AttentionMode::Both,
    ];

    pub fn has_channel(self) -> bool {
        matches!(self, AttentionMode::Channel | AttentionMode::Both)
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Channel => "channel",
            AttentionMode::Spatial => "spatial",
            AttentionMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Shared two-layer MLP `c -> c/r -> c`, stored as 1x1 convolutions over the
/// pooled `(n, c, 1, 1)` descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGate<S> {
    pub fc1: ConvParams<S>,
    pub fc2: ConvParams<S>,
}

impl<S: Real> ChannelGate<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, ratio)?;
        Ok(ChannelGate {
            fc1: ConvParams::fan_in(hidden, channels, 1, rng),
            fc2: ConvParams::fan_in(channels, hidden, 1, rng),
        })
    }

    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        let hidden = hidden_width(channels, ratio)?;
        Ok(ChannelGate {
            fc1: ConvParams::zeros(hidden, channels, 1),
            fc2: ConvParams::zeros(channels, hidden, 1),
        })
    }
}

fn hidden_width(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || channels % ratio != 0 || channels / ratio == 0 {
        return Err(Error::RatioMismatch { channels, ratio });
    }
    Ok(channels / ratio)
}

/// Parameters of the blocks a mode enables; disabled blocks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S> {
    pub channel: Option<ChannelGate<S>>,
    /// `(1, 2, k, k)` convolution over `[mean, max]` channel maps.
    pub spatial: Option<ConvParams<S>>,
}

impl<S: Real> AttentionParams<S> {
    pub fn new<R: Rng + ?Sized>(
        mode: AttentionMode,
        channels: usize,
        ratio: usize,
        spatial_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionParams {
            channel: if mode.has_channel() {
                Some(ChannelGate::new(channels, ratio, rng)?)
            } else {
                None
            },
            spatial: mode
                .has_spatial()
                .then(|| ConvParams::fan_in(1, 2, spatial_kernel, rng)),
        })
    }

    pub fn zeros(mode: AttentionMode, channels: usize, ratio: usize, spatial_kernel: usize) -> Result<Self> {
        Ok(AttentionParams {
            channel: if mode.has_channel() {
                Some(ChannelGate::zeros(channels, ratio)?)
            } else {
                None
            },
            spatial: mode.has_spatial().then(|| ConvParams::zeros(1, 2, spatial_kernel)),
        })
    }

    pub fn mode(&self) -> AttentionMode {
        match (self.channel.is_some(), self.spatial.is_some()) {
            (false, false) => AttentionMode::None,
            (true, false) => AttentionMode::Channel,
            (false, true) => AttentionMode::Spatial,
            (true, true) => AttentionMode::Both,
        }
    }
}

#[inline]
fn sigmoid<S: Real>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

/// Intermediates of one channel-gate forward.
#[derive(Debug, Clone)]
pub struct ChannelTape<S> {
    input: Tensor4<S>,
    avg: Tensor4<S>,
    max: Tensor4<S>,
    hidden_avg: Tensor4<S>,
    hidden_max: Tensor4<S>,
    weights: Tensor4<S>,
}

impl<S: Real> ChannelTape<S> {
    /// Per-channel gate values, `(n, c, 1, 1)`.
    pub fn weights(&self) -> &Tensor4<S> {
        &self.weights
    }
}

/// Intermediates of one spatial-gate forward.
#[derive(Debug, Clone)]
pub struct SpatialTape<S> {
    input: Tensor4<S>,
    pooled: Tensor4<S>,
    weights: Tensor4<S>,
}

impl<S: Real> SpatialTape<S> {
    /// Per-pixel gate values, `(n, 1, h, w)`.
    pub fn weights(&self) -> &Tensor4<S> {
        &self.weights
    }
}

fn scale_channels<S: Real>(x: &Tensor4<S>, wts: &Tensor4<S>) -> Tensor4<S> {
    let s = x.shape();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
        let k = wts.data()[i];
        plane.iter_mut().for_each(|v| *v *= k);
    }
    out
}

fn scale_pixels<S: Real>(x: &Tensor4<S>, map: &Tensor4<S>) -> Tensor4<S> {
    let s = x.shape();
    let mut out = x.clone();
    for b in 0..s.n {
        let m = map.sample(b);
        for plane in out.sample_mut(b).chunks_exact_mut(s.plane()) {
            plane.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
    }
    out
}

pub fn channel_attention<S: Real>(x: &Tensor4<S>, p: &ChannelGate<S>) -> Result<Tensor4<S>> {
    channel_attention_tape(x, p).map(|(y, _)| y)
}

pub fn channel_attention_tape<S: Real>(x: &Tensor4<S>, p: &ChannelGate<S>) -> Result<(Tensor4<S>, ChannelTape<S>)> {
    if x.shape().c != p.fc1.c_in() {
        return Err(Error::ChannelMismatch {
            op: "channel_attention",
            expected: p.fc1.c_in(),
            found: x.shape().c,
        });
    }
    let avg = reduce_spatial(x, Reduce::Mean)?;
    let max = reduce_spatial(x, Reduce::Max)?;
    let hidden_avg = crate::layers::relu(&conv2d(&avg, &p.fc1, 0)?);
    let hidden_max = crate::layers::relu(&conv2d(&max, &p.fc1, 0)?);
    let z = crate::tensor::add(&conv2d(&hidden_avg, &p.fc2, 0)?, &conv2d(&hidden_max, &p.fc2, 0)?)?;
    let weights = z.map(sigmoid);
    let y = scale_channels(x, &weights);
    Ok((
        y,
        ChannelTape {
            input: x.clone(),
            avg,
            max,
            hidden_avg,
            hidden_max,
            weights,
        },
    ))
}

/// Returns the input gradient; accumulates into `d_params`.
pub fn channel_attention_backward<S: Real>(
    p: &ChannelGate<S>,
    tape: &ChannelTape<S>,
    d_out: &Tensor4<S>,
    d_params: &mut ChannelGate<S>,
) -> Result<Tensor4<S>> {
    let x = &tape.input;
    let s = x.shape();
    if d_out.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "channel_attention_backward",
            expected: s,
            found: d_out.shape(),
        });
    }
    let hw = s.plane();
    let mut d_x = scale_channels(d_out, &tape.weights);
    let d_z = Tensor4::from_fn(tape.weights.shape(), |b, c, _, _| {
        let start = (b * s.c + c) * hw;
        let dw: S = x.data()[start..start + hw]
            .iter()
            .zip(&d_out.data()[start..start + hw])
            .map(|(&a, &d)| a * d)
            .sum();
        let w = tape.weights.at(b, c, 0, 0);
        dw * w * (S::one() - w)
    });
    let d_ha = conv2d_backward_acc(&tape.hidden_avg, &p.fc2, 0, &d_z, &mut d_params.fc2, true)?.expect("input grad");
    let d_hm = conv2d_backward_acc(&tape.hidden_max, &p.fc2, 0, &d_z, &mut d_params.fc2, true)?.expect("input grad");
    let d_ha = crate::layers::relu_backward(&tape.hidden_avg, &d_ha)?;
    let d_hm = crate::layers::relu_backward(&tape.hidden_max, &d_hm)?;
    let d_avg = conv2d_backward_acc(&tape.avg, &p.fc1, 0, &d_ha, &mut d_params.fc1, true)?.expect("input grad");
    let d_max = conv2d_backward_acc(&tape.max, &p.fc1, 0, &d_hm, &mut d_params.fc1, true)?.expect("input grad");
    let inv = S::one() / S::from_f64(hw as f64);
    for (i, plane) in d_x.data_mut().chunks_exact_mut(hw).enumerate() {
        let ga = d_avg.data()[i] * inv;
        plane.iter_mut().for_each(|v| *v += ga);
        // The first maximal pixel takes the max-pool gradient.
        let src = &x.data()[i * hw..(i + 1) * hw];
        let m = tape.max.data()[i];
        if let Some(j) = src.iter().position(|&v| v == m) {
            plane[j] += d_max.data()[i];
        }
    }
    Ok(d_x)
}

pub fn spatial_attention<S: Real>(x: &Tensor4<S>, p: &ConvParams<S>) -> Result<Tensor4<S>> {
    spatial_attention_tape(x, p).map(|(y, _)| y)
}

pub fn spatial_attention_tape<S: Real>(x: &Tensor4<S>, p: &ConvParams<S>) -> Result<(Tensor4<S>, SpatialTape<S>)> {
    let mean = reduce_channels(x, Reduce::Mean)?;
    let max = reduce_channels(x, Reduce::Max)?;
    let pooled = concat_channels(&[&mean, &max])?;
    let weights = conv2d(&pooled, p, p.kernel() / 2)?.map(sigmoid);
    let y = scale_pixels(x, &weights);
    Ok((
        y,
        SpatialTape {
            input: x.clone(),
            pooled,
            weights,
        },
    ))
}

pub fn spatial_attention_backward<S: Real>(
    p: &ConvParams<S>,
    tape: &SpatialTape<S>,
    d_out: &Tensor4<S>,
    d_params: &mut ConvParams<S>,
) -> Result<Tensor4<S>> {
    let x = &tape.input;
    let s = x.shape();
    if d_out.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "spatial_attention_backward",
            expected: s,
            found: d_out.shape(),
        });
    }
    let hw = s.plane();
    let mut d_x = scale_pixels(d_out, &tape.weights);
    let mut d_pre = Tensor4::zeros(tape.weights.shape());
    for b in 0..s.n {
        let (xs, ds) = (x.sample(b), d_out.sample(b));
        let wts = tape.weights.sample(b);
        let dp = d_pre.sample_mut(b);
        for c in 0..s.c {
            for i in 0..hw {
                dp[i] += xs[c * hw + i] * ds[c * hw + i];
            }
        }
        dp.iter_mut().zip(wts).for_each(|(d, &w)| *d *= w * (S::one() - w));
    }
    let d_pooled =
        conv2d_backward_acc(&tape.pooled, p, p.kernel() / 2, &d_pre, d_params, true)?.expect("input grad");
    let inv = S::one() / S::from_f64(s.c as f64);
    for b in 0..s.n {
        let xs = x.sample(b);
        let dpool = d_pooled.sample(b);
        let maxes = &tape.pooled.sample(b)[hw..];
        let dx = d_x.sample_mut(b);
        for i in 0..hw {
            let ga = dpool[i] * inv;
            for c in 0..s.c {
                dx[c * hw + i] += ga;
            }
            if let Some(c) = (0..s.c).find(|&c| xs[c * hw + i] == maxes[i]) {
                dx[c * hw + i] += dpool[hw + i];
            }
        }
    }
    Ok(d_x)
}

#[derive(Debug, Clone)]
pub struct CbamTape<S> {
    pub channel: Option<ChannelTape<S>>,
    pub spatial: Option<SpatialTape<S>>,
}

/// Channel gate then spatial gate, each only if present in `p`.
pub fn cbam<S: Real>(x: &Tensor4<S>, p: &AttentionParams<S>, mode: AttentionMode) -> Result<Tensor4<S>> {
    cbam_tape(x, p, mode).map(|(y, _)| y)
}

pub fn cbam_tape<S: Real>(
    x: &Tensor4<S>,
    p: &AttentionParams<S>,
    mode: AttentionMode,
) -> Result<(Tensor4<S>, CbamTape<S>)> {
    let mut y = x.clone();
    let mut tape = CbamTape {
        channel: None,
        spatial: None,
    };
    if mode.has_channel() {
        let gate = p.channel.as_ref().ok_or_else(|| missing("channel"))?;
        let (out, t) = channel_attention_tape(&y, gate)?;
        y = out;
        tape.channel = Some(t);
    }
    if mode.has_spatial() {
        let conv = p.spatial.as_ref().ok_or_else(|| missing("spatial"))?;
        let (out, t) = spatial_attention_tape(&y, conv)?;
        y = out;
        tape.spatial = Some(t);
    }
    Ok((y, tape))
}

fn missing(which: &str) -> Error {
    Error::InvalidConfig(alloc::format!("attention mode needs {which} parameters"))
}

pub fn cbam_backward<S: Real>(
    p: &AttentionParams<S>,
    tape: &CbamTape<S>,
    d_out: &Tensor4<S>,
    d_params: &mut AttentionParams<S>,
) -> Result<Tensor4<S>> {
    let mut d = d_out.clone();
    if let Some(t) = &tape.spatial {
        let (conv, dconv) = p
            .spatial
            .as_ref()
            .zip(d_params.spatial.as_mut())
            .ok_or_else(|| missing("spatial"))?;
        d = spatial_attention_backward(conv, t, &d, dconv)?;
    }
    if let Some(t) = &tape.channel {
        let (gate, dgate) = p
            .channel
            .as_ref()
            .zip(d_params.channel.as_mut())
            .ok_or_else(|| missing("channel"))?;
        d = channel_attention_backward(gate, t, &d, dgate)?;
    }
    Ok(d)
}

/// Gate values of every block that ran, for range assertions.
pub fn gate_values<S: Real>(tape: &CbamTape<S>) -> Vec<S> {
    let mut v = Vec::new();
    if let Some(t) = &tape.channel {
        v.extend_from_slice(t.weights.data());
    }
    if let Some(t) = &tape.spatial {
        v.extend_from_slice(t.weights.data());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_halve_input() {
        let x = random(Shape::new(2, 8, 5, 6), 1);
        let gate = ChannelGate::zeros(8, 2).unwrap();
        assert!(channel_attention(&x, &gate).unwrap().max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
        let conv = ConvParams::zeros(1, 2, 7);
        assert!(spatial_attention(&x, &conv).unwrap().max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
        let both = AttentionParams::zeros(AttentionMode::Both, 8, 2, 7).unwrap();
        let y = cbam(&x, &both, AttentionMode::Both).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.25)).unwrap() < 1e-15);
        assert_eq!(cbam(&x, &both, AttentionMode::None).unwrap(), x);
    }

    #[test]
    fn identical_channels_get_equal_weights() {
        let plane = random(Shape::new(1, 1, 4, 4), 2);
        let x = concat_channels(&[&plane, &plane, &plane, &plane]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        // Symmetric MLP: every output channel sees the same weights.
        let mut gate = ChannelGate::<f64>::new(4, 2, &mut r).unwrap();
        for o in 0..4 {
            for i in 0..2 {
                let v = gate.fc2.weight.at(0, i, 0, 0);
                gate.fc2.weight.set(o, i, 0, 0, v);
            }
        }
        let (_, tape) = channel_attention_tape(&x, &gate).unwrap();
        let w = tape.weights().data();
        assert!(w.iter().all(|&v| v == w[0]));
    }

    #[test]
    fn constant_input_gives_constant_interior_map() {
        let x = Tensor4::full(Shape::new(1, 3, 12, 12), 0.7f64);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let conv = ConvParams::<f64>::fan_in(1, 2, 7, &mut r);
        let (_, tape) = spatial_attention_tape(&x, &conv).unwrap();
        let m = tape.weights();
        let c = m.at(0, 0, 5, 5);
        for y in 3..9 {
            for x_ in 3..9 {
                assert!((m.at(0, 0, y, x_) - c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ratio_must_divide_channels() {
        assert!(matches!(
            ChannelGate::<f32>::zeros(10, 4),
            Err(Error::RatioMismatch { channels: 10, ratio: 4 })
        ));
        assert!(ChannelGate::<f32>::zeros(64, 16).is_ok());
    }

    #[test]
    fn both_equals_manual_composition() {
        let x = random(Shape::new(2, 8, 6, 7), 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::<f64>::new(AttentionMode::Both, 8, 4, 7, &mut r).unwrap();
        let manual = spatial_attention(&channel_attention(&x, p.channel.as_ref().unwrap()).unwrap(), p.spatial.as_ref().unwrap()).unwrap();
        assert_eq!(cbam(&x, &p, AttentionMode::Both).unwrap(), manual);
        let (y, tape) = cbam_tape(&x, &p, AttentionMode::Both).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(gate_values(&tape).iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn channel_gate_commutes_with_permutation() {
        let x = random(Shape::new(1, 4, 5, 5), 7);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let gate = ChannelGate::<f64>::new(4, 2, &mut r).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor4::from_fn(x.shape(), |b, c, y, xx| x.at(b, perm[c], y, xx));
        let mut gp = gate.clone();
        for h in 0..2 {
            for c in 0..4 {
                gp.fc1.weight.set(h, c, 0, 0, gate.fc1.weight.at(h, perm[c], 0, 0));
                gp.fc2.weight.set(c, h, 0, 0, gate.fc2.weight.at(perm[c], h, 0, 0));
            }
        }
        for c in 0..4 {
            gp.fc2.bias[c] = gate.fc2.bias[perm[c]];
        }
        let y = channel_attention(&x, &gate).unwrap();
        let yp = channel_attention(&xp, &gp).unwrap();
        let expect = Tensor4::from_fn(y.shape(), |b, c, yy, xx| y.at(b, perm[c], yy, xx));
        assert!(yp.max_abs_diff(&expect).unwrap() < 1e-14);
    }
}
