use dfpn_core::attention::{channel_attention, spatial_attention, ChannelGate};
use dfpn_core::layers::{bilinear_sample, conv2d, deform_conv2d, rdb_forward, relu, ConvParams, RdbParams};
use dfpn_core::{Shape, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

fn random_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
    ConvParams {
        weight: uniform(Shape::new(c_out, c_in, k, k), -1.0, 1.0, rng),
        bias: (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn pixel(x: &Tensor4<f64>, b: usize, c: usize, y: i64, xx: i64) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s.h as i64 || xx >= s.w as i64 {
        0.0
    } else {
        x.at(b, c, y as usize, xx as usize)
    }
}

fn bilinear_oracle(x: &Tensor4<f64>, b: usize, c: usize, y: f64, xx: f64) -> f64 {
    let (y0, x0) = (y.floor(), xx.floor());
    let (ly, lx) = (y - y0, xx - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    (1.0 - ly) * (1.0 - lx) * pixel(x, b, c, y0, x0)
        + (1.0 - ly) * lx * pixel(x, b, c, y0, x0 + 1)
        + ly * (1.0 - lx) * pixel(x, b, c, y0 + 1, x0)
        + ly * lx * pixel(x, b, c, y0 + 1, x0 + 1)
}

fn conv_oracle(x: &Tensor4<f64>, p: &ConvParams<f64>, pad: usize) -> Tensor4<f64> {
    let s = x.shape();
    let k = p.kernel();
    let (oh, ow) = (s.h + 2 * pad + 1 - k, s.w + 2 * pad + 1 - k);
    Tensor4::from_fn(Shape::new(s.n, p.c_out(), oh, ow), |b, co, y, xx| {
        let mut acc = p.bias[co];
        for ci in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let sy = (y + ky) as i64 - pad as i64;
                    let sx = (xx + kx) as i64 - pad as i64;
                    acc += p.weight.at(co, ci, ky, kx) * pixel(x, b, ci, sy, sx);
                }
            }
        }
        acc
    })
}

fn deform_oracle(x: &Tensor4<f64>, off: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, p.c_out(), s.h, s.w), |b, co, y, xx| {
        let mut acc = p.bias[co];
        for ky in 0..3 {
            for kx in 0..3 {
                let j = ky * 3 + kx;
                let sy = y as f64 + ky as f64 - 1.0 + off.at(b, 2 * j, y, xx);
                let sx = xx as f64 + kx as f64 - 1.0 + off.at(b, 2 * j + 1, y, xx);
                for ci in 0..s.c {
                    acc += p.weight.at(co, ci, ky, kx) * bilinear_oracle(x, b, ci, sy, sx);
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, pad) in [(1, 0), (3, 1), (3, 0), (7, 3), (5, 1)] {
        let x = uniform(Shape::new(2, 3, 9, 8), -1.0, 1.0, &mut rng);
        let p = random_conv(4, 3, k, &mut rng);
        let got = conv2d(&x, &p, pad).unwrap();
        let want = conv_oracle(&x, &p, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "k {k} pad {pad}");
    }
}

#[test]
fn deform_matches_direct_loops_with_fractional_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let s = Shape::new(2, rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9));
        let x = uniform(s, -1.0, 1.0, &mut rng);
        let off = uniform(Shape::new(s.n, 18, s.h, s.w), -3.0, 3.0, &mut rng);
        let p = random_conv(3, s.c, 3, &mut rng);
        let got = deform_conv2d(&x, &off, &p).unwrap();
        assert!(got.max_abs_diff(&deform_oracle(&x, &off, &p)).unwrap() < 1e-12);
    }
}

#[test]
fn deform_far_outside_reads_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
    let p = random_conv(2, 2, 3, &mut rng);
    for far in [50.0, -50.0, 1e30, -1e30] {
        let off = Tensor4::full(Shape::new(1, 18, 5, 5), far);
        let y = deform_conv2d(&x, &off, &p).unwrap();
        for co in 0..2 {
            assert!(y.plane(0, co).iter().all(|&v| v == p.bias[co]));
        }
    }
}

#[test]
fn bilinear_matches_oracle_and_hits_grid_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(Shape::new(1, 1, 6, 7), -1.0, 1.0, &mut rng);
    for _ in 0..500 {
        let (y, xx) = (rng.random_range(-2.0..8.0), rng.random_range(-2.0..9.0));
        let got = bilinear_sample(x.plane(0, 0), 6, 7, y, xx);
        assert!((got - bilinear_oracle(&x, 0, 0, y, xx)).abs() < 1e-14);
    }
    for y in 0..6 {
        for xx in 0..7 {
            assert_eq!(bilinear_sample(x.plane(0, 0), 6, 7, y as f64, xx as f64), x.at(0, 0, y, xx));
        }
    }
}

#[test]
fn rdb_matches_composition_of_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, g, d) = (4, 3, 3);
    let p = RdbParams::<f64>::new(c, g, d, &mut rng);
    let x = uniform(Shape::new(2, c, 6, 5), -1.0, 1.0, &mut rng);
    let mut stack = x.clone();
    for layer in &p.dense {
        let y = relu(&conv_oracle(&stack, layer, 1));
        stack = dfpn_core::tensor::concat_channels(&[&stack, &y]).unwrap();
    }
    let fused = conv_oracle(&stack, &p.fusion, 0);
    let want = dfpn_core::tensor::add(&fused, &x).unwrap();
    assert!(rdb_forward(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn channel_attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, r) = (8, 4);
    let gate = ChannelGate::<f64>::new(c, r, &mut rng).unwrap();
    let x = uniform(Shape::new(2, c, 5, 4), -1.0, 1.0, &mut rng);
    let got = channel_attention(&x, &gate).unwrap();
    let mlp = |d: &[f64]| -> Vec<f64> {
        let hidden: Vec<f64> = (0..c / r)
            .map(|h| (gate.fc1.bias[h] + (0..c).map(|i| gate.fc1.weight.at(h, i, 0, 0) * d[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..c)
            .map(|o| gate.fc2.bias[o] + (0..c / r).map(|h| gate.fc2.weight.at(o, h, 0, 0) * hidden[h]).sum::<f64>())
            .collect()
    };
    for b in 0..2 {
        let avg: Vec<f64> = (0..c).map(|ch| x.plane(b, ch).iter().sum::<f64>() / 20.0).collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| x.plane(b, ch).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (a, m) = (mlp(&avg), mlp(&max));
        for ch in 0..c {
            let w = sigmoid(a[ch] + m[ch]);
            for (g, v) in got.plane(b, ch).iter().zip(x.plane(b, ch)) {
                assert!((g - w * v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn spatial_attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_conv(1, 2, 7, &mut rng);
    let x = uniform(Shape::new(1, 5, 6, 9), -1.0, 1.0, &mut rng);
    let pooled = Tensor4::from_fn(Shape::new(1, 2, 6, 9), |b, c, y, xx| {
        let vals = (0..5).map(|ch| x.at(b, ch, y, xx));
        if c == 0 {
            vals.sum::<f64>() / 5.0
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let logits = conv_oracle(&pooled, &p, 3);
    let got = spatial_attention(&x, &p).unwrap();
    for ch in 0..5 {
        for y in 0..6 {
            for xx in 0..9 {
                let want = sigmoid(logits.at(0, 0, y, xx)) * x.at(0, ch, y, xx);
                assert!((got.at(0, ch, y, xx) - want).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_offsets_reduce_to_plain_conv(seed in any::<u64>(), c in 1usize..4, h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let p = random_conv(2, c, 3, &mut rng);
        let zero = Tensor4::zeros(Shape::new(1, 18, h, w));
        let a = deform_conv2d(&x, &zero, &p).unwrap();
        let b = conv2d(&x, &p, 1).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn per_pixel_integer_offsets_gather(seed in any::<u64>(), h in 2usize..8, w in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(Shape::new(1, 2, h, w), -1.0, 1.0, &mut rng);
        let data = (0..18 * h * w).map(|_| rng.random_range(-3i32..=3) as f64).collect();
        let off = Tensor4::from_vec(Shape::new(1, 18, h, w), data).unwrap();
        let p = random_conv(2, 2, 3, &mut rng);
        let got = deform_conv2d(&x, &off, &p).unwrap();
        let want = Tensor4::from_fn(got.shape(), |_, co, y, xx| {
            let mut acc = p.bias[co];
            for j in 0..9 {
                let sy = y as i64 + (j / 3) as i64 - 1 + off.at(0, 2 * j, y, xx) as i64;
                let sx = xx as i64 + (j % 3) as i64 - 1 + off.at(0, 2 * j + 1, y, xx) as i64;
                for ci in 0..2 {
                    acc += p.weight.at(co, ci, j / 3, j % 3) * pixel(&x, 0, ci, sy, sx);
                }
            }
            acc
        });
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn deform_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 2, 5, 6);
        let (x1, x2) = (uniform(s, -1.0, 1.0, &mut rng), uniform(s, -1.0, 1.0, &mut rng));
        let off = uniform(Shape::new(1, 18, 5, 6), -2.0, 2.0, &mut rng);
        let mut p = random_conv(3, 2, 3, &mut rng);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let mix = Tensor4::from_fn(s, |b, c, y, xx| x1.at(b, c, y, xx) + a * x2.at(b, c, y, xx));
        let lhs = deform_conv2d(&mix, &off, &p).unwrap();
        let (y1, y2) = (deform_conv2d(&x1, &off, &p).unwrap(), deform_conv2d(&x2, &off, &p).unwrap());
        let rhs = Tensor4::from_fn(lhs.shape(), |b, c, y, xx| y1.at(b, c, y, xx) + a * y2.at(b, c, y, xx));
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
