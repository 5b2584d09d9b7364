//! Inflated kernels on temporally constant input reproduce the 2D network.

use effnet3d::layers::{BatchNorm3d, Conv3d, Layer, Mode, Slot};
use effnet3d::model::inflate_kernel;
use effnet3d::{ConvGeometry, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive 2D "same" convolution of one `[C, H, W]` image.
fn conv2d(x: &[f64], c: usize, h: usize, w: usize, wt: &Tensor<f64>, stride: usize) -> (Vec<f64>, usize, usize) {
    let [cout, cin, k, _] = *wt.dims() else { panic!("rank") };
    assert_eq!(cin, c);
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for a in 0..k {
                        for b in 0..k {
                            let (yy, xx) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + yy as usize) * w + xx as usize]
                                * wt.get(&[o, ci, a, b]).unwrap();
                        }
                    }
                }
                y[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    (y, oh, ow)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inflated_conv_bn_matches_2d_per_frame(
        seed in any::<u64>(),
        k in prop::sample::select(vec![1usize, 3, 5]),
        kt in 1usize..=3,
        stride in 1usize..=2,
        extra_t in 0usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout, h, w) = (2, 3, 7, 6);
        let t = kt + extra_t;
        let w2d = Tensor::from_fn(vec![cout, cin, k, k], |_| rng.random_range(-1.0..1.0)).unwrap();
        let image: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Temporal padding 0 so no output frame sees a zero-padded boundary.
        let geom = ConvGeometry::new([kt, k, k], [1, stride, stride], [0, k / 2, k / 2]).unwrap();
        let mut conv = Conv3d::<f64>::new(cin, cout, geom, 1, false).unwrap();
        conv.weight.value = inflate_kernel(&w2d, kt).unwrap();
        let mut bn = BatchNorm3d::<f64>::new(cout, 0.997, 1e-3).unwrap();
        let mut stats = Vec::new();
        bn.visit("", &mut |name, slot| {
            let (lo, hi) = if name.ends_with("var") { (0.5, 2.0) } else { (-0.5, 0.5) };
            let t = match slot { Slot::Param(p) => &mut p.value, Slot::Buffer(b) => b };
            for v in t.data_mut() { *v = rng.random_range(lo..hi); }
            stats.push(t.data().to_vec());
        });
        let (gamma, beta, mean, var) = (&stats[0], &stats[1], &stats[2], &stats[3]);

        let clip = Tensor::from_fn(vec![1, cin, t, h, w], |i| {
            let (ci, rest) = (i / (t * h * w), i % (h * w));
            image[ci * h * w + rest]
        }).unwrap();
        let y3 = bn.forward(&conv.forward(&clip, Mode::Eval).unwrap(), Mode::Eval).unwrap();

        let (mut y2, oh, ow) = conv2d(&image, cin, h, w, &w2d, stride);
        for o in 0..cout {
            let s = gamma[o] / (var[o] + 1e-3).sqrt();
            for v in &mut y2[o * oh * ow..(o + 1) * oh * ow] {
                *v = s * (*v - mean[o]) + beta[o];
            }
        }
        let ot = t - kt + 1;
        prop_assert_eq!(y3.dims(), &[1, cout, ot, oh, ow][..]);
        for o in 0..cout {
            for f in 0..ot {
                for p in 0..oh * ow {
                    let a = y3.data()[(o * ot + f) * oh * ow + p];
                    let b = y2[o * oh * ow + p];
                    prop_assert!((a - b).abs() <= 1e-4, "channel {} frame {}: {} vs {}", o, f, a, b);
                }
            }
        }
    }
}
