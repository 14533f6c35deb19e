//! Property tests for the module invariants that hold over whole input
//! families rather than single examples.

use pcnet_core::attention::EcaModule;
use pcnet_core::data::{self, synthetic::generate_synthetic, AugmentPolicy};
use pcnet_core::model::cross_entropy;
use pcnet_core::ops;
use pcnet_core::tensor::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize, magnitude: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-magnitude..magnitude, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // Softmax stays a probability vector even for large-magnitude logits.
    #[test]
    fn softmax_is_a_probability_vector(data in finite_vec(7, 1e6)) {
        let z = Tensor::from_vec(&[7], data).unwrap();
        let q = ops::softmax(&z).unwrap();
        prop_assert!(q.all_finite());
        for &v in q.data() {
            prop_assert!(v >= 0.0 && v <= 1.0);
        }
        let sum: f64 = q.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum was {}", sum);
    }

    // Sigmoid output is strictly inside (0, 1); beyond |z| ~ 36 the f64
    // result saturates to exactly 0 or 1, so the property is meaningful on
    // the representable range.
    #[test]
    fn sigmoid_is_strictly_bounded(data in finite_vec(12, 30.0)) {
        let z = Tensor::from_vec(&[12], data).unwrap();
        let s = ops::sigmoid(&z);
        for &v in s.data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    // Channel attention contracts magnitude wherever the input is nonzero.
    #[test]
    fn eca_gates_lie_in_the_open_unit_interval(
        data in finite_vec(2 * 3 * 4 * 4, 5.0),
        kernel in finite_vec(5, 1.0),
    ) {
        let f = Tensor::from_vec(&[2, 3, 4, 4], data).unwrap();
        let eca = EcaModule::from_kernel(Tensor::from_vec(&[5], kernel).unwrap()).unwrap();
        let a = eca.weights(&f).unwrap();
        for &v in a.data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
        let out = eca.apply(&f).unwrap();
        for (&o, &x) in out.data().iter().zip(f.data()) {
            if x != 0.0 {
                prop_assert!(o.abs() < x.abs());
            }
        }
    }

    // Cross-entropy on a probability vector is finite and non-negative.
    #[test]
    fn cross_entropy_is_finite_and_nonnegative(data in finite_vec(5, 4.0), class in 0usize..5) {
        let q = ops::softmax(&Tensor::from_vec(&[5], data).unwrap()).unwrap();
        let loss = cross_entropy(&q, class).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(loss >= 0.0);
    }

    // conv2d agrees with an independent nested-loop reference.
    #[test]
    fn conv2d_matches_reference(
        input in finite_vec(2 * 2 * 6 * 5, 2.0),
        kernel in finite_vec(3 * 2 * 3 * 3, 2.0),
        stride in 1usize..=2,
        pad in 0usize..=1,
    ) {
        let input = Tensor::from_vec(&[2, 2, 6, 5], input).unwrap();
        let kernel = Tensor::from_vec(&[3, 2, 3, 3], kernel).unwrap();
        let fast = ops::conv2d(&input, &kernel, stride, pad).unwrap();
        let slow = conv2d_reference(&input, &kernel, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            let denom = (a.abs() + b.abs()).max(1e-12);
            prop_assert!((a - b).abs() / denom < 1e-12);
        }
    }

    // Stratified split is a partition for any feasible fraction.
    #[test]
    fn split_partitions_every_class(per_class in 4usize..20, fraction in 0.2f64..0.8, seed in 0u64..50) {
        let ds = generate_synthetic(4, per_class, (8, 8), seed).unwrap();
        let (train, test) = data::split(&ds, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), ds.len());
        for label in 0..4 {
            let want = (fraction * per_class as f64).round() as usize;
            prop_assert_eq!(train.items.iter().filter(|i| i.label == label).count(), want);
        }
        let mut sources: Vec<&String> = train.items.iter().chain(&test.items).map(|i| &i.source).collect();
        sources.sort();
        sources.dedup();
        prop_assert_eq!(sources.len(), ds.len());
    }

    // Augmentation is a pure function of (image, policy, rng state).
    #[test]
    fn augmentation_is_deterministic(seed in 0u64..1000, angle in 0.0f64..45.0) {
        use rand::SeedableRng;
        let ds = generate_synthetic(4, 1, (12, 12), seed).unwrap();
        let policy = AugmentPolicy {
            rotate_max_deg: angle,
            fixed_rotation: false,
            hflip: true,
            vflip: true,
            seed,
        };
        let a = data::augment(&ds.items[0].image, &policy, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = data::augment(&ds.items[0].image, &policy, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}

fn conv2d_reference(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let ho = ops::conv_out_len(h, kh, stride, pad);
    let wo = ops::conv_out_len(w, kw, stride, pad);
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    for bi in 0..b {
        for oi in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for r in 0..kh {
                            for s in 0..kw {
                                let iy = (oy * stride + r) as isize - pad as isize;
                                let ix = (ox * stride + s) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += input.data()
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * kernel.data()[((oi * c + ci) * kh + r) * kw + s];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * o + oi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}
