//! Dilated convolution and dense layers against direct-sum oracles in f64.

use dilnet::{ConvSpec, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod oracles;

use oracles::{conv_via_graph, direct_conv, legal_case};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dilated_conv_matches_direct_sum(seed in any::<u64>()) {
        let (x, w, b, spec) = legal_case(seed);
        let got = conv_via_graph(&x, &w, &b, &spec);
        let want = direct_conv(&x, &w, &b, &spec);
        prop_assert_eq!(got.numel(), want.len());
        for (i, (&g, &e)) in got.data().iter().zip(&want).enumerate() {
            prop_assert!((g as f64 - e).abs() <= 1e-5, "{:?} element {}: {} vs {}", spec, i, g, e);
        }
    }
}

#[test]
fn output_extent_follows_the_size_formula() {
    for seed in 0..200 {
        let (x, w, b, spec) = legal_case(seed);
        let y = conv_via_graph(&x, &w, &b, &spec);
        let s = x.shape();
        let ext = spec.dilation * (spec.kernel - 1) + 1;
        let expect = |n: usize| (n + 2 * spec.padding - ext) / spec.stride + 1;
        assert_eq!(y.shape(), &[s[0], expect(s[1]), expect(s[2]), spec.out_channels]);
    }
}

#[test]
fn dilation_spreads_taps_without_touching_neighbours() {
    // a single 1 at the centre of a 7x7 map seen through a 3x3 kernel of ones
    // dilated by 2: exactly the outputs at offsets {-2,0,2}² from centre light up
    let mut x = Tensor::zeros(&[1, 7, 7, 1]);
    x.data_mut()[3 * 7 + 3] = 1.0;
    let spec = ConvSpec::same(3, 2, 1, 1);
    let y = conv_via_graph(&x, &Tensor::ones(&[3, 3, 1, 1]), &Tensor::zeros(&[1]), &spec);
    for i in 0..7 {
        for j in 0..7 {
            let hit = [1, 3, 5].contains(&i) && [1, 3, 5].contains(&j);
            assert_eq!(y.data()[i * 7 + j], if hit { 1.0 } else { 0.0 }, "({i},{j})");
        }
    }
}

#[test]
fn conv_rejects_kernels_wider_than_the_padded_input() {
    let spec = ConvSpec { kernel: 3, stride: 1, dilation: 4, padding: 0, in_channels: 1, out_channels: 1 };
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 8, 8, 1]));
    let w = g.input(Tensor::zeros(&[3, 3, 1, 1]));
    let b = g.input(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, w, b, &spec).is_err());
}

#[test]
fn dense_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, i, o) = (rng.gen_range(1..=9), rng.gen_range(1..=40), rng.gen_range(1..=17));
        let x = Tensor::uniform(&[n, i], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[i, o], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[o], -2.0, 2.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.dense(xv, wv, bv).unwrap();
        for r in 0..n {
            for c in 0..o {
                let mut acc = b.data()[c] as f64;
                for k in 0..i {
                    acc += x.data()[r * i + k] as f64 * w.data()[k * o + c] as f64;
                }
                let got = g.value(y).data()[r * o + c] as f64;
                assert!((got - acc).abs() <= 1e-4 * (1.0 + acc.abs()), "{got} vs {acc}");
            }
        }
    }
}
