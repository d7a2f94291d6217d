//! Shape law of the DilationNet builder, checked both symbolically and on
//! real forward passes.

use dilnet::network::{receptive_field_of, Binder, BnContext, Layer};
use dilnet::{build_dilation_net, BnMode, Graph, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RESOLUTIONS: [(usize, usize); 4] = [(32, 2), (64, 3), (128, 4), (256, 5)];

#[test]
fn block_count_follows_the_halving_rule() {
    for (r, blocks) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        assert_eq!(net.block_count(), blocks, "r = {r}");
        // the stem halves once, every block halves once more, down to 4
        assert_eq!((r / 2) >> blocks, 4);
    }
}

#[test]
fn pre_pool_map_is_four_by_four() {
    for (r, _) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        assert_eq!(net.pre_pool_size().unwrap(), (4, 4), "r = {r}");
    }
}

#[test]
fn forward_pass_reaches_pool_at_four_by_four() {
    for (r, _) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        let (params, mut bn) = net.init_params(&mut ChaCha8Rng::seed_from_u64(r as u64));
        let mut g = Graph::new();
        let x = g.input(Tensor::uniform(&[2, r, r, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let mut ctx = BnContext::new(&mut bn, BnMode::Train);
        let pre = net.forward_layers(&mut g, x, 0..net.pool_index(), Binder::frozen(&params), &mut ctx).unwrap();
        assert_eq!(g.value(pre).shape(), &[2, 4, 4, net.feature_width()], "r = {r}");
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, r, r, 3]));
        let mut ctx = BnContext::new(&mut bn, BnMode::Infer);
        let p = net.forward(&mut g, x, Binder::frozen(&params), &mut ctx).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert!(g.value(p).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn feature_widths_by_variant() {
    let widths: Vec<usize> = Variant::ALL.iter().map(|v| build_dilation_net(v.resolution()).unwrap().feature_width()).collect();
    assert_eq!(widths, vec![96, 128, 160, 192]);
}

#[test]
fn wrong_input_resolution_is_rejected() {
    let net = build_dilation_net(64).unwrap();
    let (params, mut bn) = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 32, 32, 3]));
    let mut ctx = BnContext::new(&mut bn, BnMode::Infer);
    assert!(net.forward(&mut g, x, Binder::frozen(&params), &mut ctx).is_err());
}

#[test]
fn unsupported_resolutions_have_no_network() {
    for r in [0, 16, 48, 100, 512] {
        assert!(build_dilation_net(r).is_err(), "r = {r}");
    }
}

#[test]
fn block_dilations_fit_their_input() {
    for (r, _) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        let mut spatial = r / 2;
        for layer in &net.layers {
            if let Layer::Block(b) = layer {
                let extent = 2 * b.max_dilation + 1;
                assert!(extent <= spatial, "r = {r}, {}: extent {extent} on {spatial}", b.name);
                spatial /= 2;
            }
        }
    }
}

#[test]
fn receptive_field_covers_the_input_at_every_scale() {
    for (r, _) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        let rf = receptive_field_of(net.conv_units().iter().map(|u| &u.spec));
        assert!(rf >= r, "r = {r}: receptive field {rf}");
    }
}

#[test]
fn parameter_names_are_unique_and_shapes_nonempty() {
    for (r, _) in RESOLUTIONS {
        let net = build_dilation_net(r).unwrap();
        let shapes = net.param_shapes();
        let mut names: Vec<&String> = shapes.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        assert!(shapes.iter().all(|(_, s)| s.iter().product::<usize>() > 0));
    }
}
