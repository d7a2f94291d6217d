//! Optimizer oracle, checkpoint round trips and the training-loop contracts.

use dilnet::data::{self, synth_manifest, DatasetManifest, SampleLoader, Split};
use dilnet::fusion::{extract_backbone, fusion_forward, FusionModel, FusionSpec};
use dilnet::network::Binder;
use dilnet::train::checkpoint::Provenance;
use dilnet::train::{
    adam_step, bce_l2_loss, init_fusion, train_stage1, train_stage2, Checkpoint, DilationNetModel, OptimizerState,
    TrainConfig,
};
use dilnet::{build_dilation_net, Graph, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> TrainConfig {
    TrainConfig { learning_rate: 0.01, ..TrainConfig::default() }
}

/// One Adam step on a single tensor `w` whose gradient is `grad` everywhere.
fn step_with_gradient(params: &mut dilnet::ParamStore, state: &mut OptimizerState, grad: f32, cfg: &TrainConfig) {
    let mut g = Graph::new();
    let w = g.param("w", params.get("w").unwrap().clone());
    let s = g.sum(w);
    let loss = g.scale(s, grad);
    let grads = g.backward(loss).unwrap();
    adam_step(params, &grads, state, cfg).unwrap();
}

#[test]
fn adam_matches_scalar_reference() {
    let cfg = cfg();
    let grads = [0.3f64, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4];
    let mut params = dilnet::ParamStore::new();
    params.insert("w", Tensor::full(&[1], 0.5));
    let mut state = OptimizerState::new();
    let (b1, b2, lr, eps) = (cfg.beta1 as f64, cfg.beta2 as f64, cfg.learning_rate as f64, cfg.epsilon as f64);
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for (t, &gr) in grads.iter().enumerate() {
        step_with_gradient(&mut params, &mut state, gr as f32, &cfg);
        let gr = gr as f32 as f64;
        m = b1 * m + (1.0 - b1) * gr;
        v = b2 * v + (1.0 - b2) * gr * gr;
        let t = t as i32 + 1;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        let got = params.get("w").unwrap().data()[0] as f64;
        assert!((got - w).abs() < 1e-6, "step {t}: {got} vs {w}");
    }
}

#[test]
fn constant_gradient_moves_by_the_learning_rate_each_step() {
    // bias correction makes m̂ = g and v̂ = g² at every step
    let cfg = cfg();
    for g in [-3.0f32, 0.02, 7.5] {
        let mut params = dilnet::ParamStore::new();
        params.insert("w", Tensor::zeros(&[1]));
        let mut state = OptimizerState::new();
        for t in 1..=50 {
            step_with_gradient(&mut params, &mut state, g, &cfg);
            let want = -(t as f64) * cfg.learning_rate as f64 * g.signum() as f64;
            let got = params.get("w").unwrap().data()[0] as f64;
            assert!((got - want).abs() < 1e-4, "g {g} step {t}: {got} vs {want}");
        }
    }
}

#[test]
fn non_finite_gradient_leaves_everything_untouched() {
    let cfg = cfg();
    let mut params = dilnet::ParamStore::new();
    params.insert("w", Tensor::full(&[2], 1.0));
    let mut state = OptimizerState::new();
    step_with_gradient(&mut params, &mut state, 1.0, &cfg);
    let (p0, s0) = (params.clone(), state.clone());
    let mut g = Graph::new();
    let w = g.param("w", params.get("w").unwrap().clone());
    let s = g.sum(w);
    let loss = g.scale(s, f32::NAN);
    let grads = g.backward(loss).unwrap();
    assert!(adam_step(&mut params, &grads, &mut state, &cfg).is_err());
    assert_eq!(params, p0);
    assert_eq!(state, s0);
}

#[test]
fn doubling_lambda_doubles_only_the_l2_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let pred = g.input(Tensor::uniform(&[6, 1], 0.05, 0.95, &mut rng));
    let w1 = g.param("a.w", Tensor::uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng));
    let w2 = g.param("b.w", Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng));
    let y = Tensor::new(vec![6, 1], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let a = bce_l2_loss(&mut g, pred, &y, &[w1, w2], 1e-3).unwrap();
    let b = bce_l2_loss(&mut g, pred, &y, &[w1, w2], 2e-3).unwrap();
    assert_eq!(g.value(a.cross_entropy).item(), g.value(b.cross_entropy).item());
    let (la, lb) = (g.value(a.l2).item() as f64, g.value(b.l2).item() as f64);
    assert!((lb - 2.0 * la).abs() <= 1e-6 * lb, "{la} {lb}");
    let sum_sq: f64 = [w1, w2].iter().flat_map(|&w| g.value(w).data().to_vec()).map(|v| (v as f64).powi(2)).sum();
    assert!((la - 1e-3 / 12.0 * sum_sq).abs() <= 1e-6 * la);
}

fn fixed_batch(r: usize) -> Tensor {
    Tensor::uniform(&[4, r, r, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99))
}

fn perturbed_model(v: Variant) -> DilationNetModel {
    let mut model = DilationNetModel::init(build_dilation_net(v.resolution()).unwrap(), 5);
    // non-trivial running moments so the round trip is not vacuous
    for (i, name) in model.structure.bn_layers().into_iter().map(|(n, _)| n).enumerate() {
        let m = model.bn.get_mut(&name).unwrap();
        m.mean.iter_mut().for_each(|x| *x = 0.01 * i as f32);
        m.var.iter_mut().for_each(|x| *x = 1.0 + 0.1 * i as f32);
    }
    model
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for v in [Variant::A, Variant::B] {
        let model = perturbed_model(v);
        let path = dir.path().join(format!("{v}.ckpt"));
        model.to_checkpoint(Provenance::default()).save(&path).unwrap();
        let back = DilationNetModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, model);
        let x = fixed_batch(v.resolution());
        let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn fusion_checkpoint_round_trip_is_bit_identical() {
    let backbones = [Variant::A, Variant::B]
        .iter()
        .map(|&v| extract_backbone(&perturbed_model(v).to_checkpoint(Provenance::default())).unwrap())
        .collect();
    let model = init_fusion(&FusionSpec::new(&[Variant::A, Variant::B]).unwrap(), backbones, 1).unwrap();
    let bytes = model.to_checkpoint(Provenance::default()).to_bytes().unwrap();
    let back = FusionModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, model);
    let features = Tensor::uniform(&[3, 96 + 128], 0.0, 2.0, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(model.predict_features(&features).unwrap(), back.predict_features(&features).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = perturbed_model(Variant::A).to_checkpoint(Provenance::default()).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
    let text = String::from_utf8_lossy(&bytes[..200]).into_owned();
    assert!(text.starts_with("DILNET-CKPT"));
}

fn small_manifest(n: usize, seed: u64) -> DatasetManifest {
    data::split(&synth_manifest(n, seed), 0.8, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, seed: 3, augmentation: None, ..TrainConfig::default() }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let m = small_manifest(40, 1);
    let out = train_stage1(Variant::A, &m, &mut SampleLoader::cached(), &quick(0)).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.model, DilationNetModel::init(build_dilation_net(32).unwrap(), 3));
}

#[test]
fn stage1_is_deterministic_and_reduces_loss() {
    let m = small_manifest(80, 2);
    let cfg = TrainConfig { augmentation: Some(Default::default()), ..quick(5) };
    let a = train_stage1(Variant::A, &m, &mut SampleLoader::cached(), &cfg).unwrap();
    let b = train_stage1(Variant::A, &m, &mut SampleLoader::uncached(), &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.trace, b.trace);
    let losses: Vec<f64> = a.trace.epochs.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    let c = train_stage1(Variant::A, &m, &mut SampleLoader::cached(), &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn stage2_trains_only_the_head() {
    let m = small_manifest(60, 3);
    let mut loader = SampleLoader::cached();
    let mut backbones = Vec::new();
    for v in [Variant::A, Variant::B] {
        let out = train_stage1(v, &m, &mut loader, &quick(1)).unwrap();
        backbones.push(extract_backbone(&out.checkpoint).unwrap());
    }
    let spec = FusionSpec::new(&[Variant::A, Variant::B]).unwrap();
    let before = backbones.clone();
    let out = train_stage2(&spec, backbones, &m, &mut loader, &quick(3)).unwrap();
    assert_eq!(out.model.backbones, before, "frozen backbone changed");
    let fresh = init_fusion(&spec, before.clone(), 3).unwrap();
    assert_ne!(out.model.head_params, fresh.head_params);

    // one backward pass reaches every head tensor and nothing else
    let batch = dilnet::data::multi_res_batches(
        &mut loader,
        &m.partition(Split::Train)[..8],
        dilnet::data::BatchSpec { batch_size: 8, resolutions: vec![32, 64], augmentation: None, seed: 0, shuffle: false },
    )
    .unwrap()
    .next()
    .unwrap()
    .unwrap();
    let mut g = Graph::new();
    let head = out.model.head();
    let p = fusion_forward(&mut g, &batch.streams(), &out.model.backbones, &head, Binder::trainable(&out.model.head_params)).unwrap();
    let parts = bce_l2_loss(&mut g, p, &batch.labels, &[], 0.0).unwrap();
    let grads = g.backward(parts.total).unwrap();
    let mut got: Vec<&str> = grads.names().collect();
    got.sort();
    let mut want: Vec<String> = head.param_shapes().into_iter().map(|(n, _)| n).collect();
    want.sort();
    assert_eq!(got, want);
    assert!(grads.iter().all(|(_, t)| t.max_abs() > 0.0));
}

#[test]
fn stage2_rejects_mismatched_backbones() {
    let m = small_manifest(20, 4);
    let a = extract_backbone(&perturbed_model(Variant::A).to_checkpoint(Provenance::default())).unwrap();
    let spec = FusionSpec::new(&[Variant::A, Variant::B]).unwrap();
    assert!(train_stage2(&spec, vec![a.clone(), a], &m, &mut SampleLoader::cached(), &quick(1)).is_err());
    assert!(FusionSpec::new(&[Variant::A]).is_err());
    assert!(FusionSpec::new(&[Variant::A, Variant::A]).is_err());
}
