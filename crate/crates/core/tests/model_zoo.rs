use std::collections::HashMap;
use std::time::Instant;

use ggograde::model_zoo::{
    apply_freeze_policy, build_model, Arch, Ctx, FineTuneExtent, InitMode, Model, ModelError, ModelSpec, Part,
};
use ggograde_nn::{Adam, Optimizer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scratch(arch: Arch) -> Model {
    build_model(&ModelSpec::new(arch, InitMode::Scratch), 7).unwrap()
}

fn input(batch: usize, v: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * 3 * v * v).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Tensor::new(data, &[batch, 3, v, v])
}

#[test]
fn every_architecture_emits_four_logits() {
    for arch in Arch::ALL {
        let t = Instant::now();
        let model = scratch(arch);
        let v = model.spec.v;
        let logits = model.predict_logits(&input(1, v, 1)).unwrap();
        assert_eq!(logits.len(), 4, "{arch}");
        assert!(logits.iter().all(|l| l.is_finite()), "{arch}");
        eprintln!("{arch}: build+forward {:?}", t.elapsed());
    }
}

#[test]
fn resnet_batch_of_two() {
    let model = scratch(Arch::ResNet152);
    let x = input(2, 224, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&x, &mut Ctx { train: false, rng: &mut rng }).unwrap();
    assert_eq!(out.logits.shape(), &[2, 4]);
}

#[test]
fn inception_rejects_224_inputs() {
    let model = scratch(Arch::InceptionNet);
    assert_eq!(model.spec.v, 299);
    assert!(model.predict_logits(&input(1, 299, 3)).is_ok());
    let err = model.predict_logits(&input(1, 224, 3)).unwrap_err();
    assert!(matches!(err, ModelError::Shape { .. }));
}

#[test]
fn vit_patch_grid_is_seven_by_seven() {
    let model = scratch(Arch::Vtb32);
    let pos = model.store().get("encoder.pos_embedding").unwrap();
    assert_eq!(pos.tensor.shape(), &[1, 7 * 7 + 1, 768]);
    assert_eq!(model.predict_logits(&input(1, 224, 4)).unwrap().len(), 4);
}

#[test]
fn freeze_policy_counts() {
    let model = apply_freeze_policy(scratch(Arch::ResNet152), FineTuneExtent::LastLayerOnly);
    assert_eq!(model.trainable_count(), 2048 * 4 + 4);
    let model = apply_freeze_policy(model, FineTuneExtent::AllLayers);
    assert_eq!(model.trainable_count(), model.param_count());

    let heads = [
        (Arch::AlexNet, 4096 * 4 + 4),
        (Arch::Vgg, 4096 * 4 + 4),
        (Arch::DenseNet, 1024 * 4 + 4),
        (Arch::DenseNet201, 1920 * 4 + 4),
        (Arch::InceptionNet, 2048 * 4 + 4),
        (Arch::SqueezeNet, 512 * 4 + 4),
        (Arch::Vtb32, 768 * 4 + 4),
        (Arch::WideResNet101, 2048 * 4 + 4),
    ];
    for (arch, count) in heads {
        let model = apply_freeze_policy(scratch(arch), FineTuneExtent::LastLayerOnly);
        assert_eq!(model.trainable_count(), count, "{arch}");
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let model = scratch(Arch::SqueezeNet);
    let x = input(2, 224, 5);
    assert_eq!(model.predict_logits(&x).unwrap(), model.predict_logits(&x).unwrap());
}

#[test]
fn frozen_step_changes_only_the_head() {
    let spec = ModelSpec::new(Arch::DenseNet, InitMode::Scratch).with_v(64);
    let model = apply_freeze_policy(build_model(&spec, 3).unwrap(), FineTuneExtent::LastLayerOnly);
    let backbone = model.checksum(Part::Backbone);
    let head = model.checksum(Part::Head);
    let mut opt = Adam::new(model.trainable_params(), 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let out = model.forward(&input(2, 64, 6), &mut Ctx { train: true, rng: &mut rng }).unwrap();
    out.logits.cross_entropy(&[0, 3]).backward();
    opt.step();
    assert_eq!(model.checksum(Part::Backbone), backbone);
    assert_ne!(model.checksum(Part::Head), head);
}

#[test]
fn save_and_reload_reproduce_logits() {
    let spec = ModelSpec::new(Arch::ResNet152, InitMode::Scratch).with_v(64);
    let model = build_model(&spec, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    model.save(&path, HashMap::from([("k".to_string(), "v".to_string())])).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let reloaded = Model::from_checkpoint(&spec, &st, &path).unwrap();
    let x = input(1, 64, 8);
    assert_eq!(model.predict_logits(&x).unwrap(), reloaded.predict_logits(&x).unwrap());
    assert_eq!(model.checksum(Part::All), reloaded.checksum(Part::All));
}

#[test]
fn pretrained_weights_load_with_fresh_head() {
    let spec = ModelSpec::new(Arch::SqueezeNet, InitMode::Scratch).with_v(64);
    let donor = build_model(&spec, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    donor.save(&dir.path().join("squeezenet1_1.safetensors"), HashMap::new()).unwrap();
    std::env::set_var(ggograde::model_zoo::WEIGHTS_DIR_ENV, dir.path());
    let mut pre = spec.clone();
    pre.init = InitMode::Pretrained;
    let model = build_model(&pre, 99).unwrap();
    assert_eq!(model.checksum(Part::Backbone), donor.checksum(Part::Backbone));
    assert_ne!(model.checksum(Part::Head), donor.checksum(Part::Head));
}
