use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitlab::attacks::{
    input_update_step, model_update_step, train_clone_with_inferred_labels, AttackState, InversionConfig,
};
use splitlab::data::synth_dataset;
use splitlab::eval::{argmax_rows, spearman};
use splitlab::model::{Arch, LayerStack, SplitModel};
use splitlab::optim::{Optimizer, OptimizerConfig};
use splitlab::training::train_step;
use splitlab::Tensor;

fn tiny_head(depth: usize, seed: u64) -> LayerStack {
    let model = SplitModel::build(Arch::Tiny, seed);
    LayerStack::new(model.split_at(depth).unwrap().0.to_vec())
}

fn smashed_mse(clone: &LayerStack, x: &Tensor, target: &Tensor) -> f32 {
    splitlab::eval::mse_images(&clone.predict(x).unwrap(), target).unwrap()
}

#[test]
fn input_steps_descend_through_identity_like_conv() {
    let mut head = tiny_head(1, 1);
    let w = &mut head.layers[0].params[0].value;
    let shape = w.shape().to_vec();
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        // centre tap of the 3x3 kernel
        *v = if k % (shape[2] * shape[3]) == 4 { 1.0 } else { 0.0 };
    }
    head.layers[0].params[1].value = Tensor::zeros(&[shape[0]]);
    let cfg = InversionConfig {
        lambda: 0.0,
        ..InversionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = Tensor::uniform(&[4, shape[0], 8, 8], 0.0, 1.0, &mut rng);
    let mut state = AttackState::with_estimates(Tensor::uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng), head, &cfg);
    let mut prev = f32::INFINITY;
    for step in 0..100 {
        let obj = input_update_step(&mut state, &target, &cfg).unwrap();
        assert!(obj < prev, "step {step}: {obj} after {prev}");
        prev = obj;
    }
}

#[test]
fn model_steps_trend_downwards() {
    let truth = tiny_head(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::uniform(&[8, 1, 8, 8], 0.0, 1.0, &mut rng);
    let target = truth.predict(&x).unwrap();
    let cfg = InversionConfig::default();
    let mut state = AttackState::with_estimates(x, LayerStack::init_like(&truth.layers, 99), &cfg);
    let objs: Vec<f64> = (0..60)
        .map(|_| model_update_step(&mut state, &target, &cfg).unwrap() as f64)
        .collect();
    let steps: Vec<f64> = (0..objs.len()).map(|i| i as f64).collect();
    assert!(spearman(&steps, &objs) < 0.0);
    assert!(objs[50..].iter().sum::<f64>() < objs[..10].iter().sum::<f64>());
}

#[test]
fn clone_weights_are_recovered_from_known_inputs() {
    let truth = tiny_head(1, 3);
    let data = synth_dataset(32, [1, 8, 8], 7);
    let target = truth.predict(&data.images).unwrap();
    let cfg = InversionConfig {
        model_lr: 0.01,
        ..InversionConfig::default()
    };
    let clone = LayerStack::init_like(&truth.layers, 1234);
    let mut state = AttackState::with_estimates(data.images.clone(), clone, &cfg);
    let start = smashed_mse(&state.clone, &data.images, &target);
    let mut steps = 0;
    while smashed_mse(&state.clone, &data.images, &target) >= 1e-3 && steps < 2000 {
        model_update_step(&mut state, &target, &cfg).unwrap();
        steps += 1;
    }
    let end = smashed_mse(&state.clone, &data.images, &target);
    assert!(end < 1e-3, "smashed MSE {start} -> {end} after {steps} steps");
}

/// Accuracy of `tail` on frozen-head features.
fn accuracy(tail: &LayerStack, features: &Tensor, labels: &[u8]) -> f32 {
    let pred = argmax_rows(&tail.predict(features).unwrap());
    pred.iter().zip(labels).filter(|(p, &y)| **p == y as usize).count() as f32 / labels.len() as f32
}

#[test]
fn clone_tail_tracks_original_with_true_labels_and_not_with_shuffled_ones() {
    // a briefly trained front end, frozen, feeds both tails
    let all = synth_dataset(3000, [1, 8, 8], 9);
    let mut model = SplitModel::build(Arch::Tiny, 8);
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.001));
    let pretrain = all.subset(&(0..1500).collect::<Vec<_>>());
    splitlab::training::train_epochs(&mut model.net, &mut opt, &pretrain, 5, 16, 0).unwrap();
    let cut = model.tail_start(1).unwrap();
    let (head, tail) = model.split_at(cut).unwrap();
    let head = LayerStack::new(head.to_vec());
    let train = all.subset(&(1500..2500).collect::<Vec<_>>());
    let test = all.subset(&(2500..3000).collect::<Vec<_>>());
    let f_train = head.predict(&train.images).unwrap();
    let f_test = head.predict(&test.images).unwrap();
    let inputs: Vec<Tensor> = (0..train.len()).map(|i| f_train.select_batch(&[i])).collect();

    let mut original = LayerStack::init_like(tail, 76);
    let mut clone = LayerStack::init_like(tail, 77);
    let mut shuffled_clone = LayerStack::init_like(tail, 78);
    let mut shuffled = train.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);

    let lr = OptimizerConfig::adam(0.01);
    let (mut o_opt, mut c_opt, mut s_opt) = (Optimizer::new(lr), Optimizer::new(lr), Optimizer::new(lr));
    for epoch in 0..5 {
        for (x, &y) in inputs.iter().zip(&train.labels) {
            train_step(&mut original, &mut o_opt, x, &[y]).unwrap();
        }
        train_clone_with_inferred_labels(&mut clone, &inputs, &train.labels, &mut c_opt).unwrap();
        train_clone_with_inferred_labels(&mut shuffled_clone, &inputs, &shuffled, &mut s_opt).unwrap();
        let (a, b) = (accuracy(&original, &f_test, &test.labels), accuracy(&clone, &f_test, &test.labels));
        assert!((a - b).abs() < 0.03, "epoch {epoch}: original {a} vs clone {b}");
    }
    let control = accuracy(&shuffled_clone, &f_test, &test.labels);
    let learned = accuracy(&clone, &f_test, &test.labels);
    assert!(learned > 0.8, "true-label clone reached {learned}");
    assert!(control < 0.25, "shuffled-label clone reached {control}");
}
