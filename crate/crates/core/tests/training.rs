use mani::checkpoint::{load_checkpoint, save_checkpoint};
use mani::data::{generate_synthetic, sample_pair_batch, Domain, DomainDataset, ShiftParams, SynthConfig};
use mani::metrics::evaluate;
use mani::model::{ModelBundle, ModelConfig};
use mani::nn::Module;
use mani::optim::Adam;
use mani::pooling::PoolingStrategy;
use mani::trainer::{joint_gradients, train, StepContext, TrainConfig, ValSets};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        base_width: 4,
        disc_hidden_width: 16,
        disc_hidden_layers: 2,
    }
}

fn domains(n: usize) -> (DomainDataset, DomainDataset) {
    let base = SynthConfig {
        image_size: 16,
        nuclei_count_range: (1, 3),
        radius_range: (2.0, 4.0),
        shift: ShiftParams::identity(),
        seed: 3,
    };
    let target = SynthConfig {
        shift: ShiftParams::desk_target(),
        ..base.clone()
    };
    (
        generate_synthetic(&base, n, Domain::Source).unwrap(),
        generate_synthetic(&target, n, Domain::Target).unwrap(),
    )
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        warmup_iters: 4,
        joint_iters: 4,
        batch_size: 2,
        eval_every: 4,
        seed: 11,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let (source, target) = domains(6);
    let val = ValSets {
        source: None,
        target: Some(target.clone()),
    };
    let config = tiny_config();
    let mut outcome = train::<f32>(&config, &source, &target.without_labels(), &val, None).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("ckpt/model.safetensors");
    save_checkpoint(&outcome.last, &config, &path).unwrap();
    let (mut loaded, stored) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(serde_json::to_string(&stored).unwrap(), serde_json::to_string(&config).unwrap());
    let before = evaluate(&mut outcome.last, &target).unwrap();
    let after = evaluate(&mut loaded, &target).unwrap();
    assert_eq!(before, after);
}

#[test]
fn identical_seeds_train_identically() {
    let (source, target) = domains(6);
    let val = ValSets {
        source: Some(source.clone()),
        target: Some(target.clone()),
    };
    let config = TrainConfig {
        deterministic: true,
        ..tiny_config()
    };
    let unlabeled = target.without_labels();
    let a = train::<f32>(&config, &source, &unlabeled, &val, None).unwrap();
    let b = train::<f32>(&config, &source, &unlabeled, &val, None).unwrap();
    let losses = |o: &mani::trainer::TrainOutcome<f32>| {
        o.history.iters.iter().map(|r| (r.seg_loss, r.mi_estimate)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    let params = |m: &ModelBundle<f32>| {
        let mut v = Vec::new();
        m.visit("", &mut |_, _, t| v.extend(t.iter().copied()));
        v
    };
    assert_eq!(params(&a.last), params(&b.last));
}

#[test]
fn critic_training_alone_raises_the_estimate() {
    let (source, target) = domains(4);
    let mut bundle = ModelBundle::<f64>::new(&tiny_model(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = sample_pair_batch(&source, &target.without_labels(), 4, &mut rng).unwrap();
    let mut opt = Adam::<f64>::new(1e-2, 0.9, 0.999);
    let strategy = PoolingStrategy::default();
    let critic_only = |name: &str| name.starts_with("discriminator.");
    let mut estimates = Vec::new();
    for iter in 0..100 {
        let out = joint_gradients(&mut bundle, &batch, 1.0, &strategy, &mut rng, StepContext::at(iter)).unwrap();
        estimates.push(out.mi_estimate.expect("source masks are non-empty"));
        opt.step(&mut bundle, &critic_only);
    }
    let head: f64 = estimates[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = estimates[95..].iter().sum::<f64>() / 5.0;
    assert!(tail > head + 0.1, "estimate {head:.4} -> {tail:.4}");
    assert!(estimates.iter().all(|&v| v <= 0.0));
}
