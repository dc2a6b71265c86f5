mod support;

use accent_ge2e::evaluation::evaluate_argmax;
use accent_ge2e::features::{generate_synthetic, FeatureMatrix, SyntheticConfig, UtteranceRecord};
use accent_ge2e::losses::{CentroidMode, Ge2eLayout};
use accent_ge2e::network::{Model, ModelConfig};
use accent_ge2e::training::{
    adam_step, ce_gradients, clip_gradients, episode_gradients, episodic_sample, train_ce, train_ge2e, AdamConfig,
    AdamState, ClassIndex, Criterion, EpochPlan, TrainConfig, TrainError,
};
use support::{rng, ScalarAdam};

fn small_data(seed: u64) -> Vec<UtteranceRecord> {
    generate_synthetic(&SyntheticConfig {
        classes: 3,
        speakers_per_class: 3,
        utts_per_speaker: 4,
        frames: 12,
        dims: 5,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_model(seed: u64) -> Model {
    let mut config = ModelConfig::compact(5, 3, 9);
    config.frame_layers.iter_mut().for_each(|l| l.width = 8);
    config.segment_widths = vec![8];
    config.embedding_dim = 6;
    config.speaker_head_widths = vec![8];
    Model::new(config, seed).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, epochs: 3, utterances_per_class: 4, batch_size_ce: 8, seed: 5, ..TrainConfig::default() }
}

#[test]
fn nominal_epoch_length() {
    assert_eq!(EpochPlan::nominal(&[25, 7, 40], 10).steps_per_epoch, 4);
    assert_eq!(EpochPlan::nominal(&[20, 20], 10).steps_per_epoch, 2);
    assert_eq!(EpochPlan::nominal(&[3], 10).steps_per_epoch, 1);
    assert_eq!(EpochPlan::minibatches(33, 16).steps_per_epoch, 3);
}

#[test]
fn episodes_are_class_major_and_top_up_small_classes() {
    let data = small_data(0);
    let mut records: Vec<UtteranceRecord> = data.iter().filter(|r| r.accent != 1).cloned().collect();
    records.extend(data.iter().filter(|r| r.accent == 1).take(3).cloned());
    let index = ClassIndex::new(&records, 3).unwrap();
    assert_eq!(index.counts(), vec![12, 3, 12]);
    let mut r = rng(1);
    for _ in 0..50 {
        let episode = episodic_sample(&index, 5, &mut r);
        assert_eq!(episode.len(), 15);
        for (k, &i) in episode.iter().enumerate() {
            assert_eq!(records[i].accent, k / 5);
        }
        let mut big: Vec<usize> = episode[..5].to_vec();
        big.sort();
        big.dedup();
        assert_eq!(big.len(), 5);
        let small: std::collections::BTreeSet<usize> = episode[5..10].iter().copied().collect();
        assert_eq!(small.len(), 3);
    }
}

#[test]
fn empty_class_is_reported_one_based() {
    let records: Vec<UtteranceRecord> = small_data(0).into_iter().filter(|r| r.accent != 1).collect();
    assert!(matches!(ClassIndex::new(&records, 3), Err(TrainError::EmptyClass(2))));
    let mut model = small_model(0);
    assert!(matches!(train_ge2e(&records, &mut model, &quick_config(), false), Err(TrainError::EmptyClass(2))));
}

#[test]
fn adam_matches_scalar_oracle_on_a_quadratic() {
    let xs = [3.0, -0.5, 1e-3];
    let mut params = xs.to_vec();
    let mut state = AdamState::new([3]);
    let mut oracle: Vec<(f64, ScalarAdam)> = xs.iter().map(|&x| (x, ScalarAdam { m: 0.0, v: 0.0, t: 0 })).collect();
    for _ in 0..10 {
        let grads: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        adam_step(&mut [&mut params[..]], &[&grads[..]], &mut state, 0.1, &AdamConfig::default()).unwrap();
        for (x, o) in oracle.iter_mut() {
            *x = o.step(*x, 2.0 * *x, 0.1);
        }
    }
    for (p, (x, _)) in params.iter().zip(&oracle) {
        assert!((p - x).abs() <= 1e-12, "{p} vs {x}");
    }
    assert_eq!(state.step, 10);
    // The first step moves every coordinate by lr, whatever its gradient.
    let mut p = [5.0, -5.0];
    adam_step(&mut [&mut p[..]], &[&[100.0, -1e-3][..]], &mut AdamState::new([2]), 0.1, &AdamConfig::default()).unwrap();
    assert!((p[0] - 4.9).abs() < 1e-9 && (p[1] + 4.9).abs() < 1e-6);
}

#[test]
fn non_finite_gradients_leave_adam_untouched() {
    let mut p = vec![1.0, 2.0];
    let mut state = AdamState::new([2]);
    let before = state.clone();
    let err = adam_step(&mut [&mut p[..]], &[&[f64::NAN, 0.0][..]], &mut state, 0.1, &AdamConfig::default());
    assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
    assert_eq!(p, vec![1.0, 2.0]);
    assert_eq!(state, before);
}

#[test]
fn clipping_rescales_to_the_threshold() {
    let mut a = [3.0, 0.0];
    let mut b = [4.0];
    let report = clip_gradients(&mut [&mut a[..], &mut b[..]], 1.0);
    assert_eq!(report.norm, 5.0);
    assert!((report.post_clip_norm - 1.0).abs() < 1e-15);
    assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    let mut c = [0.3];
    let report = clip_gradients(&mut [&mut c[..]], 1.0);
    assert_eq!((report.norm, report.post_clip_norm, c[0]), (0.3, 0.3, 0.3));
}

#[test]
fn logged_post_clip_norms_respect_the_thresholds() {
    let data = small_data(2);
    let config = TrainConfig { learning_rate: 5e-2, clip_ce: 0.05, clip_ge2e: 0.1, ..quick_config() };
    let ce = train_ce(&data, &mut small_model(1), &config).unwrap();
    let ge2e = train_ge2e(&data, &mut small_model(1), &config, true).unwrap();
    for (history, clip) in [(&ce, config.clip_ce), (&ge2e, config.clip_ge2e)] {
        assert!(history.steps.iter().any(|s| s.grad_norm > clip));
        for s in &history.steps {
            assert!(s.post_clip_norm <= clip + 1e-9);
            assert!(s.post_clip_norm <= s.grad_norm + 1e-12);
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = small_data(3);
    let config = quick_config();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = small_model(4);
            let history = train_ge2e(&data, &mut model, &config, true).unwrap();
            (history, model)
        })
    };
    let (h1, m1) = run(1);
    let (h2, m2) = run(3);
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.steps.len(), config.epochs * h1.steps_per_epoch);

    let mut other = small_model(4);
    let h3 = train_ge2e(&data, &mut other, &TrainConfig { seed: 6, ..config }, true).unwrap();
    assert_ne!(h1.losses(), h3.losses());
}

#[test]
fn zero_lambda_adversarial_run_equals_plain_run() {
    let data = small_data(4);
    let config = TrainConfig { lambda_sc: 0.0, ..quick_config() };
    let mut plain = small_model(8);
    let mut adv = small_model(8);
    let hp = train_ge2e(&data, &mut plain, &config, false).unwrap();
    let ha = train_ge2e(&data, &mut adv, &config, true).unwrap();
    assert_eq!(hp, ha);
    assert_eq!(plain, adv);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = small_data(5);
    let config = TrainConfig { learning_rate: 0.0, ..quick_config() };
    let start = small_model(9);
    let mut model = start.clone();
    train_ge2e(&data, &mut model, &config, true).unwrap();
    assert_eq!(model, start);
    train_ce(&data, &mut model, &config).unwrap();
    assert_eq!(model, start);
}

#[test]
fn episode_embeddings_are_unit_norm() {
    let data = small_data(6);
    let model = small_model(10);
    let index = ClassIndex::new(&data, 3).unwrap();
    let episode = episodic_sample(&index, 4, &mut rng(2));
    let batch: Vec<&UtteranceRecord> = episode.iter().map(|&i| &data[i]).collect();
    let out = episode_gradients(&model, &batch, Ge2eLayout::new(3, 4).unwrap(), Criterion::ge2e(CentroidMode::LeaveOneOut)).unwrap();
    assert_eq!(out.embeddings.shape(), &[12, 6]);
    for i in 0..12 {
        let n: f64 = out.embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert!(out.ge2e_loss.unwrap() > 0.0 && out.sc_loss.is_none());
    assert!(episode_gradients(&model, &batch[..11], Ge2eLayout::new(3, 4).unwrap(), Criterion::ge2e(CentroidMode::LeaveOneOut)).is_err());
}

#[test]
fn non_finite_input_aborts_training_and_keeps_the_model() {
    let mut data = small_data(7);
    let mut values = data[0].features.data().to_vec();
    values[3] = f32::INFINITY;
    data[0].features = FeatureMatrix::new(12, 5, values).unwrap();
    let start = small_model(11);
    let mut model = start.clone();
    let config = TrainConfig { batch_size_ce: 100, ..quick_config() };
    assert!(train_ce(&data, &mut model, &config).is_err());
    assert_eq!(model, start);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data(0);
    let mut model = small_model(0);
    for bad in [
        TrainConfig { utterances_per_class: 1, ..quick_config() },
        TrainConfig { learning_rate: -1.0, ..quick_config() },
        TrainConfig { clip_ge2e: 0.0, ..quick_config() },
        TrainConfig { adam: AdamConfig { beta1: 1.0, ..AdamConfig::default() }, ..quick_config() },
    ] {
        assert!(matches!(train_ge2e(&data, &mut model, &bad, false), Err(TrainError::Config(_))));
    }
}

fn separable(seed: u64) -> Vec<UtteranceRecord> {
    generate_synthetic(&SyntheticConfig { accent_sep: 3.0, noise: 0.1, seed, ..SyntheticConfig::default() }).unwrap()
}

#[test]
fn ce_initial_loss_is_near_uniform() {
    let data = separable(0);
    let model = Model::new(ModelConfig::compact(16, 4, 24), 0).unwrap();
    let batch: Vec<&UtteranceRecord> = data.iter().step_by(7).collect();
    let (loss, _) = ce_gradients(&model, &batch).unwrap();
    assert!((loss - 4f64.ln()).abs() < 0.25, "{loss}");
}

#[test]
fn ce_training_fits_separable_data() {
    let data = separable(1);
    let mut model = Model::new(ModelConfig::compact(16, 4, 24), 1).unwrap();
    let config = TrainConfig { learning_rate: 1e-3, epochs: 10, ..TrainConfig::default() };
    let history = train_ce(&data, &mut model, &config).unwrap();
    let losses = history.losses();
    assert!(losses.last().unwrap() < &losses[0]);
    let eval = evaluate_argmax(&model, &data).unwrap();
    assert!(eval.accuracy >= 0.99, "{}", eval.accuracy);
}

/// Without accent or speaker structure a fresh embedder gives near-constant
/// similarity rows, so the GE2E loss starts at about ln C.
#[test]
fn ge2e_initial_loss_is_near_ln_c_on_structureless_data() {
    let data = generate_synthetic(&SyntheticConfig { accent_sep: 0.0, speaker_sep: 0.0, ..SyntheticConfig::default() }).unwrap();
    let index = ClassIndex::new(&data, 4).unwrap();
    let layout = Ge2eLayout::new(4, 10).unwrap();
    for seed in 0..3 {
        let model = Model::new(ModelConfig::compact(16, 4, 24), seed).unwrap();
        let episode = episodic_sample(&index, 10, &mut rng(seed));
        let batch: Vec<&UtteranceRecord> = episode.iter().map(|&i| &data[i]).collect();
        let out = episode_gradients(&model, &batch, layout, Criterion::ge2e(CentroidMode::LeaveOneOut)).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 0.05, "seed {seed}: {}", out.loss);
    }
}
