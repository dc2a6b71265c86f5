mod support;

use accent_ge2e::features::{FeatureMatrix, UtteranceRecord};
use accent_ge2e::losses::Ge2eLayout;
use accent_ge2e::network::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
use accent_ge2e::network::{
    cat_mean_std, context_splice, embed_node, grl, Activation, BoundTrunk, FrameLayer, Model, ModelConfig,
};
use accent_ge2e::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use accent_ge2e::training::{episode_gradients, Criterion, SpeakerBranch};
use accent_ge2e::losses::CentroidMode;
use rand::Rng;
use support::rng;

fn tanh_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        frame_layers: vec![
            FrameLayer { offsets: vec![-1, 0, 1], width: 5 },
            FrameLayer { offsets: vec![-2, 0, 2], width: 4 },
        ],
        segment_widths: vec![6],
        embedding_dim: 4,
        num_accents: 3,
        num_speakers: 5,
        speaker_head_widths: vec![3],
        activation: Activation::Tanh,
        var_epsilon: 1e-10,
    }
}

fn random_features(seed: u64, frames: usize, dims: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![frames, dims], (0..frames * dims).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn to_record(x: &Tensor, accent: usize, speaker: usize) -> UtteranceRecord {
    let data = x.data().iter().map(|&v| v as f32).collect();
    UtteranceRecord {
        id: format!("{accent}-{speaker}"),
        features: FeatureMatrix::new(x.rows(), x.cols(), data).unwrap(),
        accent,
        speaker,
    }
}

#[test]
fn splice_example() {
    let x = Tensor::from_rows(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]).unwrap();
    let y = context_splice(&x, &[-2, 0, 1]).unwrap();
    assert_eq!(y.shape(), &[3, 6]);
    assert_eq!(y.row(0), &[0.0, 0.0, 1.0, 10.0, 2.0, 20.0]);
    assert_eq!(y.row(1), &[0.0, 0.0, 2.0, 20.0, 3.0, 30.0]);
    assert_eq!(y.row(2), &[1.0, 10.0, 3.0, 30.0, 0.0, 0.0]);
    assert!(context_splice(&x, &[]).is_err());
}

#[test]
fn cat_mean_std_example() {
    let x = Tensor::from_rows(&[[1.0, 4.0], [3.0, 4.0], [5.0, 4.0], [7.0, 4.0]]).unwrap();
    let pooled = cat_mean_std(&x, 0.0);
    assert_eq!(pooled.data(), &[4.0, 4.0, 5f64.sqrt(), 0.0]);
    let floored = cat_mean_std(&x, 1e-10);
    assert!((floored.data()[3] - 1e-5).abs() < 1e-18);
}

#[test]
fn grl_forward_is_identity() {
    let x = random_features(4, 3, 2);
    assert_eq!(grl(&x), x);
}

#[test]
fn embeddings_have_unit_norm() {
    for config in [tanh_config(), ModelConfig::compact(3, 3, 5)] {
        let model = Model::new(config, 7).unwrap();
        for (seed, frames) in [(1, 1), (2, 5), (3, 40)] {
            let a = model.embed(&random_features(seed, frames, 3)).unwrap();
            assert_eq!(a.len(), model.config.embedding_dim);
            assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_makes_pointwise_trunk_invariant_to_frame_duplication() {
    let mut config = tanh_config();
    config.frame_layers = vec![FrameLayer { offsets: vec![0], width: 5 }, FrameLayer { offsets: vec![0], width: 4 }];
    let model = Model::new(config, 2).unwrap();
    let x = random_features(9, 6, 3);
    let doubled: Vec<Vec<f64>> = (0..12).map(|i| x.row(i / 2).to_vec()).collect();
    let a = model.embed(&x).unwrap();
    let b = model.embed(&Tensor::from_rows(&doubled).unwrap()).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn zero_output_layers_give_uniform_heads() {
    let mut model = Model::new(tanh_config(), 3).unwrap();
    model.params.ce_head.weight = Tensor::zeros(model.params.ce_head.weight.shape());
    let last = model.params.speaker_head.last_mut().unwrap();
    last.weight = Tensor::zeros(last.weight.shape());
    let x = random_features(5, 7, 3);
    for p in model.ce_head(&x).unwrap().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let a = model.embed(&x).unwrap();
    for p in model.speaker_head(&a).unwrap().data() {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn heads_are_distributions() {
    let model = Model::new(tanh_config(), 11).unwrap();
    let x = random_features(6, 9, 3);
    let ce = model.ce_head(&x).unwrap();
    assert!((ce.sum() - 1.0).abs() < 1e-12 && ce.data().iter().all(|&p| p > 0.0));
    let sp = model.speaker_head(&model.embed(&x).unwrap()).unwrap();
    assert!((sp.sum() - 1.0).abs() < 1e-12 && sp.data().iter().all(|&p| p > 0.0));
    assert!(model.embed(&random_features(6, 9, 4)).is_err());
    assert!(model.speaker_head(&Tensor::vector(vec![1.0; 3])).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut bad = tanh_config();
    bad.embedding_dim = 1;
    assert!(Model::new(bad, 0).is_err());
    let mut bad = tanh_config();
    bad.frame_layers[0].offsets = vec![1, 0];
    assert!(Model::new(bad, 0).is_err());
    let mut bad = tanh_config();
    bad.num_accents = 1;
    assert!(Model::new(bad, 0).is_err());
}

/// Squared distance from the embedding to a fixed unit target, differentiated
/// through the whole trunk.
#[test]
fn trunk_gradient_matches_finite_differences() {
    let model = Model::new(tanh_config(), 21).unwrap();
    let x = random_features(22, 8, 3);
    let target = {
        let v = random_features(23, 1, 4);
        let n = v.norm();
        v.map(|e| e / n)
    };

    let loss = |params: &[Tensor]| {
        let mut m = model.clone();
        for (dst, src) in m.params.trunk_tensors_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let trunk = BoundTrunk::bind(&mut g, &m.params);
        let xv = g.leaf(x.clone());
        let a = embed_node(&mut g, xv, &trunk, &m.config).unwrap();
        let t = g.leaf(target.clone());
        let d = g.sub(a, t)?;
        let sq = g.mul(d, d)?;
        let l = g.sum(sq);
        Ok((g, trunk, l))
    };

    let mut start = model.clone();
    let params: Vec<Tensor> = start.params.trunk_tensors_mut().into_iter().map(|t| t.clone()).collect();
    let (mut g, trunk, l) = loss(&params).unwrap();
    g.backward(l).unwrap();
    let mut grads = model.params.zeros_like();
    trunk.add_grads(&g, &mut grads);
    let analytic: Vec<Tensor> = grads.trunk_tensors_mut().into_iter().map(|t| t.clone()).collect();

    let report = grad_check(
        |p| loss(p).map(|(g, _, l)| g.scalar(l)),
        &params,
        &analytic,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());
}

fn speaker_episode(model: &Model) -> Vec<UtteranceRecord> {
    (0..3)
        .flat_map(|c| (0..2).map(move |m| (c, m)))
        .map(|(c, m)| to_record(&random_features(100 + (c * 2 + m) as u64, 6, 3), c, (c + m) % 5))
        .filter(|r| r.speaker < model.config.num_speakers)
        .collect()
}

#[test]
fn gradient_reversal_negates_trunk_gradients_only() {
    let model = Model::new(tanh_config(), 31).unwrap();
    let records = speaker_episode(&model);
    let batch: Vec<&UtteranceRecord> = records.iter().collect();
    let layout = Ge2eLayout::new(3, 2).unwrap();
    let run = |reverse| {
        let criterion = Criterion {
            ge2e: false,
            speaker: Some(SpeakerBranch { lambda: 0.7, reverse }),
            centroid_mode: CentroidMode::default(),
        };
        episode_gradients(&model, &batch, layout, criterion).unwrap()
    };
    let (plain, reversed) = (run(false), run(true));
    assert_eq!(plain.loss, reversed.loss);

    let (mut p, mut r) = (plain.grads.params.clone(), reversed.grads.params.clone());
    let trunk_p: Vec<Tensor> = p.trunk_tensors_mut().into_iter().map(|t| t.clone()).collect();
    let trunk_r: Vec<Tensor> = r.trunk_tensors_mut().into_iter().map(|t| t.clone()).collect();
    let mut nonzero = 0;
    for (a, b) in trunk_p.iter().zip(&trunk_r) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u + v).abs() <= 1e-9 * u.abs().max(1.0), "{u} vs {v}");
            nonzero += (u.abs() > 1e-12) as usize;
        }
    }
    assert!(nonzero > 0);
    for (a, b) in plain.grads.params.speaker_head.iter().zip(&reversed.grads.params.speaker_head) {
        assert_eq!(a, b);
    }
    assert_eq!(plain.grads.params.ce_head, reversed.grads.params.ce_head);
    assert!(plain.grads.params.ce_head.weight.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ce_head_and_speaker_head_share_the_trunk() {
    let model = Model::new(tanh_config(), 41).unwrap();
    let x = random_features(42, 7, 3);
    let mut nudged = model.clone();
    nudged.params.frame[0].weight.data_mut()[0] += 0.05;
    let a0 = model.embed(&x).unwrap();
    let a1 = nudged.embed(&x).unwrap();
    assert_ne!(a0, a1);
    assert_ne!(model.ce_head(&x).unwrap(), nudged.ce_head(&x).unwrap());
    assert_ne!(model.speaker_head(&a0).unwrap(), nudged.speaker_head(&a1).unwrap());

    let mut head_only = model.clone();
    head_only.params.speaker_head[0].weight.data_mut()[0] += 0.05;
    head_only.params.ce_head.bias.data_mut()[0] += 0.05;
    assert_eq!(model.embed(&x).unwrap(), head_only.embed(&x).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Model::new(tanh_config(), 51).unwrap();
    model.similarity.w = 12.5;
    model.similarity.b = -6.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.similarity, model.similarity);
    for (a, b) in model.params.tensors().iter().zip(back.params.tensors()) {
        assert_eq!(a.shape(), b.shape());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(*v, *u as f32 as f64);
        }
    }
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&decode_checkpoint(&encode_checkpoint(&back)).unwrap()));

    let x = random_features(52, 10, 3);
    let (a, b) = (model.embed(&x).unwrap(), back.embed(&x).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-5);
    }

    let bytes = encode_checkpoint(&model);
    assert!(matches!(decode_checkpoint(b"NOTACKPTxxxx"), Err(CheckpointError::BadMagic)));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
}
