//! Finite-difference checks of every differentiable operation, the GE2E
//! loss and the full training criterion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::features::{FeatureMatrix, UtteranceRecord};
use crate::losses::{ge2e_loss_and_grads, ge2e_loss_for_rows, CentroidMode, Ge2eLayout, SimilarityParams};
use crate::network::{Activation, EmbedderParams, FrameLayer, Model, ModelConfig};
use crate::numerics::{grad_check_masked, GradCheckConfig, GradCheckReport, Graph, NumericsError, Tensor, Var};
use crate::training::{episode_gradients, Criterion, SpeakerBranch};

/// Inputs closer than this to a ReLU kink are excluded from its check.
pub const RELU_KINK_BAND: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `[rows, dim]` matrix of random unit rows.
pub fn random_unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let mut t = random_tensor(rng, &[rows, dim]);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * dim..(r + 1) * dim];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Checks a graph-built function of `inputs`. Non-scalar outputs are
/// reduced to `sum(out * R)` with a fixed random `R`, so every output entry
/// contributes to the check.
pub fn check_op<B, S>(
    inputs: &[Tensor],
    build: B,
    config: &GradCheckConfig,
    skip: S,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
    S: Fn(usize, usize) -> bool,
{
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), &probe_shape);
    let reduce = |g: &mut Graph, out: Var| -> Result<Var, NumericsError> {
        let r = g.leaf(weights.clone());
        let prod = g.mul(out, r)?;
        Ok(g.sum(prod))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).clone()).collect();

    let value = |params: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        Ok(g.scalar(loss))
    };
    grad_check_masked(value, inputs, &analytic, config, skip)
}

/// Gradient reversal is the identity forward, so its analytic gradient must
/// match the negated finite differences.
pub fn check_reversal(x: &Tensor, config: &GradCheckConfig, seed: u64) -> Result<GradCheckReport, NumericsError> {
    let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), x.shape());
    let build = |g: &mut Graph, x: &Tensor| -> Result<(Var, Var), NumericsError> {
        let v = g.leaf(x.clone());
        let r = g.reverse_gradient(v);
        let w = g.leaf(weights.clone());
        let prod = g.mul(r, w)?;
        Ok((v, g.sum(prod)))
    };
    let mut g = Graph::new();
    let (v, loss) = build(&mut g, x)?;
    g.backward(loss)?;
    let negated = g.grad(v).map(|d| -d);
    let value = |p: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let (_, loss) = build(&mut g, &p[0])?;
        Ok(g.scalar(loss))
    };
    grad_check_masked(value, std::slice::from_ref(x), &[negated], config, no_skip)
}

fn no_skip(_: usize, _: usize) -> bool {
    false
}

type OpBuilder = fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpBuilder)> {
    let mut t = |shape: &[usize]| random_tensor(rng, shape);
    let scalar_pos = Tensor::scalar(1.5);
    vec![
        ("matmul", vec![t(&[3, 4]), t(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![t(&[3, 2])], |g, v| Ok(g.transpose(v[0]))),
        ("add", vec![t(&[2, 3]), t(&[2, 3])], |g, v| g.add(v[0], v[1])),
        ("sub", vec![t(&[2, 3]), t(&[2, 3])], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![t(&[2, 3]), t(&[2, 3])], |g, v| g.mul(v[0], v[1])),
        ("add_row_bias", vec![t(&[4, 3]), t(&[3])], |g, v| g.add_row_bias(v[0], v[1])),
        ("tanh", vec![t(&[3, 3])], |g, v| Ok(g.tanh(v[0]))),
        ("scale", vec![t(&[2, 3])], |g, v| Ok(g.scale(v[0], -2.5))),
        ("scale_by", vec![t(&[2, 3]), scalar_pos.clone()], |g, v| g.scale_by(v[0], v[1])),
        ("shift_by", vec![t(&[2, 3]), scalar_pos], |g, v| g.shift_by(v[0], v[1])),
        ("sum", vec![t(&[3, 2])], |g, v| Ok(g.sum(v[0]))),
        ("concat_rows", vec![t(&[1, 3]), t(&[2, 3])], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("splice", vec![t(&[7, 3])], |g, v| g.splice(v[0], &[-2, 0, 2])),
        ("mean_std", vec![t(&[9, 4])], |g, v| Ok(g.mean_std(v[0], 1e-10))),
        ("normalize_rows", vec![t(&[3, 4])], |g, v| g.normalize_rows(v[0])),
        ("row_dot", vec![t(&[3, 4]), t(&[3, 4])], |g, v| g.row_dot(v[0], v[1])),
        ("replace_at", vec![t(&[3, 4]), t(&[3])], |g, v| g.replace_at(v[0], v[1], &[2, 0, 3])),
        ("softmax_cross_entropy", vec![t(&[4, 5])], |g, v| g.softmax_cross_entropy(v[0], &[1, 0, 4, 2])),
    ]
}

/// Tiny smooth network for checking the full criterion entry by entry.
pub fn tiny_model_config(classes: usize, speakers: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        frame_layers: vec![
            FrameLayer { offsets: vec![-1, 0, 1], width: 4 },
            FrameLayer { offsets: vec![-2, 0, 2], width: 4 },
        ],
        segment_widths: vec![5],
        embedding_dim: 4,
        num_accents: classes,
        num_speakers: speakers,
        speaker_head_widths: vec![4],
        activation: Activation::Tanh,
        var_epsilon: 1e-10,
    }
}

/// Checks the combined GE2E + speaker criterion w.r.t. every network
/// parameter, `w` and `b` on a random episode. Gradient reversal is left out
/// because it makes the trunk gradient differ from the loss derivative by
/// design; it is checked separately by exact negation.
pub fn check_criterion(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport, NumericsError> {
    let (classes, per_class, speakers, frames) = (2, 2, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model_config = tiny_model_config(classes, speakers);
    let mut model = Model::new(model_config.clone(), seed).map_err(as_numeric)?;
    model.similarity = SimilarityParams::new(rng.random_range(2.0..6.0), rng.random_range(-2.0..0.0));
    // Keeps the pre-normalization embedding away from the origin, where
    // normalization is singular and central differences lose accuracy.
    let width = model.params.embedding.bias.len();
    model.params.embedding.bias = random_tensor(&mut rng, &[width]);
    let records: Vec<UtteranceRecord> = (0..classes * per_class)
        .map(|i| {
            let data = (0..frames * 3).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            UtteranceRecord {
                id: format!("u{i}"),
                features: FeatureMatrix::new(frames, 3, data).expect("shape"),
                accent: i / per_class,
                speaker: (i / per_class) * 2 + i % 2,
            }
        })
        .collect();
    let batch: Vec<&UtteranceRecord> = records.iter().collect();
    let layout = Ge2eLayout::new(classes, per_class).map_err(|e| NumericsError::NonFinite { context: e.to_string() })?;
    let criterion = Criterion {
        ge2e: true,
        speaker: Some(SpeakerBranch { lambda: 0.5, reverse: false }),
        centroid_mode: CentroidMode::LeaveOneOut,
    };

    let out = episode_gradients(&model, &batch, layout, criterion).map_err(as_numeric)?;
    let mut params: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
    params.push(Tensor::scalar(model.similarity.w));
    params.push(Tensor::scalar(model.similarity.b));
    let mut analytic: Vec<Tensor> = out.grads.params.tensors().into_iter().cloned().collect();
    analytic.push(Tensor::scalar(out.grads.w));
    analytic.push(Tensor::scalar(out.grads.b));

    let value = |p: &[Tensor]| -> Result<f64, NumericsError> {
        let mut params = EmbedderParams::init(&model_config, 0).map_err(as_numeric)?;
        for (dst, src) in params.tensors_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let n = p.len();
        let m = Model {
            config: model_config.clone(),
            params,
            similarity: SimilarityParams { w: p[n - 2].data()[0], b: p[n - 1].data()[0] },
        };
        Ok(episode_gradients(&m, &batch, layout, criterion).map_err(as_numeric)?.loss)
    };
    grad_check_masked(value, &params, &analytic, config, no_skip)
}

fn as_numeric(e: impl std::fmt::Display) -> NumericsError {
    NumericsError::NonFinite { context: e.to_string() }
}

/// Checks the GE2E loss w.r.t. embeddings, `w` and `b` on a random batch of
/// unit embeddings.
pub fn check_ge2e(
    rng: &mut impl Rng,
    layout: Ge2eLayout,
    dim: usize,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let rows = random_unit_rows(rng, layout.rows(), dim);
    let params = SimilarityParams::new(rng.random_range(1.0..15.0), rng.random_range(-8.0..2.0));
    let lift = |e: crate::losses::LossError| NumericsError::NonFinite { context: e.to_string() };
    let grads = ge2e_loss_and_grads(&rows, layout, params, CentroidMode::LeaveOneOut).map_err(lift)?;
    let value = |p: &[Tensor]| {
        let sp = SimilarityParams { w: p[1].data()[0], b: p[2].data()[0] };
        ge2e_loss_for_rows(&p[0], layout, sp, CentroidMode::LeaveOneOut).map_err(lift)
    };
    grad_check_masked(
        value,
        &[rows.clone(), Tensor::scalar(params.w), Tensor::scalar(params.b)],
        &[grads.embeddings, Tensor::scalar(grads.w), Tensor::scalar(grads.b)],
        config,
        no_skip,
    )
}

/// Every operation, the GE2E loss and the full criterion, from one seed.
pub fn run_suite(seed: u64, config: &GradCheckConfig) -> Result<Vec<SuiteCheck>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, build) in op_cases(&mut rng) {
        let report = check_op(&inputs, build, config, no_skip, seed)?;
        out.push(SuiteCheck { name: name.to_string(), report });
    }
    let relu_input = random_tensor(&mut rng, &[4, 4]);
    let near_kink: Vec<bool> = relu_input.data().iter().map(|v| v.abs() < RELU_KINK_BAND).collect();
    let report = check_op(&[relu_input], |g, v| Ok(g.relu(v[0])), config, |_, e| near_kink[e], seed)?;
    out.push(SuiteCheck { name: "relu".into(), report });

    let report = check_reversal(&random_tensor(&mut rng, &[2, 3]), config, seed)?;
    out.push(SuiteCheck { name: "reverse_gradient".into(), report });

    let layout = Ge2eLayout::new(4, 3).expect("valid layout");
    let report = check_ge2e(&mut rng, layout, 8, config)?;
    out.push(SuiteCheck { name: "ge2e_loss".into(), report });
    let report = check_criterion(seed, config)?;
    out.push(SuiteCheck { name: "combined_criterion".into(), report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let checks = run_suite(3, &GradCheckConfig::default()).unwrap();
        for c in &checks {
            assert!(c.report.passed, "{}: {}", c.name, c.report.max_relative_error);
        }
        assert_eq!(checks.len(), 22);
    }

    #[test]
    fn impossible_tolerance_fails() {
        let checks = run_suite(3, &GradCheckConfig::new(1e-4, 1e-12)).unwrap();
        assert!(checks.iter().any(|c| !c.report.passed));
    }
}
