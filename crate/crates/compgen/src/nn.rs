//! Dense ReLU network with hand-written reverse-mode gradients and AdamW.
//!
//! The student accepts the concatenation of a task input and its encoding and
//! regresses the teacher's outputs. Forward passes cache per-layer pre- and
//! post-activations so hidden representations can be probed later.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encodings::Encoder;
use crate::linalg::{mat_from_nested, mat_to_nested};
use crate::rng::{self, tag, Stream};
use crate::taskfam::{sample_task_batch, Hyperteacher, Mask};
use crate::{Error, Result};

/// Layer sizes `[d_in, h_1, ..., h_L, d_out]`; ReLU on hidden layers, linear
/// output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self { layer_sizes }
    }

    /// `depth` hidden layers of `width` units between `d_in` and `d_out`.
    pub fn rectangular(d_in: usize, width: usize, depth: usize, d_out: usize) -> Self {
        let mut sizes = Vec::with_capacity(depth + 2);
        sizes.push(d_in);
        sizes.extend(std::iter::repeat(width).take(depth));
        sizes.push(d_out);
        Self { layer_sizes: sizes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Config("spec needs at least one hidden layer".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("all layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight matrices (hidden layers + output layer).
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.layer_sizes.len() - 2
    }
}

/// Weights are stored (fan_in, fan_out): a batch activates as `x . w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Per-hidden-layer activations captured by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub train_seed: u64,
    /// Loss snapshot cadence for the trace.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_snapshot_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 3e-3,
            batch_size: 128,
            steps: 50_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_seed: 0,
            snapshot_every: default_snapshot_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("rates and counts must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

/// First/second-moment accumulators for AdamW.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m_weights: Vec<Array2<f64>>,
    pub v_weights: Vec<Array2<f64>>,
    pub m_biases: Vec<Array1<f64>>,
    pub v_biases: Vec<Array1<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            m_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            step: 0,
        }
    }
}

/// He-initialized model: weight std sqrt(2 / fan_in), zero biases.
pub fn init_mlp(spec: &MlpSpec, rng: &mut Stream) -> Result<MlpModel> {
    spec.validate()?;
    let mut weights = Vec::with_capacity(spec.layer_count());
    let mut biases = Vec::with_capacity(spec.layer_count());
    for l in 0..spec.layer_count() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let std = (2.0 / fan_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpModel {
        spec: spec.clone(),
        weights,
        biases,
    })
}

/// Forward pass over a batch (rows are samples). Returns predictions and the
/// cached hidden activations.
pub fn forward(model: &MlpModel, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != model.spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.spec.input_dim()
        )));
    }
    let hidden = model.spec.hidden_layer_count();
    let mut pre = Vec::with_capacity(hidden);
    let mut post = Vec::with_capacity(hidden);
    let mut a = x.clone();
    for l in 0..hidden {
        let z = a.dot(&model.weights[l]) + &model.biases[l];
        let p = z.mapv(|v| v.max(0.0));
        pre.push(z);
        post.push(p.clone());
        a = p;
    }
    let out = a.dot(&model.weights[hidden]) + &model.biases[hidden];
    Ok((out, ForwardCache { pre, post }))
}

/// Mean over batch and output dimensions of the squared error.
pub fn mse_loss(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    let n = (prediction.nrows() * prediction.ncols()) as f64;
    let mut s = 0.0;
    for (p, t) in prediction.iter().zip(target.iter()) {
        let d = p - t;
        s += d * d;
    }
    Ok(s / n)
}

/// Loss and reverse-accumulated gradients for one batch.
pub fn gradients(model: &MlpModel, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Gradients)> {
    let (out, cache) = forward(model, x)?;
    let loss = mse_loss(&out, y)?;
    let hidden = model.spec.hidden_layer_count();
    let n = (out.nrows() * out.ncols()) as f64;

    let mut d_weights: Vec<Array2<f64>> = Vec::with_capacity(hidden + 1);
    let mut d_biases: Vec<Array1<f64>> = Vec::with_capacity(hidden + 1);

    let mut dz = (&out - y).mapv(|v| 2.0 * v / n);
    for l in (0..=hidden).rev() {
        let a_prev: &Array2<f64> = if l == 0 { x } else { &cache.post[l - 1] };
        d_weights.push(a_prev.t().dot(&dz));
        d_biases.push(dz.sum_axis(Axis(0)));
        if l > 0 {
            let da = dz.dot(&model.weights[l].t());
            dz = da * &cache.pre[l - 1].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        }
    }
    d_weights.reverse();
    d_biases.reverse();
    Ok((
        loss,
        Gradients {
            weights: d_weights,
            biases: d_biases,
        },
    ))
}

/// One AdamW update: bias-corrected moments, decoupled weight decay.
pub fn adamw_step(
    model: &mut MlpModel,
    state: &mut OptimizerState,
    grads: &Gradients,
    cfg: &TrainConfig,
) -> Result<()> {
    for g in grads.weights.iter().flat_map(|w| w.iter()) {
        if !g.is_finite() {
            return Err(Error::NonFinite("non-finite weight gradient".into()));
        }
    }
    for g in grads.biases.iter().flat_map(|b| b.iter()) {
        if !g.is_finite() {
            return Err(Error::NonFinite("non-finite bias gradient".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for l in 0..model.weights.len() {
        update_tensor(
            model.weights[l].iter_mut(),
            state.m_weights[l].iter_mut(),
            state.v_weights[l].iter_mut(),
            grads.weights[l].iter(),
            cfg,
            c1,
            c2,
        );
        update_tensor(
            model.biases[l].iter_mut(),
            state.m_biases[l].iter_mut(),
            state.v_biases[l].iter_mut(),
            grads.biases[l].iter(),
            cfg,
            c1,
            c2,
        );
    }
    Ok(())
}

fn update_tensor<'a>(
    theta: impl Iterator<Item = &'a mut f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    g: impl Iterator<Item = &'a f64>,
    cfg: &TrainConfig,
    c1: f64,
    c2: f64,
) {
    for (((th, m), v), &g) in theta.zip(m).zip(v).zip(g) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *th -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * *th);
    }
}

/// One loss snapshot on the trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub trace: Vec<LossPoint>,
    pub final_loss: f64,
}

/// Train a student on freshly sampled batches: each step draws a task mask
/// from the support, fresh magnitudes, fresh inputs, and a fresh encoding
/// seed. Deterministic given the config seeds.
pub fn train_student(
    teacher: &Hyperteacher,
    support: &[Mask],
    encoder: &Encoder,
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if support.is_empty() {
        return Err(Error::Empty("training support is empty".into()));
    }
    let expected_in = teacher.config.input_dim + encoder.dim();
    if spec.input_dim() != expected_in {
        return Err(Error::Shape(format!(
            "student input {} != task input {} + encoding {}",
            spec.input_dim(),
            teacher.config.input_dim,
            encoder.dim()
        )));
    }
    if spec.output_dim() != teacher.config.output_dim {
        return Err(Error::Shape(format!(
            "student output {} != teacher output {}",
            spec.output_dim(),
            teacher.config.output_dim
        )));
    }

    let mut init_stream = rng::stream(cfg.train_seed, tag::STUDENT_INIT, 0);
    let mut model = init_mlp(spec, &mut init_stream)?;
    let mut state = OptimizerState::new(&model);
    let mut batch_stream = rng::stream(cfg.train_seed, tag::TRAIN_BATCH, 0);

    let mut trace = Vec::new();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = sample_task_batch(teacher, support, cfg.batch_size, &mut batch_stream)?;
        let r: u64 = batch_stream.gen();
        let enc = encoder.encode(teacher, &batch.constituents, r)?;
        let x = assemble_student_input(&batch.inputs, &enc.values);
        let (loss, grads) = gradients(&model, &x, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}")));
        }
        adamw_step(&mut model, &mut state, &grads, cfg)?;
        if step % cfg.snapshot_every == 0 || step + 1 == cfg.steps {
            trace.push(LossPoint { step, loss });
        }
        last_loss = loss;
    }
    Ok(TrainOutcome {
        model,
        trace,
        final_loss: last_loss,
    })
}

/// Concatenate per-sample inputs with the (shared) task encoding.
pub fn assemble_student_input(inputs: &Array2<f64>, encoding: &Array1<f64>) -> Array2<f64> {
    let (b, i) = inputs.dim();
    let e = encoding.len();
    let mut x = Array2::zeros((b, i + e));
    x.slice_mut(ndarray::s![.., ..i]).assign(inputs);
    for row in 0..b {
        x.slice_mut(ndarray::s![row, i..]).assign(encoding);
    }
    x
}

/// Coefficient of determination with residuals pooled over rows and output
/// dimensions; per-dimension means come from the targets.
pub fn r_squared(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    if target.nrows() < 2 {
        return Err(Error::Empty("r_squared needs at least 2 rows".into()));
    }
    let means = target.mean_axis(Axis(0)).unwrap();
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p_row, t_row) in prediction.rows().into_iter().zip(target.rows()) {
        for ((p, t), m) in p_row.iter().zip(t_row.iter()).zip(means.iter()) {
            ss_res += (p - t) * (p - t);
            ss_tot += (t - m) * (t - m);
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("targets have zero variance".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Pooled held-out R²: draws `eval_tasks` tasks from the held-out masks with
/// `eval_batch` fresh inputs each and pools all residuals.
pub fn eval_compgen(
    model: &MlpModel,
    teacher: &Hyperteacher,
    heldout: &[Mask],
    encoder: &Encoder,
    eval_tasks: usize,
    eval_batch: usize,
    seed: u64,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out mask set is empty".into()));
    }
    if eval_tasks == 0 || eval_batch == 0 {
        return Err(Error::Config("eval sizes must be positive".into()));
    }
    let mut s = rng::stream(seed, tag::EVAL, 0);
    let rows = eval_tasks * eval_batch;
    let mut pred = Array2::zeros((rows, teacher.config.output_dim));
    let mut target = Array2::zeros((rows, teacher.config.output_dim));
    for e in 0..eval_tasks {
        let batch = sample_task_batch(teacher, heldout, eval_batch, &mut s)?;
        let r: u64 = s.gen();
        let enc = encoder.encode(teacher, &batch.constituents, r)?;
        let x = assemble_student_input(&batch.inputs, &enc.values);
        let (out, _) = forward(model, &x)?;
        let lo = e * eval_batch;
        pred.slice_mut(ndarray::s![lo..lo + eval_batch, ..]).assign(&out);
        target
            .slice_mut(ndarray::s![lo..lo + eval_batch, ..])
            .assign(&batch.labels);
    }
    r_squared(&pred, &target)
}

/// Nested-array model document mirroring the teacher format; also embedded in
/// the constructed-net file.
#[derive(Serialize, Deserialize)]
pub(crate) struct ModelDoc {
    spec: MlpSpec,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<&MlpModel> for ModelDoc {
    fn from(model: &MlpModel) -> Self {
        Self {
            spec: model.spec.clone(),
            weights: model.weights.iter().map(mat_to_nested).collect(),
            biases: model.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<ModelDoc> for MlpModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<MlpModel> {
        doc.spec.validate()?;
        let layers = doc.spec.layer_count();
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(Error::Format("layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let w = mat_from_nested(&doc.weights[l])?;
            if w.dim() != (doc.spec.layer_sizes[l], doc.spec.layer_sizes[l + 1]) {
                return Err(Error::Format(format!("weight shape mismatch at layer {l}")));
            }
            if doc.biases[l].len() != doc.spec.layer_sizes[l + 1] {
                return Err(Error::Format(format!("bias length mismatch at layer {l}")));
            }
            weights.push(w);
            biases.push(Array1::from_vec(doc.biases[l].clone()));
        }
        Ok(MlpModel {
            spec: doc.spec,
            weights,
            biases,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    doc: ModelDoc,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        doc: ModelDoc::from(model),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {}",
            file.version
        )));
    }
    file.doc.try_into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::{EncodingSpec, Variant};
    use crate::rng::stream;
    use crate::taskfam::{enumerate_masks, init_hyperteacher, FamilyConfig};
    use ndarray::array;

    fn tiny_model(sizes: Vec<usize>, seed: u64) -> MlpModel {
        init_mlp(&MlpSpec::new(sizes), &mut stream(seed, tag::STUDENT_INIT, 0)).unwrap()
    }

    /// Scalar-loop forward oracle, independent of the ndarray path.
    fn forward_oracle(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.to_vec();
        let layers = model.spec.layer_count();
        for l in 0..layers {
            let (fan_in, fan_out) = (model.spec.layer_sizes[l], model.spec.layer_sizes[l + 1]);
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut acc = model.biases[l][o];
                for i in 0..fan_in {
                    acc += a[i] * model.weights[l][[i, o]];
                }
                z[o] = if l + 1 < layers { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic_and_rejects_shallow_specs() {
        let a = tiny_model(vec![4, 8, 2], 0);
        let b = tiny_model(vec![4, 8, 2], 0);
        assert_eq!(a.weights, b.weights);
        assert!(init_mlp(&MlpSpec::new(vec![4, 2]), &mut stream(0, 0, 0)).is_err());
    }

    #[test]
    fn init_std_matches_he() {
        let m = tiny_model(vec![256, 256, 1], 3);
        let w = &m.weights[0];
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = (2.0 / 256.0_f64).sqrt();
        assert!(
            (var.sqrt() - target).abs() < 0.1 * target,
            "std {} vs {}",
            var.sqrt(),
            target
        );
        assert!(m.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_zero_model_outputs_zero() {
        let mut m = tiny_model(vec![3, 4, 2], 1);
        for w in &mut m.weights {
            w.fill(0.0);
        }
        let x = array![[0.5, -0.5, 1.0], [0.0, 0.0, 0.0]];
        let (y, _) = forward(&m, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_identity_passes_nonnegative_input() {
        let spec = MlpSpec::new(vec![3, 3, 3]);
        let mut m = init_mlp(&spec, &mut stream(0, 0, 0)).unwrap();
        m.weights[0] = Array2::eye(3);
        m.weights[1] = Array2::eye(3);
        m.biases.iter_mut().for_each(|b| b.fill(0.0));
        let x = array![[0.1, 0.0, 2.0]];
        let (y, _) = forward(&m, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let m = tiny_model(vec![5, 7, 6, 3], 9);
        let mut s = stream(2, 0x91, 0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| s.gen_range(-2.0..2.0)).collect();
            let xa = Array2::from_shape_vec((1, 5), x.clone()).unwrap();
            let (y, cache) = forward(&m, &xa).unwrap();
            let want = forward_oracle(&m, &x);
            for (a, b) in y.row(0).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
            // Cache consistency: post = max(0, pre) exactly.
            for (pre, post) in cache.pre.iter().zip(&cache.post) {
                for (p, q) in pre.iter().zip(post.iter()) {
                    assert_eq!(p.max(0.0), *q);
                }
            }
        }
    }

    #[test]
    fn repeated_forward_is_identical() {
        let m = tiny_model(vec![6, 9, 4], 12);
        let x = Array2::from_shape_fn((5, 6), |(r, c)| (r as f64 - 2.0) * 0.3 + c as f64 * 0.1);
        let (y1, c1) = forward(&m, &x).unwrap();
        let (y2, c2) = forward(&m, &x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(c1.post, c2.post);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradients() {
        let m = tiny_model(vec![2, 4, 1], 4);
        let x = array![[0.1, 0.2], [0.3, -0.4]];
        let (y, _) = forward(&m, &x).unwrap();
        let (loss, grads) = gradients(&m, &x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_parameter_linear_model_matches_analytic_gradient() {
        // y_hat = w2 * relu(w1 * x); with w1, x > 0 the net is linear in each
        // weight and the closed-form batch gradients are easy to write down.
        let spec = MlpSpec::new(vec![1, 1, 1]);
        let mut m = init_mlp(&spec, &mut stream(1, 0, 0)).unwrap();
        m.weights[0][[0, 0]] = 0.8;
        m.weights[1][[0, 0]] = -0.6;
        let xs = [0.25f64, 0.5, 1.0];
        let ys = [0.1f64, -0.2, 0.4];
        let x = Array2::from_shape_vec((3, 1), xs.to_vec()).unwrap();
        let y = Array2::from_shape_vec((3, 1), ys.to_vec()).unwrap();
        let (_, grads) = gradients(&m, &x, &y).unwrap();
        let (w1, w2) = (0.8, -0.6);
        let analytic_w2: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&xi, &yi)| {
                let h = w1 * xi;
                2.0 * h * (w2 * h - yi)
            })
            .sum::<f64>()
            / 3.0;
        let analytic_w1: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&xi, &yi)| {
                let h = w1 * xi;
                2.0 * (w2 * h - yi) * w2 * xi
            })
            .sum::<f64>()
            / 3.0;
        assert!((grads.weights[1][[0, 0]] - analytic_w2).abs() <= 1e-10);
        assert!((grads.weights[0][[0, 0]] - analytic_w1).abs() <= 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = MlpSpec::new(vec![4, 6, 5, 3]);
        let mut s = stream(7, 0x92, 0);
        let m = init_mlp(&spec, &mut stream(5, tag::STUDENT_INIT, 0)).unwrap();
        let x = Array2::from_shape_fn((8, 4), |_| s.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((8, 3), |_| s.gen_range(-1.0..1.0));
        let (_, grads) = gradients(&m, &x, &y).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        let mut ok = 0usize;
        for l in 0..m.weights.len() {
            for idx in 0..m.weights[l].len() {
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.weights[l].as_slice_mut().unwrap()[idx] += h;
                minus.weights[l].as_slice_mut().unwrap()[idx] -= h;
                let lp = mse_loss(&forward(&plus, &x).unwrap().0, &y).unwrap();
                let lm = mse_loss(&forward(&minus, &x).unwrap().0, &y).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.weights[l].as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                checked += 1;
                if (fd - an).abs() / denom <= 1e-4 {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 >= 0.99 * checked as f64,
            "finite differences agree on {ok}/{checked}"
        );
    }

    #[test]
    fn adamw_zero_gradient_behavior() {
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        let mut m = tiny_model(vec![2, 3, 1], 6);
        let theta0 = m.weights[0][[0, 0]];
        let mut st = OptimizerState::new(&m);
        let zeros = Gradients {
            weights: m.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: m.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        };
        // wd > 0: pure multiplicative shrink.
        adamw_step(&mut m, &mut st, &zeros, &cfg).unwrap();
        let want = theta0 * (1.0 - cfg.learning_rate * cfg.weight_decay);
        assert!((m.weights[0][[0, 0]] - want).abs() <= 1e-15);

        // wd = 0: parameters unchanged.
        let cfg0 = TrainConfig {
            weight_decay: 0.0,
            ..cfg
        };
        let mut m2 = tiny_model(vec![2, 3, 1], 6);
        let before = m2.weights[0].clone();
        let mut st2 = OptimizerState::new(&m2);
        adamw_step(&mut m2, &mut st2, &zeros, &cfg0).unwrap();
        assert_eq!(m2.weights[0], before);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        // Single scalar parameter, constant unit gradient: after one step the
        // update is -lr * (1 / (1 + eps)) - lr * wd * theta0.
        let cfg = TrainConfig::default();
        let spec = MlpSpec::new(vec![1, 1, 1]);
        let mut m = init_mlp(&spec, &mut stream(2, 0, 0)).unwrap();
        let theta0 = 0.37;
        m.weights[0][[0, 0]] = theta0;
        let mut st = OptimizerState::new(&m);
        let mut g = Gradients {
            weights: m.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: m.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        };
        g.weights[0][[0, 0]] = 1.0;
        adamw_step(&mut m, &mut st, &g, &cfg).unwrap();
        let want = theta0
            - cfg.learning_rate * (1.0 / (1.0 + cfg.epsilon))
            - cfg.learning_rate * cfg.weight_decay * theta0;
        assert!((m.weights[0][[0, 0]] - want).abs() <= 1e-15);
        assert!(st.step == 1);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let cfg = TrainConfig::default();
        let mut m = tiny_model(vec![1, 1, 1], 0);
        let mut st = OptimizerState::new(&m);
        let mut g = Gradients {
            weights: m.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: m.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        };
        g.weights[0][[0, 0]] = f64::NAN;
        assert!(adamw_step(&mut m, &mut st, &g, &cfg).is_err());
    }

    #[test]
    fn r_squared_reference_points() {
        let y = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        let means = array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]];
        assert_eq!(r_squared(&means, &y).unwrap(), 0.0);
        // Anti-predictions are worse than the mean predictor: negative score.
        let anti = array![[5.0, 6.0], [3.0, 4.0], [1.0, 2.0]];
        assert!(r_squared(&anti, &y).unwrap() < 0.0);
        let constant = array![[1.0], [1.0]];
        assert!(r_squared(&constant, &constant).is_err());
    }

    fn small_family() -> FamilyConfig {
        FamilyConfig {
            module_count: 1,
            max_active: 1,
            input_dim: 3,
            hidden_dim: 4,
            output_dim: 2,
            magnitude_grid: vec![1.0],
            family_seed: 13,
        }
    }

    #[test]
    fn zero_step_training_returns_initial_model() {
        let cfg = small_family();
        let t = init_hyperteacher(&cfg).unwrap();
        let enc = Encoder::build(&EncodingSpec::new(Variant::Identity), &cfg).unwrap();
        let masks = enumerate_masks(1, 1).unwrap();
        let spec = MlpSpec::rectangular(3 + 1, 8, 1, 2);
        let train = TrainConfig {
            steps: 0,
            train_seed: 5,
            ..TrainConfig::default()
        };
        let out = train_student(&t, &masks, &enc, &spec, &train).unwrap();
        let fresh = init_mlp(&spec, &mut stream(5, tag::STUDENT_INIT, 0)).unwrap();
        assert_eq!(out.model.weights, fresh.weights);
    }

    #[test]
    fn single_task_is_memorizable_and_training_is_deterministic() {
        let cfg = small_family();
        let t = init_hyperteacher(&cfg).unwrap();
        let enc = Encoder::build(&EncodingSpec::new(Variant::Identity), &cfg).unwrap();
        let masks = enumerate_masks(1, 1).unwrap();
        let spec = MlpSpec::rectangular(3 + 1, 32, 2, 2);
        let train = TrainConfig {
            steps: 12_000,
            batch_size: 32,
            train_seed: 11,
            snapshot_every: 10,
            ..TrainConfig::default()
        };
        let a = train_student(&t, &masks, &enc, &spec, &train).unwrap();
        assert!(
            a.final_loss < 1e-3,
            "single fixed task should be memorizable, loss {}",
            a.final_loss
        );
        let b = train_student(&t, &masks, &enc, &spec, &train).unwrap();
        let la: Vec<f64> = a.trace.iter().map(|p| p.loss).collect();
        let lb: Vec<f64> = b.trace.iter().map(|p| p.loss).collect();
        assert_eq!(la, lb, "loss trace must be bit-identical");

        // Loss went down in the median sense.
        let k = la.len() / 4;
        let mut first: Vec<f64> = la[..k].to_vec();
        let mut last: Vec<f64> = la[la.len() - k..].to_vec();
        first.sort_by(|x, y| x.partial_cmp(y).unwrap());
        last.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(last[k / 2] < first[k / 2]);
    }

    #[test]
    fn eval_compgen_rejects_empty_heldout() {
        let cfg = small_family();
        let t = init_hyperteacher(&cfg).unwrap();
        let enc = Encoder::build(&EncodingSpec::new(Variant::Identity), &cfg).unwrap();
        let m = tiny_model(vec![4, 8, 2], 0);
        assert!(eval_compgen(&m, &t, &[], &enc, 4, 4, 0).is_err());
    }

    #[test]
    fn model_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = tiny_model(vec![3, 5, 2], 8);
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
    }
}
