//! Linear decoding of task constituents from hidden activations, plus the
//! decodability-vs-generalization diagnostics.
//!
//! The probe is closed-form ridge regression on column-centered data. Each
//! probed task contributes one row: the mean post-activation of the chosen
//! layer over a batch of inputs, paired with the task's magnitudes vector.
//! Fitting only ever sees training-support tasks; held-out tasks are used for
//! scoring alone.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encodings::Encoder;
use crate::linalg::{cholesky_solve, pearson};
use crate::nn::{assemble_student_input, forward, r_squared, MlpModel};
use crate::rng::{self, tag};
use crate::taskfam::{sample_task_batch, Hyperteacher, Mask, TaskConstituents};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    /// Hidden layer to probe: 0 is the student input itself, 1..=L are the
    /// post-ReLU hidden layers.
    pub layer_index: usize,
    pub lambda: f64,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    /// Inputs per task; activations are averaged over this batch.
    pub batch_per_task: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            layer_index: 3,
            lambda: 1.0,
            train_tasks: 256,
            eval_tasks: 128,
            batch_per_task: 64,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.train_tasks == 0 || self.eval_tasks == 0 || self.batch_per_task == 0 {
            return Err(Error::Config("task and batch counts must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form ridge decoder: weights on centered features plus an intercept.
#[derive(Debug, Clone)]
pub struct RidgeDecoder {
    pub weights: Array2<f64>,
    pub intercept: Array1<f64>,
}

impl RidgeDecoder {
    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.intercept
    }
}

/// Solve `(Xc^T Xc + lambda I) B = Xc^T Zc` on column-centered data; the
/// intercept absorbs the means. `lambda = 0` is allowed but may be singular.
pub fn ridge_fit(x: &Array2<f64>, z: &Array2<f64>, lambda: f64) -> Result<RidgeDecoder> {
    if x.nrows() != z.nrows() {
        return Err(Error::Shape(format!(
            "ridge_fit: {} feature rows vs {} target rows",
            x.nrows(),
            z.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Empty("ridge_fit needs at least 2 rows".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let z_mean = z.mean_axis(Axis(0)).unwrap();
    let xc = x - &x_mean;
    let zc = z - &z_mean;
    let mut gram = xc.t().dot(&xc);
    for i in 0..gram.nrows() {
        gram[[i, i]] += lambda;
    }
    let rhs = xc.t().dot(&zc);
    let weights = cholesky_solve(&gram, &rhs)?;
    let intercept = &z_mean - &x_mean.dot(&weights);
    Ok(RidgeDecoder { weights, intercept })
}

/// Per-task activation summary: for each sampled task, run one batch forward
/// and record the chosen layer's mean post-activation next to the task's
/// magnitudes vector.
pub fn collect_activations(
    model: &MlpModel,
    teacher: &Hyperteacher,
    masks: &[Mask],
    encoder: &Encoder,
    layer_index: usize,
    tasks: usize,
    batch_per_task: usize,
    rng: &mut rng::Stream,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if tasks == 0 {
        return Err(Error::Empty("task count must be positive".into()));
    }
    let hidden = model.spec.hidden_layer_count();
    if layer_index > hidden {
        return Err(Error::Config(format!(
            "layer_index {layer_index} out of range 0..={hidden}"
        )));
    }
    let dim = if layer_index == 0 {
        model.spec.input_dim()
    } else {
        model.spec.layer_sizes[layer_index]
    };
    let mut activations = Array2::zeros((tasks, dim));
    let mut targets = Array2::zeros((tasks, teacher.config.module_count));
    for t in 0..tasks {
        let batch = sample_task_batch(teacher, masks, batch_per_task, rng)?;
        let r: u64 = rng.gen();
        let enc = encoder.encode(teacher, &batch.constituents, r)?;
        let x = assemble_student_input(&batch.inputs, &enc.values);
        let row = if layer_index == 0 {
            x.mean_axis(Axis(0)).unwrap()
        } else {
            let (_, cache) = forward(model, &x)?;
            cache.post[layer_index - 1].mean_axis(Axis(0)).unwrap()
        };
        activations.row_mut(t).assign(&row);
        targets
            .row_mut(t)
            .assign(&Array1::from_vec(batch.constituents.magnitudes.clone()));
    }
    Ok((activations, targets))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer_index: usize,
    pub lambda: f64,
    pub train_r2: f64,
    pub heldout_r2: f64,
    pub per_coordinate_r2: Vec<f64>,
}

/// Fit the decoder on training-support activations and score it on held-out
/// tasks.
pub fn decodability_score(
    model: &MlpModel,
    teacher: &Hyperteacher,
    support: &[Mask],
    heldout: &[Mask],
    encoder: &Encoder,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if support.is_empty() || heldout.is_empty() {
        return Err(Error::Empty("support and heldout must be non-empty".into()));
    }
    let mut train_stream = rng::stream(seed, tag::PROBE, 0);
    let (x_train, z_train) = collect_activations(
        model,
        teacher,
        support,
        encoder,
        cfg.layer_index,
        cfg.train_tasks,
        cfg.batch_per_task,
        &mut train_stream,
    )?;
    if all_columns_constant(&x_train) {
        return Err(Error::Degenerate(
            "probed layer emits constant activations for every task".into(),
        ));
    }
    let mut eval_stream = rng::stream(seed, tag::PROBE, 1);
    let (x_eval, z_eval) = collect_activations(
        model,
        teacher,
        heldout,
        encoder,
        cfg.layer_index,
        cfg.eval_tasks,
        cfg.batch_per_task,
        &mut eval_stream,
    )?;
    let decoder = ridge_fit(&x_train, &z_train, cfg.lambda)?;
    let train_r2 = r_squared(&decoder.predict(&x_train), &z_train)?;
    let pred = decoder.predict(&x_eval);
    let heldout_r2 = r_squared(&pred, &z_eval)?;
    let per_coordinate_r2 = per_column_r2(&pred, &z_eval);
    Ok(ProbeReport {
        layer_index: cfg.layer_index,
        lambda: cfg.lambda,
        train_r2,
        heldout_r2,
        per_coordinate_r2,
    })
}

fn all_columns_constant(x: &Array2<f64>) -> bool {
    for col in x.columns() {
        let first = col[0];
        if col.iter().any(|&v| v != first) {
            return false;
        }
    }
    true
}

fn per_column_r2(pred: &Array2<f64>, target: &Array2<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(target.ncols());
    for c in 0..target.ncols() {
        let t = target.column(c);
        let p = pred.column(c);
        let mean = t.sum() / t.len() as f64;
        let ss_tot: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum();
        let ss_res: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        out.push(if ss_tot == 0.0 {
            f64::NAN
        } else {
            1.0 - ss_res / ss_tot
        });
    }
    out
}

/// Monte-Carlo estimate of `P_x[ max_o |C(z)(x) - C(z')(x)| <= tau ]`, the
/// tolerance-relaxed collision probability of two tasks.
pub fn distinguishability(
    teacher: &Hyperteacher,
    z: &TaskConstituents,
    z_other: &TaskConstituents,
    samples: usize,
    tau: f64,
    rng: &mut rng::Stream,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Empty("samples must be positive".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let (wa, ba) = teacher.compose(z)?;
    let (wb, bb) = teacher.compose(z_other)?;
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = Array1::from_shape_fn(teacher.config.input_dim, |_| rng.gen_range(-1.0..=1.0));
        let ya = teacher.apply_composed(&wa, &ba, &x)?;
        let yb = teacher.apply_composed(&wb, &bb, &x)?;
        let diff = (&ya - &yb).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if diff <= tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation between paired run metrics with the OLS two-sided
/// p-value from the t distribution on n-2 degrees of freedom.
pub fn decode_correlation(pairs: &[(f64, f64)]) -> Result<Correlation> {
    if pairs.len() < 3 {
        return Err(Error::Empty(format!(
            "decode_correlation needs at least 3 runs, got {}",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;
    let n = pairs.len();
    let df = (n - 2) as f64;
    let p_value = if 1.0 - r * r < 1e-15 {
        0.0
    } else {
        let t = r.abs() * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Config(format!("t distribution: {e}")))?;
        2.0 * (1.0 - dist.cdf(t))
    };
    Ok(Correlation {
        pearson_r: r,
        p_value,
        n,
    })
}
