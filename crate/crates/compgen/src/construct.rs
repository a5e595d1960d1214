//! Compile a hyperteacher into an explicit ReLU network with a tracked
//! analytic error budget, and verify the compiled network empirically.
//!
//! Building blocks: a piecewise-linear interpolant of the square function on a
//! bounded interval (one ReLU layer of knot units), and a multiplier built
//! from two squares via the polarization identity `xy = ((x+y)^2-(x-y)^2)/4`.
//! The full network computes, for each hidden teacher unit, the composed
//! weight `w_hi = sum_k z_k theta_k[h,i]` in a linear first layer (carried
//! through ReLU by the shift trick), multiplies each `w_hi` with `x_i` through
//! the gadgets, sums and applies the genuine ReLU, then applies the readout.
//! The only error source is the multiply gadgets, so the output error is
//! bounded by `readout_row_sum * input_dim * multiply_error(n)`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{forward, MlpModel, MlpSpec, ModelDoc};
use crate::rng::{self, tag, Stream};
use crate::taskfam::{enumerate_masks, sample_constituents, Hyperteacher};
use crate::{Error, Result};

/// Piecewise-linear interpolant of x^2 on [lo, hi] with knots
/// `lo + (hi-lo) * i / n`. Exact at every knot; the error peaks at interval
/// midpoints with value `(hi-lo)^2 / (4 n^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareGadget {
    pub knots: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Interpolant coefficient for knot unit `j`: the slope increments of t^2 on
/// the unit grid are 1/n at the first knot and 2/n afterwards.
fn knot_coefficient(j: usize, n: usize) -> f64 {
    if j == 0 {
        1.0 / n as f64
    } else {
        2.0 / n as f64
    }
}

pub fn build_square(knots: usize, lo: f64, hi: f64) -> SquareGadget {
    assert!(knots >= 1, "need at least one knot unit");
    assert!(lo < hi, "empty interval");
    SquareGadget { knots, lo, hi }
}

impl SquareGadget {
    /// Evaluate through the same ReLU algebra the assembled network uses:
    /// normalize to t in [0,1], knot units relu(t - j/n), interpolate t^2,
    /// then de-normalize with a carried copy of t (= the j=0 unit).
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots;
        let span = self.hi - self.lo;
        let t = (x - self.lo) / span;
        let mut interp = 0.0;
        let mut carried_t = 0.0;
        for j in 0..n {
            let u = (t - j as f64 / n as f64).max(0.0);
            interp += knot_coefficient(j, n) * u;
            if j == 0 {
                carried_t = u;
            }
        }
        span * span * interp + 2.0 * self.lo * span * carried_t + self.lo * self.lo
    }

    /// Analytic sup error on [lo, hi].
    pub fn max_error(&self) -> f64 {
        let span = self.hi - self.lo;
        span * span / (4.0 * (self.knots * self.knots) as f64)
    }

    pub fn knot(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.knots as f64
    }
}

/// Approximate multiplier for |x| <= x_bound, |y| <= y_bound: two square
/// gadgets on [-s, s] with s = x_bound + y_bound, combined by polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplyGadget {
    pub x_bound: f64,
    pub y_bound: f64,
    pub square: SquareGadget,
}

pub fn build_multiply(knots: usize, x_bound: f64, y_bound: f64) -> MultiplyGadget {
    assert!(x_bound > 0.0 && y_bound > 0.0, "bounds must be positive");
    let s = x_bound + y_bound;
    MultiplyGadget {
        x_bound,
        y_bound,
        square: build_square(knots, -s, s),
    }
}

impl MultiplyGadget {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        (self.square.eval(x + y) - self.square.eval(x - y)) / 4.0
    }

    /// Each square errs by at most (2s)^2/(4n^2) = s^2/n^2; the polarization
    /// combination divides the sum of both errors by 4: s^2 / (2 n^2).
    pub fn error_bound(&self) -> f64 {
        let s = self.x_bound + self.y_bound;
        s * s / (2.0 * (self.square.knots * self.square.knots) as f64)
    }

    pub fn half_width(&self) -> f64 {
        self.x_bound + self.y_bound
    }
}

/// Teacher-specific constants entering the error budget and the shift trick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Max over (h, i) of sum_k |theta_k[h,i]|: bound on any composed weight.
    pub weight_bound: f64,
    /// Max over h of sum_k |bias_k[h]|: bound on any composed bias.
    pub bias_bound: f64,
    /// Max over o of sum_h |readout[o,h]|.
    pub readout_row_sum: f64,
    /// Shift constant for carrying values through ReLU: 1 + max of the above
    /// two value bounds.
    pub shift: f64,
}

pub fn bound_constants(teacher: &Hyperteacher) -> Result<BoundConstants> {
    let (h, i) = (teacher.config.hidden_dim, teacher.config.input_dim);
    let mut weight_bound = 0.0f64;
    for r in 0..h {
        for c in 0..i {
            let s: f64 = teacher.modules.iter().map(|m| m[[r, c]].abs()).sum();
            weight_bound = weight_bound.max(s);
        }
    }
    let mut bias_bound = 0.0f64;
    for r in 0..h {
        let s: f64 = teacher.biases.iter().map(|b| b[r].abs()).sum();
        bias_bound = bias_bound.max(s);
    }
    let mut readout_row_sum = 0.0f64;
    for row in teacher.readout.rows() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        readout_row_sum = readout_row_sum.max(s);
    }
    let shift = 1.0 + weight_bound.max(bias_bound);
    let c = BoundConstants {
        weight_bound,
        bias_bound,
        readout_row_sum,
        shift,
    };
    if !(c.weight_bound.is_finite()
        && c.bias_bound.is_finite()
        && c.readout_row_sum.is_finite())
    {
        return Err(Error::NonFinite("teacher bound constants are not finite".into()));
    }
    Ok(c)
}

/// Output error bound for a gadget layer with `knots` units per square:
/// every hidden pre-activation sums `input_dim` multiply errors, ReLU is
/// 1-Lipschitz, and the readout amplifies by at most its largest row sum.
pub fn analytic_bound(constants: &BoundConstants, input_dim: usize, knots: usize) -> f64 {
    let s = constants.weight_bound + 1.0;
    let per_multiply = s * s / (2.0 * (knots * knots) as f64);
    constants.readout_row_sum * input_dim as f64 * per_multiply
}

/// Smallest knot count whose analytic bound meets `epsilon`.
pub fn choose_knots(teacher: &Hyperteacher, epsilon: f64) -> Result<usize> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon {epsilon} must be positive")));
    }
    let constants = bound_constants(teacher)?;
    let i = teacher.config.input_dim;
    if constants.readout_row_sum == 0.0 {
        return Ok(1);
    }
    let s = constants.weight_bound + 1.0;
    let raw = s * (constants.readout_row_sum * i as f64 / (2.0 * epsilon)).sqrt();
    let mut n = (raw.ceil() as usize).max(1);
    while analytic_bound(&constants, i, n) > epsilon {
        n += 1;
    }
    Ok(n)
}

/// An explicit ReLU network approximating a hyperteacher, as a plain MLP over
/// the concatenated input (x, z), plus its compilation metadata.
#[derive(Debug, Clone)]
pub struct ConstructedNet {
    pub model: MlpModel,
    pub epsilon: f64,
    pub knots: usize,
    pub constants: BoundConstants,
    pub analytic_bound: f64,
    /// Hidden layer widths: composition layer, gadget layer, teacher layer.
    pub neuron_counts: Vec<usize>,
}

impl ConstructedNet {
    pub fn hidden_neurons(&self) -> usize {
        self.neuron_counts.iter().sum()
    }
}

/// Compile `teacher` to within `epsilon` sup error over all valid (z, x).
///
/// Layers: (1) linear composition of weights/biases plus x pass-through, all
/// shifted through ReLU; (2) the square-gadget knot units of every
/// (hidden, input) multiply, plus composed-bias carries; (3) per-hidden-unit
/// sums with the genuine ReLU; (4) linear readout.
pub fn build_hyperteacher_net(teacher: &Hyperteacher, epsilon: f64) -> Result<ConstructedNet> {
    let knots = choose_knots(teacher, epsilon)?;
    let constants = bound_constants(teacher)?;
    let cfg = &teacher.config;
    let (m, h, i, o) = (cfg.module_count, cfg.hidden_dim, cfg.input_dim, cfg.output_dim);
    let n = knots;
    let s = constants.weight_bound + 1.0;
    let shift = constants.shift;

    let d0 = i + m;
    let d1 = h * i + h + i;
    let d2 = 2 * n * h * i + h;
    let d3 = h;

    // Layer 1: composed weights w_hi = sum_k z_k theta_k[h,i] (+shift),
    // composed biases (+shift), x pass-through (+1).
    let mut w1 = Array2::<f64>::zeros((d0, d1));
    let mut b1 = Array1::<f64>::zeros(d1);
    let w_col = |hh: usize, ii: usize| hh * i + ii;
    let beta_col = |hh: usize| h * i + hh;
    let x_col = |ii: usize| h * i + h + ii;
    for hh in 0..h {
        for ii in 0..i {
            let col = w_col(hh, ii);
            for k in 0..m {
                w1[[i + k, col]] = teacher.modules[k][[hh, ii]];
            }
            b1[col] = shift;
        }
        let col = beta_col(hh);
        for k in 0..m {
            w1[[i + k, col]] = teacher.biases[k][hh];
        }
        b1[col] = shift;
    }
    for ii in 0..i {
        w1[[ii, x_col(ii)]] = 1.0;
        b1[x_col(ii)] = 1.0;
    }

    // Layer 2: knot units relu(t - j/n) for both squares of every (h, i)
    // multiply, where t = (w +/- x + s) / (2s), plus bias carries.
    let mut w2 = Array2::<f64>::zeros((d1, d2));
    let mut b2 = Array1::<f64>::zeros(d2);
    let unit_col = |hh: usize, ii: usize, sign: usize, j: usize| ((hh * i + ii) * 2 + sign) * n + j;
    let carry_col = |hh: usize| 2 * n * h * i + hh;
    for hh in 0..h {
        for ii in 0..i {
            for (sign, plus) in [(0usize, true), (1usize, false)] {
                let x_gain = if plus { 1.0 } else { -1.0 };
                // t = (w_out - shift +/- (x_out - 1) + s) / (2s)
                let bias_term = (s - shift - x_gain) / (2.0 * s);
                for j in 0..n {
                    let col = unit_col(hh, ii, sign, j);
                    w2[[w_col(hh, ii), col]] = 1.0 / (2.0 * s);
                    w2[[x_col(ii), col]] = x_gain / (2.0 * s);
                    b2[col] = bias_term - j as f64 / n as f64;
                }
            }
        }
        w2[[beta_col(hh), carry_col(hh)]] = 1.0;
    }

    // Layer 3: p_hi = s^2 [ L(t+) - t+ - L(t-) + t- ] summed over i, plus the
    // composed bias, through the genuine ReLU. The carried t is the j = 0
    // knot unit.
    let mut w3 = Array2::<f64>::zeros((d2, d3));
    let mut b3 = Array1::<f64>::zeros(d3);
    let s2 = s * s;
    for hh in 0..h {
        for ii in 0..i {
            for j in 0..n {
                let mut coeff = s2 * knot_coefficient(j, n);
                if j == 0 {
                    coeff -= s2; // subtract the carried t
                }
                w3[[unit_col(hh, ii, 0, j), hh]] = coeff;
                w3[[unit_col(hh, ii, 1, j), hh]] = -coeff;
            }
        }
        w3[[carry_col(hh), hh]] = 1.0;
        b3[hh] = -shift;
    }

    // Layer 4: the readout.
    let mut w4 = Array2::<f64>::zeros((d3, o));
    for oo in 0..o {
        for hh in 0..h {
            w4[[hh, oo]] = teacher.readout[[oo, hh]];
        }
    }
    let b4 = Array1::<f64>::zeros(o);

    let model = MlpModel {
        spec: MlpSpec::new(vec![d0, d1, d2, d3, o]),
        weights: vec![w1, w2, w3, w4],
        biases: vec![b1, b2, b3, b4],
    };
    let bound = analytic_bound(&constants, i, n);
    Ok(ConstructedNet {
        model,
        epsilon,
        knots: n,
        constants,
        analytic_bound: bound,
        neuron_counts: vec![d1, d2, d3],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub samples: usize,
    pub sup_error: f64,
    pub mean_error: f64,
    pub neuron_count: usize,
    pub analytic_bound: f64,
}

/// Sample valid (z, x) pairs and compare the compiled network against the
/// teacher in the sup norm.
pub fn verify_construction(
    net: &ConstructedNet,
    teacher: &Hyperteacher,
    samples: usize,
    rng: &mut Stream,
) -> Result<VerifyReport> {
    if samples == 0 {
        return Err(Error::Empty("samples must be positive".into()));
    }
    let cfg = &teacher.config;
    let masks = enumerate_masks(cfg.module_count, cfg.max_active)?;
    let mut sup = 0.0f64;
    let mut total = 0.0f64;
    let batch = 256usize;
    let mut done = 0usize;
    while done < samples {
        let this = batch.min(samples - done);
        let mut x = Array2::<f64>::zeros((this, cfg.input_dim + cfg.module_count));
        let mut constituents = Vec::with_capacity(this);
        for row in 0..this {
            let z = sample_constituents(cfg, &masks, rng)?;
            for c in 0..cfg.input_dim {
                x[[row, c]] = rng.gen_range(-1.0..=1.0);
            }
            for (c, &v) in z.magnitudes.iter().enumerate() {
                x[[row, cfg.input_dim + c]] = v;
            }
            constituents.push(z);
        }
        let (out, _) = forward(&net.model, &x)?;
        for row in 0..this {
            let xin = x
                .row(row)
                .slice(ndarray::s![..cfg.input_dim])
                .to_owned();
            let want = teacher.evaluate(&constituents[row], &xin)?;
            let diff = out
                .row(row)
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            sup = sup.max(diff);
            total += diff;
        }
        done += this;
    }
    Ok(VerifyReport {
        samples,
        sup_error: sup,
        mean_error: total / samples as f64,
        neuron_count: net.hidden_neurons(),
        analytic_bound: net.analytic_bound,
    })
}

/// Convenience wrapper seeding the verification stream by tag.
pub fn verify_with_seed(
    net: &ConstructedNet,
    teacher: &Hyperteacher,
    samples: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let mut s = rng::stream(seed, tag::VERIFY, 0);
    verify_construction(net, teacher, samples, &mut s)
}

#[derive(Serialize, Deserialize)]
struct ConstructedNetFile {
    version: u32,
    epsilon: f64,
    knots: usize,
    constants: BoundConstants,
    analytic_bound: f64,
    neuron_counts: Vec<usize>,
    model: ModelDoc,
}

pub const NET_FORMAT_VERSION: u32 = 1;

pub fn save_constructed(net: &ConstructedNet, path: &Path) -> Result<()> {
    let doc = ConstructedNetFile {
        version: NET_FORMAT_VERSION,
        epsilon: net.epsilon,
        knots: net.knots,
        constants: net.constants.clone(),
        analytic_bound: net.analytic_bound,
        neuron_counts: net.neuron_counts.clone(),
        model: ModelDoc::from(&net.model),
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_constructed(path: &Path) -> Result<ConstructedNet> {
    let doc: ConstructedNetFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.version != NET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported constructed-net format version {}",
            doc.version
        )));
    }
    Ok(ConstructedNet {
        model: doc.model.try_into()?,
        epsilon: doc.epsilon,
        knots: doc.knots,
        constants: doc.constants,
        analytic_bound: doc.analytic_bound,
        neuron_counts: doc.neuron_counts,
    })
}
