//! Hyperteacher task families: generation of teacher parameters, sampling of
//! task constituents and inputs, and evaluation of the composition operator.
//!
//! A task family has `module_count` weight modules of which at most
//! `max_active` are combined into any single task. A task is identified by a
//! binary activity mask plus per-active-module magnitudes drawn from a fixed
//! grid; its labeling function is a one-hidden-layer ReLU network whose hidden
//! weights and biases are the magnitude-weighted sum of the active modules.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{mat_from_nested, mat_to_nested};
use crate::rng::{self, tag, Stream};
use crate::{Error, Result};

/// Configuration of one task family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FamilyConfig {
    /// Number of teacher modules.
    pub module_count: usize,
    /// Maximum number of modules active in a single task.
    pub max_active: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Allowed nonzero magnitudes, strictly within (0, 1].
    #[serde(default = "default_magnitude_grid")]
    pub magnitude_grid: Vec<f64>,
    pub family_seed: u64,
}

fn default_magnitude_grid() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            module_count: 6,
            max_active: 2,
            input_dim: 8,
            hidden_dim: 8,
            output_dim: 8,
            magnitude_grid: default_magnitude_grid(),
            family_seed: 0,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.module_count == 0 {
            return Err(Error::Config("module_count must be positive".into()));
        }
        if self.module_count > Mask::MAX_MODULES {
            return Err(Error::Config(format!(
                "module_count {} exceeds supported maximum {}",
                self.module_count,
                Mask::MAX_MODULES
            )));
        }
        if self.max_active == 0 || self.max_active > self.module_count {
            return Err(Error::Config(format!(
                "max_active must satisfy 1 <= {} <= module_count {}",
                self.max_active, self.module_count
            )));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if self.magnitude_grid.is_empty() {
            return Err(Error::Config("magnitude_grid must be non-empty".into()));
        }
        if self.magnitude_grid.iter().any(|&v| v <= 0.0 || v > 1.0) {
            return Err(Error::Config(
                "magnitude_grid values must lie strictly within (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A binary module-activity mask over up to 64 modules.
///
/// Bit `i` marks module `i` as active. Ordering compares the bit sequence
/// `b_0 b_1 ... b_{M-1}` lexicographically, which keeps enumeration output
/// stable regardless of construction order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: u64,
    len: usize,
}

impl Mask {
    pub const MAX_MODULES: usize = 64;

    pub fn empty(len: usize) -> Self {
        assert!(len >= 1 && len <= Self::MAX_MODULES);
        Self { bits: 0, len }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut m = Self::empty(len);
        for &i in indices {
            assert!(i < len, "module index {i} out of range {len}");
            m.bits |= 1 << i;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn contains(&self, module: usize) -> bool {
        module < self.len && (self.bits >> module) & 1 == 1
    }

    /// Number of active modules.
    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.contains(i))
    }

    pub fn shares_module(&self, other: &Mask) -> bool {
        self.bits & other.bits != 0
    }

    /// Bit-string with module 0 leftmost, e.g. `"0110"`.
    pub fn to_bitstring(&self) -> String {
        (0..self.len)
            .map(|i| if self.contains(i) { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let len = s.len();
        if len == 0 || len > Self::MAX_MODULES {
            return Err(Error::Format(format!("bad mask length {len}")));
        }
        let mut m = Self::empty(len);
        for (i, c) in s.chars().enumerate() {
            match c {
                '1' => m.bits |= 1 << i,
                '0' => {}
                other => return Err(Error::Format(format!("bad mask character {other:?}"))),
            }
        }
        Ok(m)
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({})", self.to_bitstring())
    }
}

impl Ord for Mask {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Lexicographic on the bit sequence: reversing the bits makes module 0
        // the most significant position.
        let a = self.bits.reverse_bits();
        let b = other.bits.reverse_bits();
        a.cmp(&b).then(self.len.cmp(&other.len))
    }
}

impl PartialOrd for Mask {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Mask::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// Which modules a task activates and how strongly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConstituents {
    pub mask: Mask,
    /// Length `module_count`; zero exactly where the mask is zero.
    pub magnitudes: Vec<f64>,
}

impl TaskConstituents {
    pub fn validate(&self, config: &FamilyConfig) -> Result<()> {
        if self.mask.len() != config.module_count || self.magnitudes.len() != config.module_count {
            return Err(Error::Shape(format!(
                "constituents sized for {} modules, family has {}",
                self.magnitudes.len(),
                config.module_count
            )));
        }
        let active = self.mask.count();
        if active == 0 || active > config.max_active {
            return Err(Error::Config(format!(
                "mask popcount {} outside [1, {}]",
                active, config.max_active
            )));
        }
        for (i, &v) in self.magnitudes.iter().enumerate() {
            if self.mask.contains(i) {
                if !config.magnitude_grid.iter().any(|&g| g == v) {
                    return Err(Error::Config(format!(
                        "magnitude {v} at module {i} is not a grid value"
                    )));
                }
            } else if v != 0.0 {
                return Err(Error::Config(format!(
                    "inactive module {i} has nonzero magnitude {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The generative teacher: per-module hidden weights and biases plus a shared
/// readout.
#[derive(Debug, Clone)]
pub struct Hyperteacher {
    pub config: FamilyConfig,
    /// `module_count` matrices of shape (hidden_dim, input_dim).
    pub modules: Vec<Array2<f64>>,
    /// `module_count` vectors of length hidden_dim.
    pub biases: Vec<Array1<f64>>,
    /// Shape (output_dim, hidden_dim).
    pub readout: Array2<f64>,
}

/// Standard deviation for module entries: sqrt(sqrt(3) / input_dim).
pub fn module_std(input_dim: usize) -> f64 {
    (3.0_f64.sqrt() / input_dim as f64).sqrt()
}

/// Standard deviation for readout entries: sqrt(sqrt(3) / hidden_dim).
pub fn readout_std(hidden_dim: usize) -> f64 {
    (3.0_f64.sqrt() / hidden_dim as f64).sqrt()
}

/// Draw a teacher deterministically from `config.family_seed`.
///
/// Module and readout entries are truncated-normal (rejection outside two
/// standard deviations); bias entries are uniform on [0, 0.5].
pub fn init_hyperteacher(config: &FamilyConfig) -> Result<Hyperteacher> {
    config.validate()?;
    let (h, i, o) = (config.hidden_dim, config.input_dim, config.output_dim);
    let w_std = module_std(i);
    let r_std = readout_std(h);

    let mut modules = Vec::with_capacity(config.module_count);
    let mut biases = Vec::with_capacity(config.module_count);
    for k in 0..config.module_count {
        let mut ws = rng::stream(config.family_seed, tag::TEACHER_MODULE, k as u64);
        modules.push(Array2::from_shape_fn((h, i), |_| {
            rng::truncated_normal(&mut ws, w_std)
        }));
        let mut bs = rng::stream(config.family_seed, tag::TEACHER_BIAS, k as u64);
        biases.push(Array1::from_shape_fn(h, |_| bs.gen_range(0.0..0.5)));
    }
    let mut rs = rng::stream(config.family_seed, tag::TEACHER_READOUT, 0);
    let readout = Array2::from_shape_fn((o, h), |_| rng::truncated_normal(&mut rs, r_std));

    Ok(Hyperteacher {
        config: config.clone(),
        modules,
        biases,
        readout,
    })
}

impl Hyperteacher {
    /// Magnitude-weighted sum of the active modules' weights and biases.
    ///
    /// Accumulation iterates modules in ascending index order; both the
    /// single-input and batch evaluation paths go through this, so labels are
    /// bit-identical across them.
    pub fn compose(&self, z: &TaskConstituents) -> Result<(Array2<f64>, Array1<f64>)> {
        z.validate(&self.config)?;
        let (h, i) = (self.config.hidden_dim, self.config.input_dim);
        let mut w = Array2::<f64>::zeros((h, i));
        let mut b = Array1::<f64>::zeros(h);
        for k in z.mask.active() {
            let m = z.magnitudes[k];
            w.scaled_add(m, &self.modules[k]);
            b.scaled_add(m, &self.biases[k]);
        }
        Ok((w, b))
    }

    /// Evaluate the composed task function on one input.
    pub fn evaluate(&self, z: &TaskConstituents, x: &Array1<f64>) -> Result<Array1<f64>> {
        let (w, b) = self.compose(z)?;
        self.apply_composed(&w, &b, x)
    }

    /// Apply an already-composed task network to one input.
    pub fn apply_composed(
        &self,
        w: &Array2<f64>,
        b: &Array1<f64>,
        x: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input length {} != input_dim {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let mut hid = w.dot(x) + b;
        hid.mapv_inplace(|v| v.max(0.0));
        Ok(self.readout.dot(&hid))
    }
}

/// One labeled batch for a single task.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    /// (batch, input_dim), entries in [-1, 1].
    pub inputs: Array2<f64>,
    /// (batch, output_dim).
    pub labels: Array2<f64>,
    pub constituents: TaskConstituents,
}

/// All masks with 1..=max_active active modules, in lexicographic bit-string
/// order. The count is `sum_{j=1..=max_active} C(module_count, j)`.
pub fn enumerate_masks(module_count: usize, max_active: usize) -> Result<Vec<Mask>> {
    if module_count == 0 || module_count > Mask::MAX_MODULES {
        return Err(Error::Config(format!("bad module_count {module_count}")));
    }
    if max_active == 0 || max_active > module_count {
        return Err(Error::Config(format!(
            "max_active {max_active} outside [1, {module_count}]"
        )));
    }
    let mut masks = Vec::new();
    // Depth-first over ascending index combinations of each size.
    let mut stack: Vec<usize> = Vec::with_capacity(max_active);
    fn rec(
        module_count: usize,
        max_active: usize,
        start: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Mask>,
    ) {
        if !stack.is_empty() {
            out.push(Mask::from_indices(module_count, stack));
        }
        if stack.len() == max_active {
            return;
        }
        for i in start..module_count {
            stack.push(i);
            rec(module_count, max_active, i + 1, stack, out);
            stack.pop();
        }
    }
    rec(module_count, max_active, 0, &mut stack, &mut masks);
    masks.sort();
    Ok(masks)
}

/// Draw constituents: a uniform mask from `masks`, with each active module's
/// magnitude uniform over the grid.
pub fn sample_constituents(
    config: &FamilyConfig,
    masks: &[Mask],
    rng: &mut Stream,
) -> Result<TaskConstituents> {
    if masks.is_empty() {
        return Err(Error::Empty("mask set is empty".into()));
    }
    let mask = masks[rng.gen_range(0..masks.len())];
    let mut magnitudes = vec![0.0; config.module_count];
    for k in mask.active() {
        let g = rng.gen_range(0..config.magnitude_grid.len());
        magnitudes[k] = config.magnitude_grid[g];
    }
    Ok(TaskConstituents { mask, magnitudes })
}

/// Sample one task uniformly from `masks` and label a fresh batch of uniform
/// inputs with it.
pub fn sample_task_batch(
    teacher: &Hyperteacher,
    masks: &[Mask],
    batch: usize,
    rng: &mut Stream,
) -> Result<TaskBatch> {
    let constituents = sample_constituents(&teacher.config, masks, rng)?;
    let i = teacher.config.input_dim;
    let inputs = Array2::from_shape_fn((batch, i), |_| rng.gen_range(-1.0..=1.0));
    let (w, b) = teacher.compose(&constituents)?;
    let mut labels = Array2::<f64>::zeros((batch, teacher.config.output_dim));
    for (r, x) in inputs.rows().into_iter().enumerate() {
        let y = teacher.apply_composed(&w, &b, &x.to_owned())?;
        labels.row_mut(r).assign(&y);
    }
    Ok(TaskBatch {
        inputs,
        labels,
        constituents,
    })
}

/// On-disk teacher document with row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct TeacherFile {
    version: u32,
    config: FamilyConfig,
    modules: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    readout: Vec<Vec<f64>>,
}

pub const TEACHER_FORMAT_VERSION: u32 = 1;

pub fn teacher_to_json(teacher: &Hyperteacher) -> Result<String> {
    let doc = TeacherFile {
        version: TEACHER_FORMAT_VERSION,
        config: teacher.config.clone(),
        modules: teacher.modules.iter().map(mat_to_nested).collect(),
        biases: teacher.biases.iter().map(|b| b.to_vec()).collect(),
        readout: mat_to_nested(&teacher.readout),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn save_teacher(teacher: &Hyperteacher, path: &Path) -> Result<()> {
    std::fs::write(path, teacher_to_json(teacher)?)?;
    Ok(())
}

pub fn load_teacher(path: &Path) -> Result<Hyperteacher> {
    teacher_from_json(&std::fs::read_to_string(path)?)
}

pub fn teacher_from_json(text: &str) -> Result<Hyperteacher> {
    let doc: TeacherFile = serde_json::from_str(text)?;
    if doc.version != TEACHER_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported teacher format version {}",
            doc.version
        )));
    }
    doc.config.validate()?;
    let (m, h, i, o) = (
        doc.config.module_count,
        doc.config.hidden_dim,
        doc.config.input_dim,
        doc.config.output_dim,
    );
    if doc.modules.len() != m || doc.biases.len() != m {
        return Err(Error::Format("module count mismatch".into()));
    }
    let mut modules = Vec::with_capacity(m);
    for rows in &doc.modules {
        let mat = mat_from_nested(rows)?;
        if mat.dim() != (h, i) {
            return Err(Error::Format("module shape mismatch".into()));
        }
        modules.push(mat);
    }
    let mut biases = Vec::with_capacity(m);
    for b in &doc.biases {
        if b.len() != h {
            return Err(Error::Format("bias length mismatch".into()));
        }
        biases.push(Array1::from_vec(b.clone()));
    }
    let readout = mat_from_nested(&doc.readout)?;
    if readout.dim() != (o, h) {
        return Err(Error::Format("readout shape mismatch".into()));
    }
    let teacher = Hyperteacher {
        config: doc.config,
        modules,
        biases,
        readout,
    };
    if teacher
        .modules
        .iter()
        .any(|w| w.iter().any(|v| !v.is_finite()))
        || teacher.readout.iter().any(|v| !v.is_finite())
        || teacher.biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("teacher file contains non-finite entries".into()));
    }
    Ok(teacher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_config() -> FamilyConfig {
        FamilyConfig {
            module_count: 3,
            max_active: 2,
            input_dim: 2,
            hidden_dim: 2,
            output_dim: 2,
            family_seed: 42,
            ..FamilyConfig::default()
        }
    }

    /// Independent scalar-loop oracle for the composition operator.
    fn teacher_oracle(t: &Hyperteacher, z: &TaskConstituents, x: &[f64]) -> Vec<f64> {
        let (h, i, o) = (t.config.hidden_dim, t.config.input_dim, t.config.output_dim);
        let mut hidden = vec![0.0f64; h];
        for r in 0..h {
            let mut acc = 0.0;
            for k in 0..t.config.module_count {
                if z.magnitudes[k] != 0.0 {
                    let mut dot = 0.0;
                    for c in 0..i {
                        dot += t.modules[k][[r, c]] * x[c];
                    }
                    acc += z.magnitudes[k] * (dot + t.biases[k][r]);
                }
            }
            hidden[r] = acc.max(0.0);
        }
        let mut out = vec![0.0f64; o];
        for r in 0..o {
            for c in 0..h {
                out[r] += t.readout[[r, c]] * hidden[c];
            }
        }
        out
    }

    #[test]
    fn init_rejects_bad_configs() {
        let mut c = small_config();
        c.module_count = 0;
        assert!(init_hyperteacher(&c).is_err());
        let mut c = small_config();
        c.input_dim = 0;
        assert!(init_hyperteacher(&c).is_err());
        let mut c = small_config();
        c.magnitude_grid = vec![1.5];
        assert!(init_hyperteacher(&c).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let c = small_config();
        let a = init_hyperteacher(&c).unwrap();
        let b = init_hyperteacher(&c).unwrap();
        assert_eq!(a.modules, b.modules);
        assert_eq!(a.biases, b.biases);
        assert_eq!(a.readout, b.readout);
    }

    #[test]
    fn module_std_matches_target() {
        // For input_dim = 16 the target standard deviation is ~0.3290.
        assert!((module_std(16) - 0.3290).abs() < 5e-4);
        let c = FamilyConfig {
            module_count: 2,
            max_active: 1,
            input_dim: 16,
            hidden_dim: 64,
            output_dim: 4,
            family_seed: 9,
            ..FamilyConfig::default()
        };
        let t = init_hyperteacher(&c).unwrap();
        let entries: Vec<f64> = t.modules.iter().flat_map(|m| m.iter().copied()).collect();
        let n = entries.len() as f64;
        let mean = entries.iter().sum::<f64>() / n;
        let var = entries.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // Truncation at 2 sigma shrinks the standard deviation by ~5%.
        let observed = var.sqrt();
        let untruncated = module_std(16);
        assert!(observed < untruncated * 1.02 && observed > untruncated * 0.85);
    }

    #[test]
    fn bias_entries_are_uniform_on_half_interval() {
        let c = FamilyConfig {
            module_count: 50,
            max_active: 1,
            input_dim: 2,
            hidden_dim: 2000,
            output_dim: 1,
            family_seed: 5,
            ..FamilyConfig::default()
        };
        let t = init_hyperteacher(&c).unwrap();
        let entries: Vec<f64> = t.biases.iter().flat_map(|b| b.iter().copied()).collect();
        assert_eq!(entries.len(), 100_000);
        assert!(entries.iter().all(|&v| (0.0..0.5).contains(&v)));
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        assert!((mean - 0.25).abs() < 0.005, "bias mean {mean}");
    }

    #[test]
    fn single_module_task_reduces_to_that_module() {
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let z = TaskConstituents {
            mask: Mask::from_indices(3, &[1]),
            magnitudes: vec![0.0, 1.0, 0.0],
        };
        let x = Array1::from_vec(vec![0.3, -0.7]);
        let got = t.evaluate(&z, &x).unwrap();
        let mut hid = t.modules[1].dot(&x) + &t.biases[1];
        hid.mapv_inplace(|v| v.max(0.0));
        let want = t.readout.dot(&hid);
        assert_eq!(got, want);
    }

    #[test]
    fn zero_input_isolates_biases() {
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let z = TaskConstituents {
            mask: Mask::from_indices(3, &[0, 2]),
            magnitudes: vec![0.5, 0.0, 0.9],
        };
        let x = Array1::zeros(2);
        let got = t.evaluate(&z, &x).unwrap();
        let mut hid = &t.biases[0] * 0.5 + &(&t.biases[2] * 0.9);
        hid.mapv_inplace(|v| v.max(0.0));
        let want = t.readout.dot(&hid);
        let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-15);
    }

    #[test]
    fn evaluate_matches_scalar_oracle() {
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let mut r = stream(7, 0x99, 0);
        let masks = enumerate_masks(3, 2).unwrap();
        for _ in 0..50 {
            let z = sample_constituents(&c, &masks, &mut r).unwrap();
            let x: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..=1.0)).collect();
            let got = t.evaluate(&z, &Array1::from_vec(x.clone())).unwrap();
            let want = teacher_oracle(&t, &z, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "oracle mismatch: {g} vs {w}");
            }
        }
    }

    #[test]
    fn mask_enumeration_counts_and_order() {
        assert_eq!(enumerate_masks(8, 2).unwrap().len(), 36);
        assert_eq!(enumerate_masks(4, 4).unwrap().len(), 15);
        let single = enumerate_masks(1, 1).unwrap();
        assert_eq!(single, vec![Mask::from_indices(1, &[0])]);
        assert!(enumerate_masks(3, 4).is_err());

        let masks = enumerate_masks(3, 2).unwrap();
        let strings: Vec<String> = masks.iter().map(|m| m.to_bitstring()).collect();
        let mut sorted = strings.clone();
        sorted.sort();
        assert_eq!(strings, sorted, "masks not in lexicographic order");
        assert_eq!(strings.len(), 6);
    }

    #[test]
    fn batch_sampling_is_deterministic_and_bounded() {
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let masks = enumerate_masks(3, 2).unwrap();
        let a = sample_task_batch(&t, &masks, 32, &mut stream(1, 0x50, 0)).unwrap();
        let b = sample_task_batch(&t, &masks, 32, &mut stream(1, 0x50, 0)).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.constituents, b.constituents);
        assert!(a.inputs.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(sample_task_batch(&t, &[], 8, &mut stream(1, 0x50, 0)).is_err());
    }

    #[test]
    fn input_law_moments() {
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let masks = enumerate_masks(3, 2).unwrap();
        let mut r = stream(11, 0x51, 0);
        let mut count = 0usize;
        let mut sum = 0.0;
        for _ in 0..100 {
            let b = sample_task_batch(&t, &masks, 1000, &mut r).unwrap();
            count += b.inputs.len();
            sum += b.inputs.iter().sum::<f64>();
        }
        assert_eq!(count, 200_000);
        assert!((sum / count as f64).abs() < 0.01);
    }

    #[test]
    fn single_task_scaling_is_homogeneous_in_preactivation() {
        // For a single-module task, scaling the magnitude scales the
        // pre-activation linearly; the output is the readout of the scaled
        // ReLU.
        let c = small_config();
        let t = init_hyperteacher(&c).unwrap();
        let x = Array1::from_vec(vec![0.4, 0.2]);
        let alpha = 0.8;
        let z = TaskConstituents {
            mask: Mask::from_indices(3, &[1]),
            magnitudes: vec![0.0, alpha, 0.0],
        };
        let got = t.evaluate(&z, &x).unwrap();
        let mut pre = t.modules[1].dot(&x) + &t.biases[1];
        pre.mapv_inplace(|v| (alpha * v).max(0.0));
        let want = t.readout.dot(&pre);
        let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-15);
    }

    #[test]
    fn teacher_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        let t = init_hyperteacher(&small_config()).unwrap();
        save_teacher(&t, &path).unwrap();
        let back = load_teacher(&path).unwrap();
        assert_eq!(t.config, back.config);
        assert_eq!(t.modules, back.modules);
        assert_eq!(t.biases, back.biases);
        assert_eq!(t.readout, back.readout);
    }

    #[test]
    fn injectivity_witness_over_teacher_draws() {
        // Statistical witness for the injectivity of the composition
        // operator: for random z != z' the empirical sup over inputs of the
        // output difference should exceed 1e-6 for (nearly) every teacher
        // draw. Failures are logged, not hard-failed.
        let masks = enumerate_masks(4, 2).unwrap();
        let mut witnessed = 0usize;
        let draws = 100usize;
        for t in 0..draws {
            let c = FamilyConfig {
                module_count: 4,
                max_active: 2,
                input_dim: 3,
                hidden_dim: 4,
                output_dim: 3,
                family_seed: 1000 + t as u64,
                ..FamilyConfig::default()
            };
            let teacher = init_hyperteacher(&c).unwrap();
            let mut r = stream(t as u64, 0x55, 0);
            let z1 = sample_constituents(&c, &masks, &mut r).unwrap();
            let z2 = loop {
                let cand = sample_constituents(&c, &masks, &mut r).unwrap();
                if cand != z1 {
                    break cand;
                }
            };
            let (w1, b1) = teacher.compose(&z1).unwrap();
            let (w2, b2) = teacher.compose(&z2).unwrap();
            let mut sup = 0.0f64;
            for _ in 0..1000 {
                let x = Array1::from_shape_fn(3, |_| r.gen_range(-1.0..=1.0));
                let y1 = teacher.apply_composed(&w1, &b1, &x).unwrap();
                let y2 = teacher.apply_composed(&w2, &b2, &x).unwrap();
                sup = sup.max((&y1 - &y2).iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
            if sup > 1e-6 {
                witnessed += 1;
            } else {
                eprintln!(
                    "injectivity witness miss: seed {} z {:?} vs {:?} sup {sup:.2e}",
                    c.family_seed, z1.mask, z2.mask
                );
            }
        }
        println!("injectivity witnessed for {witnessed}/{draws} teacher draws");
    }

    #[test]
    fn constituents_validation_catches_violations() {
        let c = small_config();
        let bad_inactive = TaskConstituents {
            mask: Mask::from_indices(3, &[0]),
            magnitudes: vec![1.0, 0.3, 0.0],
        };
        assert!(bad_inactive.validate(&c).is_err());
        let bad_grid = TaskConstituents {
            mask: Mask::from_indices(3, &[0]),
            magnitudes: vec![0.55, 0.0, 0.0],
        };
        assert!(bad_grid.validate(&c).is_err());
        let too_many = TaskConstituents {
            mask: Mask::from_indices(3, &[0, 1, 2]),
            magnitudes: vec![1.0, 1.0, 1.0],
        };
        assert!(too_many.validate(&c).is_err());
    }
}
