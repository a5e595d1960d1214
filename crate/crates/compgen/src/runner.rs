//! Experiment orchestration: configs, the single-run pipeline, sweeps with
//! resume, and CSV persistence.
//!
//! A run is fully determined by its config: the teacher comes from the family
//! seed, everything else derives from `run_seed` through named streams. Sweep
//! cells execute in parallel; CSV appends are serialized through one writer
//! and the manifest records per-cell completion so an interrupted sweep can
//! resume without duplicating rows.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encodings::{Encoder, EncodingSpec, InputDecoderConfig};
use crate::nn::{self, MlpSpec, TrainConfig};
use crate::probe::{self, ProbeConfig};
use crate::rng::{self, mix64, tag};
use crate::support::{
    build_support, is_compositional, is_connected, SupportBuild, SupportSpec,
};
use crate::taskfam::{enumerate_masks, init_hyperteacher, FamilyConfig, Hyperteacher};
use crate::{Error, Result};

/// Student shape knobs; the input width follows from family and encoding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StudentSpec {
    pub depth: usize,
    pub width: usize,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub tasks: usize,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 128,
            batch: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub family: FamilyConfig,
    #[serde(default)]
    pub support: SupportSpec,
    #[serde(default)]
    pub encoding: EncodingSpec,
    #[serde(default)]
    pub student: StudentSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub run_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            support: SupportSpec::default(),
            encoding: EncodingSpec::default(),
            student: StudentSpec::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            run_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.support.validate()?;
        self.encoding.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.student.depth == 0 || self.student.width == 0 {
            return Err(Error::Config("student depth and width must be positive".into()));
        }
        if self.eval.tasks == 0 || self.eval.batch == 0 {
            return Err(Error::Config("eval sizes must be positive".into()));
        }
        if self.probe.layer_index > self.student.depth {
            return Err(Error::Config(format!(
                "probe layer {} exceeds student depth {}",
                self.probe.layer_index, self.student.depth
            )));
        }
        Ok(())
    }

    /// Stable identity: a short hash of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Leaf config fields addressable from the CLI, in `section.field` form.
pub const CONFIG_FIELDS: &[(&str, &str)] = &[
    ("family.module_count", "number of teacher modules"),
    ("family.max_active", "max modules active per task"),
    ("family.input_dim", "teacher input width"),
    ("family.hidden_dim", "teacher hidden width"),
    ("family.output_dim", "teacher output width"),
    ("family.magnitude_grid", "JSON list of allowed magnitudes"),
    ("family.family_seed", "teacher parameter seed"),
    ("support.kind", "support constructor"),
    ("support.holdout_fraction", "fraction of tasks held out"),
    ("support.resample_budget", "constructor retry budget"),
    ("encoding.variant", "task encoding variant"),
    ("encoding.r_policy", "family_fixed or per_sample"),
    ("encoding.coupling_layers", "invertible coupling depth"),
    ("encoding.intervals", "interval count for shuffle"),
    ("encoding.shots", "example pairs for fewshot"),
    ("student.depth", "hidden layers"),
    ("student.width", "hidden units per layer"),
    ("train.learning_rate", "AdamW learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.batch_size", "samples per step"),
    ("train.steps", "optimizer steps"),
    ("train.train_seed", "extra training seed"),
    ("train.snapshot_every", "loss trace cadence"),
    ("probe.layer_index", "hidden layer to probe"),
    ("probe.lambda", "ridge regularizer"),
    ("probe.train_tasks", "probe training tasks"),
    ("probe.eval_tasks", "probe held-out tasks"),
    ("probe.batch_per_task", "inputs averaged per task"),
    ("eval.tasks", "held-out tasks per evaluation"),
    ("eval.batch", "inputs per held-out task"),
    ("run_seed", "run-level seed"),
];

/// Apply one `section.field = value` override onto a config JSON tree.
pub fn apply_override(tree: &mut serde_json::Value, dotted: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut node = &mut *tree;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("config path {dotted:?} does not address an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty config path {dotted:?}")))
}

/// Rebuild a config from JSON after overrides, revalidating.
pub fn config_from_value(tree: serde_json::Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_value(tree)?;
    cfg.validate()?;
    Ok(cfg)
}

/// One experiment's result row. Metrics are NaN when `status` is "failed".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub run_seed: u64,
    pub module_count: usize,
    pub max_active: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub encoding: String,
    pub r_policy: String,
    pub support_kind: String,
    pub holdout_frac: f64,
    pub depth: usize,
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    pub wd: f64,
    pub train_loss_final: f64,
    pub compgen_r2: f64,
    pub probe_layer: usize,
    pub probe_r2: f64,
    pub input_decoder_r2: f64,
    pub is_compositional: bool,
    pub is_connected: bool,
    pub wall_s: f64,
    pub status: String,
    pub error: String,
}

impl RunRecord {
    fn skeleton(config: &ExperimentConfig) -> Self {
        Self {
            run_id: config.run_id(),
            run_seed: config.run_seed,
            module_count: config.family.module_count,
            max_active: config.family.max_active,
            input_dim: config.family.input_dim,
            hidden_dim: config.family.hidden_dim,
            output_dim: config.family.output_dim,
            encoding: config.encoding.variant.name().to_string(),
            r_policy: config.encoding.policy().name().to_string(),
            support_kind: config.support.kind.name().to_string(),
            holdout_frac: config.support.holdout_fraction,
            depth: config.student.depth,
            width: config.student.width,
            steps: config.train.steps,
            lr: config.train.learning_rate,
            wd: config.train.weight_decay,
            train_loss_final: f64::NAN,
            compgen_r2: f64::NAN,
            probe_layer: config.probe.layer_index,
            probe_r2: f64::NAN,
            input_decoder_r2: f64::NAN,
            is_compositional: false,
            is_connected: false,
            wall_s: f64::NAN,
            status: "failed".to_string(),
            error: String::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Everything a completed run can hand to callers that want more than the
/// record (the trained model, the support, the loss trace).
pub struct RunArtifacts {
    pub record: RunRecord,
    pub teacher: Option<Hyperteacher>,
    pub support: Option<SupportBuild>,
    pub model: Option<nn::MlpModel>,
    pub trace: Vec<nn::LossPoint>,
}

/// Run the full pipeline; errors become a failed record rather than
/// propagating, so sweeps keep going.
pub fn run_experiment(config: &ExperimentConfig) -> RunRecord {
    run_experiment_full(config).record
}

pub fn run_experiment_full(config: &ExperimentConfig) -> RunArtifacts {
    let start = Instant::now();
    let mut record = RunRecord::skeleton(config);
    let mut artifacts = RunArtifacts {
        record: RunRecord::skeleton(config),
        teacher: None,
        support: None,
        model: None,
        trace: vec![],
    };
    let teacher = match init_hyperteacher(&config.family) {
        Ok(t) => t,
        Err(e) => {
            record.error = e.to_string();
            artifacts.record = record;
            return artifacts;
        }
    };
    match pipeline(config, &teacher, &mut record) {
        Ok((support, model, trace)) => {
            record.status = "ok".to_string();
            artifacts.support = Some(support);
            artifacts.model = Some(model);
            artifacts.trace = trace;
        }
        Err(e) => {
            record.error = e.to_string();
        }
    }
    record.wall_s = start.elapsed().as_secs_f64();
    artifacts.teacher = Some(teacher);
    artifacts.record = record;
    artifacts
}

fn pipeline(
    config: &ExperimentConfig,
    teacher: &Hyperteacher,
    record: &mut RunRecord,
) -> Result<(SupportBuild, nn::MlpModel, Vec<nn::LossPoint>)> {
    config.validate()?;
    let mut support_stream = rng::stream(config.run_seed, tag::SUPPORT, 0);
    let support = build_support(
        &config.support,
        config.family.module_count,
        config.family.max_active,
        &mut support_stream,
    )?;
    record.is_compositional = is_compositional(&support.graph, config.family.module_count);
    record.is_connected = is_connected(&support.graph);

    let encoder = Encoder::build(&config.encoding, &config.family)?;
    let mlp_spec = MlpSpec::rectangular(
        config.family.input_dim + encoder.dim(),
        config.student.width,
        config.student.depth,
        config.family.output_dim,
    );
    // Training streams derive from the run seed so that changing only
    // run_seed reseeds the whole pipeline.
    let train_cfg = TrainConfig {
        train_seed: mix64(config.run_seed, tag::TRAIN_SEED, config.train.train_seed),
        ..config.train.clone()
    };
    let outcome = nn::train_student(teacher, &support.graph.vertices, &encoder, &mlp_spec, &train_cfg)?;
    record.train_loss_final = outcome.final_loss;

    let compgen = nn::eval_compgen(
        &outcome.model,
        teacher,
        &support.heldout,
        &encoder,
        config.eval.tasks,
        config.eval.batch,
        config.run_seed,
    )?;
    record.compgen_r2 = compgen;

    let probe_report = probe::decodability_score(
        &outcome.model,
        teacher,
        &support.graph.vertices,
        &support.heldout,
        &encoder,
        &config.probe,
        config.run_seed,
    )?;
    record.probe_r2 = probe_report.heldout_r2;

    let input_dec = crate::encodings::input_decoder_score(
        &encoder,
        teacher,
        &InputDecoderConfig::default(),
        config.run_seed,
    )?;
    record.input_decoder_r2 = input_dec;
    Ok((support, outcome.model, outcome.trace))
}

pub const CSV_HEADER: &[&str] = &[
    "run_id",
    "run_seed",
    "M",
    "K",
    "I",
    "H",
    "O",
    "encoding",
    "r_policy",
    "support_kind",
    "holdout_frac",
    "depth",
    "width",
    "steps",
    "lr",
    "wd",
    "train_loss_final",
    "compgen_r2",
    "probe_layer",
    "probe_r2",
    "input_decoder_r2",
    "is_compositional",
    "is_connected",
    "wall_s",
    "status",
    "error",
];

pub fn record_to_row(r: &RunRecord) -> Vec<String> {
    vec![
        r.run_id.clone(),
        r.run_seed.to_string(),
        r.module_count.to_string(),
        r.max_active.to_string(),
        r.input_dim.to_string(),
        r.hidden_dim.to_string(),
        r.output_dim.to_string(),
        r.encoding.clone(),
        r.r_policy.clone(),
        r.support_kind.clone(),
        r.holdout_frac.to_string(),
        r.depth.to_string(),
        r.width.to_string(),
        r.steps.to_string(),
        r.lr.to_string(),
        r.wd.to_string(),
        r.train_loss_final.to_string(),
        r.compgen_r2.to_string(),
        r.probe_layer.to_string(),
        r.probe_r2.to_string(),
        r.input_decoder_r2.to_string(),
        r.is_compositional.to_string(),
        r.is_connected.to_string(),
        r.wall_s.to_string(),
        r.status.clone(),
        r.error.clone(),
    ]
}

pub fn row_to_record(row: &csv::StringRecord) -> Result<RunRecord> {
    if row.len() != CSV_HEADER.len() {
        return Err(Error::Format(format!(
            "CSV row has {} fields, expected {}",
            row.len(),
            CSV_HEADER.len()
        )));
    }
    let f = |i: usize| -> &str { row.get(i).unwrap_or("") };
    let parse_f64 = |i: usize| -> Result<f64> {
        f(i).parse::<f64>()
            .map_err(|e| Error::Format(format!("column {}: {e}", CSV_HEADER[i])))
    };
    let parse_usize = |i: usize| -> Result<usize> {
        f(i).parse::<usize>()
            .map_err(|e| Error::Format(format!("column {}: {e}", CSV_HEADER[i])))
    };
    Ok(RunRecord {
        run_id: f(0).to_string(),
        run_seed: f(1)
            .parse()
            .map_err(|e| Error::Format(format!("run_seed: {e}")))?,
        module_count: parse_usize(2)?,
        max_active: parse_usize(3)?,
        input_dim: parse_usize(4)?,
        hidden_dim: parse_usize(5)?,
        output_dim: parse_usize(6)?,
        encoding: f(7).to_string(),
        r_policy: f(8).to_string(),
        support_kind: f(9).to_string(),
        holdout_frac: parse_f64(10)?,
        depth: parse_usize(11)?,
        width: parse_usize(12)?,
        steps: parse_usize(13)?,
        lr: parse_f64(14)?,
        wd: parse_f64(15)?,
        train_loss_final: parse_f64(16)?,
        compgen_r2: parse_f64(17)?,
        probe_layer: parse_usize(18)?,
        probe_r2: parse_f64(19)?,
        input_decoder_r2: parse_f64(20)?,
        is_compositional: f(21) == "true",
        is_connected: f(22) == "true",
        wall_s: parse_f64(23)?,
        status: f(24).to_string(),
        error: f(25).to_string(),
    })
}

/// Append one record, creating the file with a header when absent.
pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    w.write_record(record_to_row(record))?;
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected CSV header".into()));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        out.push(row_to_record(&row?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted config field, e.g. `support.holdout_fraction`.
    pub field: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_cell_cap")]
    pub cell_cap: usize,
}

fn default_repeats() -> usize {
    3
}

fn default_cell_cap() -> usize {
    4096
}

impl SweepSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if spec.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        Ok(spec)
    }
}

/// Cartesian expansion of the axes times `repeats` seeds per cell.
pub fn expand_sweep(spec: &SweepSpec) -> Result<Vec<ExperimentConfig>> {
    let mut cells = 1usize;
    for axis in &spec.axes {
        if axis.values.is_empty() {
            return Err(Error::Config(format!("axis {} has no values", axis.field)));
        }
        cells = cells.saturating_mul(axis.values.len());
    }
    cells = cells.saturating_mul(spec.repeats);
    if cells > spec.cell_cap {
        return Err(Error::Config(format!(
            "sweep would expand to {cells} runs, cap is {}",
            spec.cell_cap
        )));
    }
    let base_tree = serde_json::to_value(&spec.base)?;
    let mut configs = Vec::with_capacity(cells);
    let mut index = vec![0usize; spec.axes.len()];
    loop {
        let mut tree = base_tree.clone();
        for (a, axis) in spec.axes.iter().enumerate() {
            let value = axis.values[index[a]].clone();
            let raw = serde_json::to_string(&value)?;
            apply_override(&mut tree, &axis.field, &raw)?;
        }
        for rep in 0..spec.repeats {
            let mut cfg = config_from_value(tree.clone())?;
            cfg.run_seed = mix64(spec.base.run_seed, tag::REPEAT, rep as u64);
            configs.push(cfg);
        }
        // Advance the mixed-radix counter.
        let mut pos = spec.axes.len();
        loop {
            if pos == 0 {
                return Ok(configs);
            }
            pos -= 1;
            index[pos] += 1;
            if index[pos] < spec.axes[pos].values.len() {
                break;
            }
            index[pos] = 0;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SweepManifest {
    pub cells: Vec<CellStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStatus {
    pub run_id: String,
    pub status: String,
    #[serde(default)]
    pub error: String,
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn completed(&self, run_id: &str) -> bool {
        self.cells.iter().any(|c| c.run_id == run_id)
    }
}

pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub skipped: usize,
    pub failed: usize,
}

/// Execute a sweep into `out_dir` (runs.csv + manifest.json), skipping cells
/// already recorded in the manifest. `jobs = 0` uses all cores.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("runs.csv");
    let manifest_path = out_dir.join("manifest.json");
    let manifest = SweepManifest::load(&manifest_path)?;

    let configs = expand_sweep(spec)?;
    let pending: Vec<&ExperimentConfig> = configs
        .iter()
        .filter(|c| !manifest.completed(&c.run_id()))
        .collect();
    let skipped = configs.len() - pending.len();

    let sink = Mutex::new((manifest, Vec::<RunRecord>::new()));
    let body = |config: &&ExperimentConfig| {
        let record = run_experiment(config);
        let mut guard = sink.lock().expect("sweep sink poisoned");
        let (manifest, records) = &mut *guard;
        // Commit the row first, then mark the cell done; a crash in between
        // re-runs the cell, it never loses one.
        if let Err(e) = append_record(&csv_path, &record) {
            eprintln!("failed to append {}: {e}", record.run_id);
            return;
        }
        manifest.cells.push(CellStatus {
            run_id: record.run_id.clone(),
            status: record.status.clone(),
            error: record.error.clone(),
        });
        if let Err(e) = manifest.save(&manifest_path) {
            eprintln!("failed to save manifest: {e}");
        }
        records.push(record);
    };

    if jobs == 1 {
        pending.iter().for_each(body);
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs) // 0 means default
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| pending.par_iter().for_each(body));
    }

    let (_, records) = sink.into_inner().expect("sweep sink poisoned");
    let failed = records.iter().filter(|r| !r.ok()).count();
    Ok(SweepOutcome {
        records,
        skipped,
        failed,
    })
}

/// Matches the builder's rounding: training-set size for partitioning kinds.
pub fn training_task_count(module_count: usize, max_active: usize, holdout: f64) -> Result<usize> {
    let total = enumerate_masks(module_count, max_active)?.len();
    Ok((((1.0 - holdout) * total as f64).ceil() as usize).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::Variant;
    use crate::support::SupportKind;

    fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            family: FamilyConfig {
                module_count: 4,
                max_active: 2,
                input_dim: 3,
                hidden_dim: 4,
                output_dim: 3,
                family_seed: 7,
                ..FamilyConfig::default()
            },
            support: SupportSpec {
                kind: SupportKind::Random,
                holdout_fraction: 0.3,
                resample_budget: 10_000,
            },
            encoding: EncodingSpec::new(Variant::Identity),
            student: StudentSpec { depth: 2, width: 16 },
            train: TrainConfig {
                steps: 50,
                batch_size: 16,
                snapshot_every: 10,
                ..TrainConfig::default()
            },
            probe: ProbeConfig {
                layer_index: 1,
                train_tasks: 24,
                eval_tasks: 12,
                batch_per_task: 8,
                ..ProbeConfig::default()
            },
            eval: EvalConfig { tasks: 8, batch: 16 },
            run_seed: 3,
        }
    }

    #[test]
    fn run_id_is_stable_and_sensitive() {
        let a = quick_config();
        let b = quick_config();
        assert_eq!(a.run_id(), b.run_id());
        let mut c = quick_config();
        c.run_seed = 4;
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn zero_step_run_produces_untrained_metrics_without_error() {
        let mut cfg = quick_config();
        cfg.train.steps = 0;
        let record = run_experiment(&cfg);
        assert_eq!(record.status, "ok", "error: {}", record.error);
        assert!(record.compgen_r2.is_finite());
        assert!(record.train_loss_final.is_nan(), "no step ever ran");
    }

    #[test]
    fn identical_configs_reproduce_identical_metrics() {
        let cfg = quick_config();
        let a = run_experiment(&cfg);
        let b = run_experiment(&cfg);
        assert_eq!(a.compgen_r2.to_bits(), b.compgen_r2.to_bits());
        assert_eq!(a.probe_r2.to_bits(), b.probe_r2.to_bits());
        assert_eq!(a.train_loss_final.to_bits(), b.train_loss_final.to_bits());
        assert_eq!(a.input_decoder_r2.to_bits(), b.input_decoder_r2.to_bits());

        let mut other = cfg.clone();
        other.run_seed = 999;
        let c = run_experiment(&other);
        assert_ne!(a.compgen_r2.to_bits(), c.compgen_r2.to_bits());
    }

    #[test]
    fn failed_run_is_recorded_not_propagated() {
        let mut cfg = quick_config();
        // Disconnected support with module_count < 2 * max_active is
        // infeasible by construction.
        cfg.support.kind = SupportKind::Disconnected;
        cfg.family.module_count = 3;
        let record = run_experiment(&cfg);
        assert_eq!(record.status, "failed");
        assert!(record.error.contains("disconnected"));
        assert!(record.compgen_r2.is_nan());
    }

    #[test]
    fn csv_roundtrip_preserves_records_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let cfg = quick_config();
        let record = run_experiment(&cfg);
        append_record(&path, &record).unwrap();
        append_record(&path, &record).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        for b in &back {
            assert_eq!(b.run_id, record.run_id);
            assert_eq!(b.compgen_r2.to_bits(), record.compgen_r2.to_bits());
            assert_eq!(b.wall_s.to_bits(), record.wall_s.to_bits());
        }
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut tree = serde_json::to_value(quick_config()).unwrap();
        apply_override(&mut tree, "support.holdout_fraction", "0.5").unwrap();
        apply_override(&mut tree, "student.width", "32").unwrap();
        apply_override(&mut tree, "encoding.variant", "orthogonal").unwrap();
        apply_override(&mut tree, "family.magnitude_grid", "[0.5, 1.0]").unwrap();
        let cfg = config_from_value(tree).unwrap();
        assert_eq!(cfg.support.holdout_fraction, 0.5);
        assert_eq!(cfg.student.width, 32);
        assert_eq!(cfg.encoding.variant, Variant::Orthogonal);
        assert_eq!(cfg.family.magnitude_grid, vec![0.5, 1.0]);
    }

    #[test]
    fn sweep_expansion_counts_and_caps() {
        let spec = SweepSpec {
            base: quick_config(),
            axes: vec![
                SweepAxis {
                    field: "support.holdout_fraction".into(),
                    values: vec![0.1.into(), 0.5.into(), 0.9.into()],
                },
                SweepAxis {
                    field: "student.width".into(),
                    values: vec![8.into(), 16.into()],
                },
            ],
            repeats: 3,
            cell_cap: 4096,
        };
        let configs = expand_sweep(&spec).unwrap();
        assert_eq!(configs.len(), 3 * 2 * 3);
        let ids: std::collections::HashSet<String> =
            configs.iter().map(|c| c.run_id()).collect();
        assert_eq!(ids.len(), configs.len(), "run ids must be distinct");

        let capped = SweepSpec {
            cell_cap: 5,
            ..spec
        };
        assert!(expand_sweep(&capped).is_err());
    }

    #[test]
    fn sweep_runs_resume_idempotently() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = quick_config();
        base.train.steps = 10;
        base.probe.train_tasks = 12;
        base.probe.eval_tasks = 8;
        base.eval.tasks = 4;
        let spec = SweepSpec {
            base,
            axes: vec![SweepAxis {
                field: "support.holdout_fraction".into(),
                values: vec![0.2.into(), 0.4.into()],
            }],
            repeats: 2,
            cell_cap: 100,
        };
        let first = run_sweep(&spec, dir.path(), 1).unwrap();
        assert_eq!(first.records.len(), 4);
        assert_eq!(first.skipped, 0);
        let rows = read_records(&dir.path().join("runs.csv")).unwrap();
        assert_eq!(rows.len(), 4);

        // Re-running the complete sweep adds zero rows.
        let second = run_sweep(&spec, dir.path(), 1).unwrap();
        assert_eq!(second.records.len(), 0);
        assert_eq!(second.skipped, 4);
        let rows2 = read_records(&dir.path().join("runs.csv")).unwrap();
        assert_eq!(rows2.len(), 4);
    }

    #[test]
    fn training_task_count_matches_builder_rounding() {
        // (M=8, K=3) has 92 masks; holdout 0.25 trains on ceil(69.0) = 69.
        assert_eq!(training_task_count(8, 3, 0.25).unwrap(), 69);
    }
}
