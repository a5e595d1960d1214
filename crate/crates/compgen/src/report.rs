//! Summaries over the runs CSV: scaling thresholds, support-kind comparisons,
//! the decodability correlation, and the per-encoding matrix. Each report
//! prints a table and returns plot-ready series rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::probe::decode_correlation;
use crate::runner::{training_task_count, RunRecord};
use crate::taskfam::enumerate_masks;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Scaling,
    Support,
    Correlation,
    Encodings,
}

impl ReportKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "scaling" => ReportKind::Scaling,
            "support" => ReportKind::Support,
            "correlation" => ReportKind::Correlation,
            "encodings" => ReportKind::Encodings,
            other => return Err(Error::Config(format!("unknown report kind {other:?}"))),
        })
    }
}

/// A rendered report: a text table plus tidy rows for plotting.
#[derive(Debug, Clone)]
pub struct Report {
    pub table: String,
    pub series_header: Vec<String>,
    pub series: Vec<Vec<String>>,
}

/// Sample mean and standard error; SEM is 0 for a single observation.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 1);
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

pub fn build_report(records: &[RunRecord], kind: ReportKind, threshold: f64) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty("no rows".into()));
    }
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.ok()).collect();
    if ok.is_empty() {
        return Err(Error::Empty("no successful rows".into()));
    }
    match kind {
        ReportKind::Scaling => scaling_report(&ok, threshold),
        ReportKind::Support => support_report(&ok),
        ReportKind::Correlation => correlation_report(&ok),
        ReportKind::Encodings => encodings_report(&ok),
    }
}

/// Per (module_count, max_active): the smallest training-task count whose run
/// reached the generalization threshold.
fn scaling_report(records: &[&RunRecord], threshold: f64) -> Result<Report> {
    let mut groups: BTreeMap<(usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.module_count, r.max_active)).or_default().push(r);
    }
    let mut table = format!(
        "{:>4} {:>4} {:>12} {:>18}\n",
        "M", "K", "total_tasks", "min_train_tasks"
    );
    let mut series = Vec::new();
    for ((m, k), rows) in groups {
        let total = enumerate_masks(m, k)?.len();
        let mut best: Option<usize> = None;
        for r in rows {
            if r.compgen_r2 > threshold {
                let count = training_task_count(m, k, r.holdout_frac)?;
                best = Some(best.map_or(count, |b: usize| b.min(count)));
            }
        }
        let cell = best.map_or("not_reached".to_string(), |b| b.to_string());
        table.push_str(&format!("{m:>4} {k:>4} {total:>12} {cell:>18}\n"));
        series.push(vec![
            m.to_string(),
            k.to_string(),
            total.to_string(),
            cell,
        ]);
    }
    Ok(Report {
        table,
        series_header: vec![
            "M".into(),
            "K".into(),
            "total_tasks".into(),
            "min_train_tasks".into(),
        ],
        series,
    })
}

/// Mean and SEM of held-out R² per support kind.
fn support_report(records: &[&RunRecord]) -> Result<Report> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.support_kind.clone()).or_default().push(r.compgen_r2);
    }
    let mut table = format!(
        "{:>18} {:>4} {:>12} {:>12}\n",
        "support_kind", "n", "compgen_mean", "compgen_sem"
    );
    let mut series = Vec::new();
    for (kind, values) in groups {
        let (mean, sem) = mean_sem(&values);
        table.push_str(&format!(
            "{kind:>18} {:>4} {mean:>12.4} {sem:>12.4}\n",
            values.len()
        ));
        series.push(vec![
            kind,
            values.len().to_string(),
            mean.to_string(),
            sem.to_string(),
        ]);
    }
    Ok(Report {
        table,
        series_header: vec![
            "support_kind".into(),
            "n".into(),
            "compgen_mean".into(),
            "compgen_sem".into(),
        ],
        series,
    })
}

/// Pearson correlation between probe R² and held-out R² across runs.
fn correlation_report(records: &[&RunRecord]) -> Result<Report> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.probe_r2.is_finite() && r.compgen_r2.is_finite())
        .map(|r| (r.probe_r2, r.compgen_r2))
        .collect();
    let c = decode_correlation(&pairs)?;
    let table = format!(
        "runs {}  pearson_r {:.4}  p_value {:.3e}\n",
        c.n, c.pearson_r, c.p_value
    );
    let series = pairs
        .iter()
        .map(|(p, g)| vec![p.to_string(), g.to_string()])
        .collect();
    Ok(Report {
        table,
        series_header: vec!["probe_r2".into(), "compgen_r2".into()],
        series,
    })
}

/// Per-encoding matrix: task decoder, input decoder, and held-out R².
fn encodings_report(records: &[&RunRecord]) -> Result<Report> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.encoding.clone()).or_default().push(r);
    }
    let mut table = format!(
        "{:>18} {:>4} {:>22} {:>22} {:>22}\n",
        "encoding", "n", "task_decoder_r2", "input_decoder_r2", "compgen_r2"
    );
    let mut series = Vec::new();
    for (encoding, rows) in groups {
        let probe: Vec<f64> = rows.iter().map(|r| r.probe_r2).collect();
        let input: Vec<f64> = rows.iter().map(|r| r.input_decoder_r2).collect();
        let gen: Vec<f64> = rows.iter().map(|r| r.compgen_r2).collect();
        let (pm, ps) = mean_sem(&probe);
        let (im, is) = mean_sem(&input);
        let (gm, gs) = mean_sem(&gen);
        table.push_str(&format!(
            "{encoding:>18} {:>4} {:>13.3} ± {:>6.3} {:>13.3} ± {:>6.3} {:>13.3} ± {:>6.3}\n",
            rows.len(),
            pm,
            ps,
            im,
            is,
            gm,
            gs
        ));
        series.push(vec![
            encoding,
            rows.len().to_string(),
            pm.to_string(),
            ps.to_string(),
            im.to_string(),
            is.to_string(),
            gm.to_string(),
            gs.to_string(),
        ]);
    }
    Ok(Report {
        table,
        series_header: vec![
            "encoding".into(),
            "n".into(),
            "task_decoder_mean".into(),
            "task_decoder_sem".into(),
            "input_decoder_mean".into(),
            "input_decoder_sem".into(),
            "compgen_mean".into(),
            "compgen_sem".into(),
        ],
        series,
    })
}

/// Write the plot-ready series as CSV.
pub fn write_series(report: &Report, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&report.series_header)?;
    for row in &report.series {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(
        kind: &str,
        encoding: &str,
        holdout: f64,
        compgen: f64,
        probe: f64,
        input: f64,
    ) -> RunRecord {
        let mut r = run_record_template();
        r.support_kind = kind.into();
        r.encoding = encoding.into();
        r.holdout_frac = holdout;
        r.compgen_r2 = compgen;
        r.probe_r2 = probe;
        r.input_decoder_r2 = input;
        r
    }

    fn run_record_template() -> RunRecord {
        // A real record skeleton via a minimal run is overkill here; build the
        // struct directly.
        RunRecord {
            run_id: "x".into(),
            run_seed: 0,
            module_count: 6,
            max_active: 2,
            input_dim: 8,
            hidden_dim: 8,
            output_dim: 8,
            encoding: "identity".into(),
            r_policy: "family_fixed".into(),
            support_kind: "random".into(),
            holdout_frac: 0.25,
            depth: 4,
            width: 256,
            steps: 100,
            lr: 3e-4,
            wd: 3e-3,
            train_loss_final: 0.1,
            compgen_r2: 0.9,
            probe_layer: 3,
            probe_r2: 0.8,
            input_decoder_r2: 1.0,
            is_compositional: true,
            is_connected: true,
            wall_s: 1.0,
            status: "ok".into(),
            error: String::new(),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(build_report(&[], ReportKind::Support, 0.95).is_err());
    }

    #[test]
    fn support_means_and_sems_match_hand_computation() {
        let rows = vec![
            fake("random", "identity", 0.25, 0.9, 0.8, 1.0),
            fake("random", "identity", 0.25, 0.7, 0.8, 1.0),
            fake("disconnected", "identity", 0.25, 0.2, 0.3, 1.0),
        ];
        let rep = build_report(&rows, ReportKind::Support, 0.95).unwrap();
        // Hand: mean 0.8, sample var 0.02, sem sqrt(0.02/2) = 0.1.
        let random_row = rep.series.iter().find(|r| r[0] == "random").unwrap();
        assert!((random_row[2].parse::<f64>().unwrap() - 0.8).abs() <= 1e-12);
        assert!((random_row[3].parse::<f64>().unwrap() - 0.1).abs() <= 1e-12);
        let disc = rep.series.iter().find(|r| r[0] == "disconnected").unwrap();
        assert!((disc[2].parse::<f64>().unwrap() - 0.2).abs() <= 1e-12);
        assert_eq!(disc[3].parse::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn scaling_reports_threshold_and_sentinel() {
        let mut reached = fake("random", "identity", 0.25, 0.97, 0.9, 1.0);
        reached.module_count = 6;
        reached.max_active = 2;
        let mut missed = fake("random", "identity", 0.25, 0.5, 0.5, 1.0);
        missed.module_count = 8;
        missed.max_active = 2;
        let rep = build_report(&[reached, missed], ReportKind::Scaling, 0.95).unwrap();
        let m6 = rep.series.iter().find(|r| r[0] == "6").unwrap();
        // 21 masks at (6,2); holdout 0.25 trains on ceil(15.75) = 16.
        assert_eq!(m6[3], "16");
        let m8 = rep.series.iter().find(|r| r[0] == "8").unwrap();
        assert_eq!(m8[3], "not_reached");
    }

    #[test]
    fn correlation_report_recovers_perfect_correlation() {
        let rows: Vec<RunRecord> = (0..5)
            .map(|i| {
                let v = i as f64 / 10.0;
                fake("random", "identity", 0.25, v, v, 1.0)
            })
            .collect();
        let rep = build_report(&rows, ReportKind::Correlation, 0.95).unwrap();
        assert!(rep.table.contains("pearson_r 1.0000"));
    }

    #[test]
    fn encodings_report_groups_by_variant() {
        let rows = vec![
            fake("random", "identity", 0.25, 1.0, 0.9, 1.0),
            fake("random", "fewshot", 0.25, 0.9, 0.8, -0.2),
        ];
        let rep = build_report(&rows, ReportKind::Encodings, 0.95).unwrap();
        assert_eq!(rep.series.len(), 2);
        let fs = rep.series.iter().find(|r| r[0] == "fewshot").unwrap();
        assert!((fs[4].parse::<f64>().unwrap() + 0.2).abs() <= 1e-12);
    }

    #[test]
    fn failed_rows_are_excluded_from_aggregates() {
        let mut bad = fake("random", "identity", 0.25, f64::NAN, f64::NAN, f64::NAN);
        bad.status = "failed".into();
        let good = fake("random", "identity", 0.25, 0.5, 0.5, 1.0);
        let rep = build_report(&[bad, good.clone(), good], ReportKind::Support, 0.95).unwrap();
        let row = rep.series.iter().find(|r| r[0] == "random").unwrap();
        assert_eq!(row[1], "2");
    }

    #[test]
    fn series_roundtrips_to_csv() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![fake("random", "identity", 0.25, 0.9, 0.8, 1.0)];
        let rep = build_report(&rows, ReportKind::Support, 0.95).unwrap();
        let path = dir.path().join("series.csv");
        write_series(&rep, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("support_kind,n,"));
    }
}
