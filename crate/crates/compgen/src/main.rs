//! Command-line front end: family generation, support checks, training runs,
//! probing, teacher compilation, sweeps, and CSV reports.
//!
//! Every leaf field of the experiment config is overridable with a flag of
//! the same dotted name, e.g. `--family.module_count 8`. `COMPGEN_OUT_DIR`
//! sets the default artifact directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use compgen::construct::{
    build_hyperteacher_net, load_constructed, save_constructed, verify_with_seed,
};
use compgen::encodings::Encoder;
use compgen::probe::{decodability_score, ProbeConfig};
use compgen::report::{build_report, write_series, ReportKind};
use compgen::runner::{
    apply_override, config_from_value, run_experiment_full, run_sweep, append_record,
    ExperimentConfig, SweepSpec, CONFIG_FIELDS,
};
use compgen::support::{
    build_support, connected_components, is_compositional, load_support, module_frequencies,
    save_support, SupportGraph,
};
use compgen::taskfam::{enumerate_masks, init_hyperteacher, load_teacher, save_teacher};

fn out_dir_default() -> PathBuf {
    std::env::var_os("COMPGEN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("compgen-out"))
}

fn with_config_flags(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("experiment config JSON; flags override its fields"),
    );
    for (name, help) in CONFIG_FIELDS {
        cmd = cmd.arg(
            Arg::new(*name)
                .long(name)
                .value_name("VALUE")
                .help(*help)
                .action(ArgAction::Set),
        );
    }
    cmd.arg(
        Arg::new("encoding")
            .long("encoding")
            .value_name("VARIANT")
            .help("shorthand for encoding.variant: identity | orthogonal | language | invertible | shuffle | fewshot"),
    )
    .arg(
        Arg::new("set")
            .long("set")
            .value_name("FIELD=VALUE")
            .action(ArgAction::Append)
            .help("additional dotted-name override"),
    )
}

/// Assemble the experiment config from --config plus dotted-name overrides.
fn resolve_config(matches: &ArgMatches) -> anyhow::Result<ExperimentConfig> {
    let base = match matches.get_one::<String>("config") {
        Some(path) => ExperimentConfig::from_file(Path::new(path))
            .with_context(|| format!("loading config {path}"))?,
        None => ExperimentConfig::default(),
    };
    let mut tree = serde_json::to_value(&base)?;
    for (name, _) in CONFIG_FIELDS {
        if let Some(raw) = matches.get_one::<String>(*name) {
            apply_override(&mut tree, name, raw)?;
        }
    }
    if let Some(short) = matches.get_one::<String>("encoding") {
        let variant = compgen::encodings::Variant::parse(short)?;
        apply_override(&mut tree, "encoding.variant", variant.name())?;
    }
    if let Some(sets) = matches.get_many::<String>("set") {
        for kv in sets {
            let (field, value) = kv
                .split_once('=')
                .with_context(|| format!("--set expects FIELD=VALUE, got {kv:?}"))?;
            apply_override(&mut tree, field, value)?;
        }
    }
    Ok(config_from_value(tree)?)
}

fn cli() -> Command {
    Command::new("compgen")
        .about("teacher-student laboratory for compositional generalization")
        .subcommand_required(true)
        .subcommand(
            with_config_flags(Command::new("gen-family").about("generate a teacher and write it as JSON"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("output teacher path")),
        )
        .subcommand(
            with_config_flags(
                Command::new("support-check")
                    .about("build (or load) a training support and print its predicate report"),
            )
            .arg(Arg::new("support").long("support").value_name("FILE").help("check an existing support file"))
            .arg(Arg::new("out").long("out").value_name("FILE").help("write the built support as JSON")),
        )
        .subcommand(
            with_config_flags(Command::new("train").about("run the full experiment pipeline"))
                .arg(Arg::new("out-dir").long("out-dir").value_name("DIR").help("artifact directory")),
        )
        .subcommand(
            with_config_flags(
                Command::new("probe").about("linear-decode task constituents from hidden activations"),
            )
            .arg(Arg::new("model").long("model").value_name("FILE").required(true))
            .arg(Arg::new("teacher").long("teacher").value_name("FILE").required(true))
            .arg(Arg::new("support").long("support").value_name("FILE").required(true))
            .arg(Arg::new("layer").long("layer").value_name("N").help("hidden layer index"))
            .arg(Arg::new("lambda").long("lambda").value_name("X").help("ridge regularizer")),
        )
        .subcommand(
            Command::new("construct")
                .about("compile a teacher into an explicit ReLU network")
                .arg(Arg::new("teacher").long("teacher").value_name("FILE").required(true))
                .arg(Arg::new("eps").long("eps").value_name("X").required(true))
                .arg(Arg::new("out").long("out").value_name("FILE")),
        )
        .subcommand(
            Command::new("verify-construct")
                .about("verify a compiled network against its teacher")
                .arg(Arg::new("net").long("net").value_name("FILE").required(true))
                .arg(Arg::new("teacher").long("teacher").value_name("FILE").required(true))
                .arg(Arg::new("samples").long("samples").value_name("N"))
                .arg(Arg::new("seed").long("seed").value_name("N")),
        )
        .subcommand(
            Command::new("sweep")
                .about("run a sweep config; resumes if interrupted")
                .arg(Arg::new("config").long("config").value_name("FILE").required(true))
                .arg(Arg::new("out-dir").long("out-dir").value_name("DIR"))
                .arg(Arg::new("jobs").long("jobs").value_name("N").help("parallel runs (default: all cores)")),
        )
        .subcommand(
            Command::new("report")
                .about("summarize a runs CSV")
                .arg(Arg::new("csv").long("csv").value_name("FILE").required(true))
                .arg(Arg::new("kind").long("kind").value_name("KIND").required(true)
                    .help("scaling | support | correlation | encodings"))
                .arg(Arg::new("threshold").long("threshold").value_name("X")
                    .help("generalization threshold for scaling (default 0.95)"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("write plot-ready series CSV")),
        )
}

fn main() {
    if let Err(e) = run(cli().get_matches()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(matches: ArgMatches) -> anyhow::Result<()> {
    match matches.subcommand() {
        Some(("gen-family", m)) => gen_family(m),
        Some(("support-check", m)) => support_check(m),
        Some(("train", m)) => train(m),
        Some(("probe", m)) => probe_cmd(m),
        Some(("construct", m)) => construct_cmd(m),
        Some(("verify-construct", m)) => verify_cmd(m),
        Some(("sweep", m)) => sweep_cmd(m),
        Some(("report", m)) => report_cmd(m),
        _ => unreachable!("subcommand required"),
    }
}

fn gen_family(m: &ArgMatches) -> anyhow::Result<()> {
    let config = resolve_config(m)?;
    let teacher = init_hyperteacher(&config.family)?;
    let out = m
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir_default().join("teacher.json"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_teacher(&teacher, &out)?;
    println!(
        "{}",
        json!({
            "teacher": out,
            "module_count": config.family.module_count,
            "max_active": config.family.max_active,
            "input_dim": config.family.input_dim,
            "hidden_dim": config.family.hidden_dim,
            "output_dim": config.family.output_dim,
            "family_seed": config.family.family_seed,
        })
    );
    Ok(())
}

fn support_report_json(
    graph: &SupportGraph,
    heldout_len: usize,
    module_count: usize,
    max_active: usize,
    kind: &str,
) -> anyhow::Result<serde_json::Value> {
    let total = enumerate_masks(module_count, max_active)?.len();
    Ok(json!({
        "kind": kind,
        "module_count": module_count,
        "max_active": max_active,
        "total_masks": total,
        "training_size": graph.len(),
        "heldout_size": heldout_len,
        "is_compositional": is_compositional(graph, module_count),
        "component_count": connected_components(graph).len(),
        "module_frequencies": module_frequencies(graph, module_count),
    }))
}

fn support_check(m: &ArgMatches) -> anyhow::Result<()> {
    if let Some(path) = m.get_one::<String>("support") {
        let (graph, heldout, kind) = load_support(Path::new(path))?;
        let module_count = graph.vertices[0].len();
        let max_active = graph.vertices.iter().map(|v| v.count()).max().unwrap_or(1);
        let report =
            support_report_json(&graph, heldout.len(), module_count, max_active, kind.name())?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let config = resolve_config(m)?;
    let mut stream = compgen::rng::stream(config.run_seed, compgen::rng::tag::SUPPORT, 0);
    let build = build_support(
        &config.support,
        config.family.module_count,
        config.family.max_active,
        &mut stream,
    )?;
    let mut report = support_report_json(
        &build.graph,
        build.heldout.len(),
        config.family.module_count,
        config.family.max_active,
        build.kind.name(),
    )?;
    if let Some(excluded) = build.excluded_module {
        report["excluded_module"] = json!(excluded);
    }
    if let Some(special) = &build.special_modules {
        report["special_modules"] = json!(special);
    }
    if let Some(out) = m.get_one::<String>("out") {
        save_support(
            &build,
            config.family.module_count,
            config.family.max_active,
            Path::new(out),
        )?;
        report["written"] = json!(out);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(m: &ArgMatches) -> anyhow::Result<()> {
    let config = resolve_config(m)?;
    let out_dir = m
        .get_one::<String>("out-dir")
        .map(PathBuf::from)
        .unwrap_or_else(out_dir_default);
    std::fs::create_dir_all(&out_dir)?;

    let artifacts = run_experiment_full(&config);
    let record = &artifacts.record;
    let run_id = &record.run_id;

    if let Some(teacher) = &artifacts.teacher {
        save_teacher(teacher, &out_dir.join(format!("teacher_{run_id}.json")))?;
    }
    if let Some(support) = &artifacts.support {
        save_support(
            support,
            config.family.module_count,
            config.family.max_active,
            &out_dir.join(format!("support_{run_id}.json")),
        )?;
    }
    if let Some(model) = &artifacts.model {
        compgen::nn::save_model(model, &out_dir.join(format!("model_{run_id}.json")))?;
    }
    // Loss trace: step,loss rows appended to the run's own CSV.
    if !artifacts.trace.is_empty() {
        let mut w = csv::Writer::from_path(out_dir.join(format!("loss_{run_id}.csv")))?;
        w.write_record(["step", "loss"])?;
        for p in &artifacts.trace {
            w.write_record([p.step.to_string(), p.loss.to_string()])?;
        }
        w.flush()?;
    }
    append_record(&out_dir.join("runs.csv"), record)?;
    std::fs::write(
        out_dir.join(format!("record_{run_id}.json")),
        serde_json::to_string_pretty(record)?,
    )?;
    println!("{}", serde_json::to_string_pretty(record)?);
    if !record.ok() {
        bail!("run {run_id} failed: {}", record.error);
    }
    Ok(())
}

fn probe_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let config = resolve_config(m)?;
    let model = compgen::nn::load_model(Path::new(m.get_one::<String>("model").unwrap()))?;
    let teacher = load_teacher(Path::new(m.get_one::<String>("teacher").unwrap()))?;
    let (graph, heldout, _) = load_support(Path::new(m.get_one::<String>("support").unwrap()))?;
    let mut probe_cfg: ProbeConfig = config.probe.clone();
    if let Some(layer) = m.get_one::<String>("layer") {
        probe_cfg.layer_index = layer.parse().context("--layer expects an integer")?;
    }
    if let Some(lambda) = m.get_one::<String>("lambda") {
        probe_cfg.lambda = lambda.parse().context("--lambda expects a float")?;
    }
    let encoder = Encoder::build(&config.encoding, &teacher.config)?;
    let report = decodability_score(
        &model,
        &teacher,
        &graph.vertices,
        &heldout,
        &encoder,
        &probe_cfg,
        config.run_seed,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn construct_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let teacher = load_teacher(Path::new(m.get_one::<String>("teacher").unwrap()))?;
    let eps: f64 = m
        .get_one::<String>("eps")
        .unwrap()
        .parse()
        .context("--eps expects a float")?;
    let net = build_hyperteacher_net(&teacher, eps)?;
    let out = m
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir_default().join("net.json"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_constructed(&net, &out)?;
    println!(
        "{}",
        json!({
            "net": out,
            "epsilon": net.epsilon,
            "knots": net.knots,
            "analytic_bound": net.analytic_bound,
            "neuron_counts": net.neuron_counts,
            "hidden_neurons": net.hidden_neurons(),
        })
    );
    Ok(())
}

fn verify_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let net = load_constructed(Path::new(m.get_one::<String>("net").unwrap()))?;
    let teacher = load_teacher(Path::new(m.get_one::<String>("teacher").unwrap()))?;
    let samples: usize = m
        .get_one::<String>("samples")
        .map(|s| s.parse())
        .transpose()
        .context("--samples expects an integer")?
        .unwrap_or(10_000);
    let seed: u64 = m
        .get_one::<String>("seed")
        .map(|s| s.parse())
        .transpose()
        .context("--seed expects an integer")?
        .unwrap_or(0);
    let report = verify_with_seed(&net, &teacher, samples, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let spec = SweepSpec::from_file(Path::new(m.get_one::<String>("config").unwrap()))?;
    let out_dir = m
        .get_one::<String>("out-dir")
        .map(PathBuf::from)
        .unwrap_or_else(out_dir_default);
    let jobs: usize = m
        .get_one::<String>("jobs")
        .map(|s| s.parse())
        .transpose()
        .context("--jobs expects an integer")?
        .unwrap_or(0);
    let outcome = run_sweep(&spec, &out_dir, jobs)?;
    println!(
        "{}",
        json!({
            "out_dir": out_dir,
            "executed": outcome.records.len(),
            "skipped": outcome.skipped,
            "failed": outcome.failed,
        })
    );
    if outcome.failed > 0 {
        bail!("{} sweep cells failed", outcome.failed);
    }
    Ok(())
}

fn report_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let csv_path = Path::new(m.get_one::<String>("csv").unwrap());
    let kind = ReportKind::parse(m.get_one::<String>("kind").unwrap())?;
    let threshold: f64 = m
        .get_one::<String>("threshold")
        .map(|s| s.parse())
        .transpose()
        .context("--threshold expects a float")?
        .unwrap_or(0.95);
    let records = compgen::runner::read_records(csv_path)?;
    let report = build_report(&records, kind, threshold)?;
    print!("{}", report.table);
    if let Some(out) = m.get_one::<String>("out") {
        write_series(&report, Path::new(out))?;
        println!("series written to {out}");
    }
    Ok(())
}
