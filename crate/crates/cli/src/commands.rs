use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fes_core::datagen::class_histogram;
use fes_core::engine::{
    build_scenario, init_model, trace_csv, Engine, ProxyEvaluator, RunSummary, Scenario,
};
use fes_core::model::{FedModel, LayerPlan};
use fes_core::planner::{co_plan, evaluate_plans, terraced_plans, PlanOutcome, RoundCost};
use fes_core::report::time_to_accuracy;
use fes_core::selector::{select_pool, SelectorConfig};
use fes_core::{Rng, Sample};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

/// Create the output directory and echo the effective config into it.
fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    write_string(&cfg.output_dir.join("config.toml"), &cfg.to_toml()?)
}

fn scenario(cfg: &ExperimentConfig, rng: &Rng) -> Result<Scenario> {
    Ok(build_scenario(
        &cfg.task,
        &cfg.partition,
        cfg.model.public_per_class,
        cfg.engine.validation_fraction,
        rng,
    )?)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ManifestRow<'a> {
    client_id: usize,
    samples: Vec<usize>,
    gold: &'a [usize],
}

#[derive(Serialize)]
struct ClientStats {
    client_id: usize,
    samples: usize,
    gold: usize,
    class_histogram: Vec<usize>,
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    prepare_out(cfg)?;
    let sc = scenario(cfg, &Rng::new(cfg.seed))?;
    let out = &cfg.output_dir;
    let paths = [
        out.join("dataset.jsonl"),
        out.join("manifest.jsonl"),
        out.join("stats.json"),
    ];
    write_jsonl(&paths[0], &sc.train.samples)?;
    write_jsonl(
        &paths[1],
        sc.shards.iter().map(|s| {
            let mut samples: Vec<usize> = s.all_ids().collect();
            samples.sort_unstable();
            ManifestRow {
                client_id: s.client_id,
                samples,
                gold: &s.gold,
            }
        }),
    )?;
    let stats: Vec<ClientStats> = sc
        .shards
        .iter()
        .map(|s| ClientStats {
            client_id: s.client_id,
            samples: s.len(),
            gold: s.gold.len(),
            class_histogram: class_histogram(s, &sc.train),
        })
        .collect();
    write_string(&paths[2], &serde_json::to_string_pretty(&stats)?)?;
    info!(
        "{} samples over {} clients, {} gold",
        sc.train.len(),
        sc.shards.len(),
        sc.gold_count()
    );
    Ok(paths.to_vec())
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

pub fn read_embeddings(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path)
        .with_context(|| format!("cannot open embeddings file {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed sample record", path.display(), i + 1))?;
        out.push(s);
    }
    if out.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    let dim = out[0].embedding.len();
    if let Some(s) = out.iter().find(|s| s.embedding.len() != dim) {
        bail!(
            "{}: sample {} has dimension {}, expected {dim}",
            path.display(),
            s.id,
            s.embedding.len()
        );
    }
    Ok(out)
}

/// Writes `selection.csv` with one row per greedy step.
pub fn select(
    samples: &[Sample],
    sel_cfg: &SelectorConfig,
    cfg: &ExperimentConfig,
) -> Result<PathBuf> {
    sel_cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    let positions: Vec<usize> = (0..samples.len()).collect();
    let sel = select_pool(
        &positions,
        |i| samples[i].embedding.clone(),
        sel_cfg,
        cfg.engine.execution,
    )?;
    let path = cfg.output_dir.join("selection.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["step", "id", "score"])?;
    for (step, (pos, score)) in sel.ids.iter().zip(&sel.scores).enumerate() {
        w.write_record([
            step.to_string(),
            samples[*pos].id.to_string(),
            score.to_string(),
        ])?;
    }
    w.flush()?;
    info!("selected {} of {} samples", sel.ids.len(), samples.len());
    Ok(path)
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn cost_row(plan: &LayerPlan, accuracy: f64, cost: &RoundCost, admissible: bool) -> Vec<String> {
    vec![
        plan.to_string(),
        accuracy.to_string(),
        cost.time().to_string(),
        cost.compute_time.to_string(),
        cost.comm_time.to_string(),
        cost.traffic_bytes.to_string(),
        cost.energy.to_string(),
        admissible.to_string(),
    ]
}

const FRONTIER_HEADER: [&str; 8] = [
    "plan",
    "accuracy",
    "time",
    "compute_time",
    "comm_time",
    "traffic_bytes",
    "energy",
    "admissible",
];

/// Plans on a proxy draw of the task, seeded apart from the run itself.
pub fn plan(cfg: &ExperimentConfig, exhaustive: bool) -> Result<PlanOutcome> {
    prepare_out(cfg)?;
    let search = cfg.planner.unwrap_or_default();
    search.validate()?;
    let rng = Rng::new(cfg.seed).split("proxy");
    let sc = scenario(cfg, &rng)?;
    let model = init_model(&sc, &cfg.model, &rng)?;
    let shapes = model.layer_shapes();
    let eval = ProxyEvaluator::new(&sc, model, &cfg.engine, search.probe_rounds, cfg.seed);
    let out = co_plan(&shapes, &search, &cfg.engine.cost, &eval)?;

    let mut w = csv::Writer::from_writer(create(&cfg.output_dir.join("frontier.csv"))?);
    w.write_record(FRONTIER_HEADER)?;
    if exhaustive {
        let all = evaluate_plans(
            &shapes,
            &terraced_plans(shapes.len()),
            &cfg.engine.cost,
            search.batches,
            &eval,
            cfg.engine.execution,
        );
        for (p, acc, cost) in &all {
            w.write_record(cost_row(p, *acc, cost, *acc >= out.threshold))?;
        }
    } else {
        for p in &out.evaluated {
            w.write_record(cost_row(&p.plan, p.accuracy, &p.cost, p.admissible))?;
        }
    }
    w.flush()?;
    write_string(
        &cfg.output_dir.join("plan.json"),
        &serde_json::to_string_pretty(&out)?,
    )?;
    info!("planner used {} proxy runs", eval.evaluations());
    Ok(out)
}

pub fn describe_plan(out: &PlanOutcome) -> String {
    let c = &out.cost;
    let mut s = format!(
        "plan {}: accuracy {:.4} (all-Full {:.4}, threshold {:.4})\n\
         per-round cost: time {:.4} = compute {:.4} + comm {:.4}; traffic {} bytes; energy {:.4}",
        out.plan,
        out.accuracy,
        out.full_accuracy,
        out.threshold,
        c.time(),
        c.compute_time,
        c.comm_time,
        c.traffic_bytes,
        c.energy
    );
    if let Some(w) = &out.warning {
        s.push_str(&format!("\nwarning: {w}"));
    }
    s
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if cfg.engine.plan.is_none() && cfg.planner.is_some() {
        let out = plan(&cfg, false)?;
        info!("planned {}", out.plan);
        cfg.engine.plan = Some(out.plan);
    }
    prepare_out(&cfg)?;
    let rng = Rng::new(cfg.seed);
    let sc = scenario(&cfg, &rng)?;
    let model = init_model(&sc, &cfg.model, &rng)?;
    let engine = Engine::new(cfg.engine.clone(), &sc, model.num_layers(), cfg.seed)?;
    let out = engine.run(model)?;
    let dir = &cfg.output_dir;
    write_string(&dir.join("trace.csv"), &trace_csv(&out.trace))?;
    write_string(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&out.summary)?,
    )?;
    out.model
        .save(&dir.join("model.ckpt"))
        .with_context(|| format!("cannot write {}", dir.join("model.ckpt").display()))?;
    Ok(out.summary)
}

pub fn describe_run(s: &RunSummary) -> String {
    format!(
        "{} rounds, plan {}: final test accuracy {:.4} (best {:.4}, zero-shot {:.4}); {} pseudo labels; \
         sim time {:.2}, traffic {} bytes, energy {:.2}",
        s.rounds,
        s.plan,
        s.final_test_acc,
        s.best_test_acc,
        s.zero_shot_test_acc,
        s.total_pseudo,
        s.totals.time,
        s.totals.traffic_bytes,
        s.totals.energy
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TraceRow {
    round: usize,
    sim_time: f64,
    test_acc: f64,
    val_acc: f64,
    total_pseudo: usize,
    traffic_bytes: u64,
    energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub rounds: usize,
    pub final_acc: f64,
    pub best_acc: f64,
    pub time_to_target: Option<f64>,
    pub traffic_bytes: u64,
    pub energy: f64,
    /// Baseline time-to-target over this trace's.
    pub speedup: Option<f64>,
}

/// Display name: the run directory for `.../<run>/trace.csv`, else the file stem.
fn trace_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "trace" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn read_trace(path: &Path) -> Result<Vec<fes_core::engine::RoundTrace>> {
    let file = File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in csv::Reader::from_reader(file)
        .deserialize::<TraceRow>()
        .enumerate()
    {
        let r = rec.with_context(|| format!("{}: malformed row {}", path.display(), i + 1))?;
        rows.push(fes_core::engine::RoundTrace {
            round: r.round,
            sim_time: r.sim_time,
            test_acc: r.test_acc,
            val_acc: r.val_acc,
            total_pseudo: r.total_pseudo,
            pseudo_correct_frac: 0.0,
            active_config: None,
            aug_e: None,
            traffic_bytes: r.traffic_bytes,
            energy: r.energy,
        });
    }
    if rows.is_empty() {
        bail!("{} holds no rounds", path.display());
    }
    Ok(rows)
}

/// One row per trace; speedups are relative to `traces[baseline]`.
pub fn report(traces: &[PathBuf], target: f64, baseline: usize) -> Result<Vec<ReportRow>> {
    if baseline >= traces.len() {
        bail!(
            "--baseline {baseline} is out of range for {} traces",
            traces.len()
        );
    }
    let mut rows = Vec::with_capacity(traces.len());
    for path in traces {
        let trace = read_trace(path)?;
        let last = trace.last().expect("non-empty");
        rows.push(ReportRow {
            name: trace_name(path),
            rounds: last.round,
            final_acc: last.test_acc,
            best_acc: trace
                .iter()
                .map(|r| r.test_acc)
                .fold(f64::NEG_INFINITY, f64::max),
            time_to_target: time_to_accuracy(&trace, target),
            traffic_bytes: last.traffic_bytes,
            energy: last.energy,
            speedup: None,
        });
    }
    let base = rows[baseline].time_to_target;
    for r in &mut rows {
        r.speedup = base
            .zip(r.time_to_target)
            .map(|(b, t)| if t > 0.0 { b / t } else { f64::INFINITY });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

pub fn format_report(rows: &[ReportRow], target: f64) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>9} {:>9} {:>10} {:>14} {:>10} {:>8}\n",
        "config",
        "rounds",
        "final",
        "best",
        format!("t@{target}"),
        "traffic",
        "energy",
        "speedup"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>6} {:>9.4} {:>9.4} {:>10} {:>14} {:>10.2} {:>8}\n",
            r.name,
            r.rounds,
            r.final_acc,
            r.best_acc,
            opt(r.time_to_target),
            r.traffic_bytes,
            r.energy,
            opt(r.speedup)
        ));
    }
    s
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.flush()?)
}

/// Defaults for the standalone `select` command come from the config's
/// diversity filter when it has one.
pub fn selector_from(cfg: &ExperimentConfig) -> SelectorConfig {
    match &cfg.engine.filter {
        fes_core::engine::Filter::Diversity(s) => *s,
        _ => SelectorConfig::default(),
    }
}
