use std::path::PathBuf;

use negdiff_core::chains::{closed_form_calls, cost_warning, write_json_line};
use negdiff_core::eval::{
    compare_strategies, config_label, mean_log_odds, negative_drift_experiment, positive_posteriors, seed_range,
    sweep_k,
};
use negdiff_core::{
    train_denoiser, AnalyticDenoiser, ChainTrace, ConceptId, Denoiser, Engine, GuidanceConfig, Strategy,
    TrainConfig, TrainableDenoiser,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Resolved, ScheduleConfig};
use crate::error::{CliError, CliResult};
use crate::output::{header, json_document, num, write_file, Csv, Meta};

/// What a command produced: the files it wrote and the lines to print.
#[derive(Debug, Default)]
pub struct Summary {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";

#[derive(Serialize)]
struct ModelFileOut<'a> {
    format_version: u32,
    seed: u64,
    schedule: &'a ScheduleConfig,
    train: &'a TrainConfig,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    model: &'a TrainableDenoiser,
}

#[derive(Deserialize)]
struct ModelFileIn {
    format_version: u32,
    model: TrainableDenoiser,
}

/// Reads a trained model and checks it fits the configured world and schedule.
pub fn parse_model(text: &str, r: &Resolved) -> CliResult<TrainableDenoiser> {
    let file: ModelFileIn =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("model file: {e}")))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(CliError::Config(format!(
            "model file: format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let m = file.model;
    if m.dimension() != r.world.dimension() || m.concepts() != r.world.len() || m.total_steps() != r.sched.total_steps()
    {
        return Err(CliError::Config(format!(
            "model file: built for d={}, {} concepts, T={}; config has d={}, {} concepts, T={}",
            m.dimension(),
            m.concepts(),
            m.total_steps(),
            r.world.dimension(),
            r.world.len(),
            r.sched.total_steps()
        )));
    }
    Ok(m)
}

enum Loaded {
    Analytic(AnalyticDenoiser),
    Trained(TrainableDenoiser),
}

impl Loaded {
    fn new(r: &Resolved) -> CliResult<Self> {
        Ok(match &r.model_text {
            Some(text) => Self::Trained(parse_model(text, r)?),
            None => Self::Analytic(AnalyticDenoiser::new(&r.world, &r.sched)?),
        })
    }

    fn get(&self) -> &dyn Denoiser {
        match self {
            Self::Analytic(d) => d,
            Self::Trained(d) => d,
        }
    }
}

fn warn_costs<'a>(configs: impl IntoIterator<Item = &'a GuidanceConfig>, steps: usize) {
    let mut strategies: Vec<Strategy> = configs.into_iter().map(|c| c.strategy).collect();
    strategies.dedup();
    for s in strategies {
        if let Some(msg) = cost_warning(s, steps) {
            eprintln!("warning: {msg}");
        }
    }
}

fn dims_header(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("z{i}")).collect()
}

pub fn sample(r: &Resolved) -> CliResult<Summary> {
    let loaded = Loaded::new(r)?;
    let engine = Engine::new(loaded.get(), &r.world, &r.sched)?;
    let g = &r.config.guidance;
    warn_costs([g], r.sched.total_steps());
    let seeds = seed_range(g.seed, r.config.n_seeds);
    let traces = seeds
        .par_iter()
        .map(|&seed| engine.run(r.positive, &GuidanceConfig { seed, ..g.clone() }))
        .collect::<negdiff_core::Result<Vec<ChainTrace>>>()?;
    let samples: Vec<Vec<f64>> = traces.iter().map(|t| t.final_sample.clone()).collect();
    let post = positive_posteriors(&samples, &r.world, &r.sched, r.positive)?;
    let meta = Meta::new(&r.hash);

    let mut cols = header(&["seed"]);
    cols.extend(dims_header(r.world.dimension()));
    cols.extend(header(&["positive_posterior", "label"]));
    let mut csv = Csv::new(&meta, &cols)?;
    for ((seed, z), p) in seeds.iter().zip(&samples).zip(&post) {
        let mut row = vec![seed.to_string()];
        row.extend(z.iter().map(|v| num(*v)));
        row.push(num(*p));
        row.push(r.world.concept_name(r.world.quantize_to_concept(z)?).to_string());
        csv.row(&row)?;
    }
    let mut summary = Summary::default();
    summary.files.push(write_file(&r.out, "samples.csv", &csv.into_bytes()?)?);

    if r.config.traces {
        let mut buf = Vec::new();
        let io = |e| CliError::Mismatch(format!("trace encoding: {e}"));
        write_json_line(&mut buf, &meta).map_err(io)?;
        for trace in &traces {
            trace.write_jsonl(&mut buf).map_err(io)?;
        }
        summary.files.push(write_file(&r.out, "traces.jsonl", &buf)?);
    }

    let compliance = post.iter().filter(|p| **p > 0.5).count() as f64 / post.len() as f64;
    let log_odds = mean_log_odds(&samples, &r.world, &r.sched, r.positive)?;
    summary.lines.push(format!(
        "{}: {} samples, compliance {compliance:.4}, mean log-odds {log_odds:.4}",
        config_label(g),
        samples.len()
    ));
    Ok(summary)
}

fn timing_csv(meta: &Meta, key: &str, rows: impl Iterator<Item = (String, f64)>) -> CliResult<Vec<u8>> {
    let mut csv = Csv::new(meta, &header(&[key, "seconds"]))?;
    for (k, secs) in rows {
        csv.row(&[k, num(secs)])?;
    }
    csv.into_bytes()
}

pub fn compare(r: &Resolved) -> CliResult<Summary> {
    let loaded = Loaded::new(r)?;
    let engine = Engine::new(loaded.get(), &r.world, &r.sched)?;
    let configs = r.config.comparison_configs();
    warn_costs(&configs, r.sched.total_steps());
    let cmp = compare_strategies(&engine, &configs, r.positive, r.config.n_seeds)?;
    let meta = Meta::new(&r.hash);

    let mut csv = Csv::new(
        &meta,
        &header(&[
            "strategy",
            "samples",
            "compliance_rate",
            "mean_log_odds",
            "mean_positive_posterior",
            "distance_to_target",
            "denoiser_calls",
            "calls_per_sample",
        ]),
    )?;
    for rep in &cmp.reports {
        csv.row(&[
            rep.strategy.clone(),
            rep.samples.to_string(),
            num(rep.compliance_rate),
            num(rep.mean_log_odds),
            num(rep.mean_positive_posterior),
            num(rep.distance_to_target),
            rep.denoiser_calls.to_string(),
            num(rep.calls_per_sample()),
        ])?;
    }

    #[derive(Serialize)]
    struct Body<'a> {
        positive: &'a str,
        first_seed: u64,
        n_seeds: usize,
        configs: &'a [GuidanceConfig],
        reports: &'a [negdiff_core::MetricsReport],
        win_rates: &'a [Vec<f64>],
        p_values: &'a [Vec<f64>],
    }
    let body = Body {
        positive: r.world.concept_name(r.positive),
        first_seed: cmp.seeds[0],
        n_seeds: cmp.seeds.len(),
        configs: &configs,
        reports: &cmp.reports,
        win_rates: &cmp.win_rates,
        p_values: &cmp.p_values,
    };
    let mut summary = Summary::default();
    summary.files.push(write_file(&r.out, "compare.csv", &csv.into_bytes()?)?);
    summary.files.push(write_file(&r.out, "compare.json", &json_document(&meta, &body)?)?);
    let timing = timing_csv(&meta, "strategy", cmp.reports.iter().map(|r| (r.strategy.clone(), r.wall_time)))?;
    summary.files.push(write_file(&r.out, "timing.csv", &timing)?);

    for (i, rep) in cmp.reports.iter().enumerate() {
        summary.lines.push(format!(
            "{:<24} compliance {:.4}  posterior {:.4}  vs {}: win {:.3} (p = {:.3e})",
            rep.strategy, rep.compliance_rate, rep.mean_positive_posterior, cmp.reports[0].strategy, cmp.win_rates[i][0],
            cmp.p_values[i][0]
        ));
    }
    Ok(summary)
}

pub fn sweep(r: &Resolved) -> CliResult<Summary> {
    if r.config.k_values.is_empty() {
        return Err(CliError::Config("k_values must list at least one budget".into()));
    }
    let loaded = Loaded::new(r)?;
    let engine = Engine::new(loaded.get(), &r.world, &r.sched)?;
    let rows = sweep_k(&engine, &r.config.guidance, r.positive, &r.config.k_values, r.config.n_seeds)?;
    let meta = Meta::new(&r.hash);
    let mut csv = Csv::new(
        &meta,
        &header(&[
            "k",
            "compliance_rate",
            "mean_log_odds",
            "mean_positive_posterior",
            "distance_to_target",
            "calls_per_sample",
            "closed_form_calls",
        ]),
    )?;
    let mut summary = Summary::default();
    for row in &rows {
        let rep = &row.report;
        csv.row(&[
            row.k.to_string(),
            num(rep.compliance_rate),
            num(rep.mean_log_odds),
            num(rep.mean_positive_posterior),
            num(rep.distance_to_target),
            num(rep.calls_per_sample()),
            row.closed_form_calls.to_string(),
        ])?;
        summary.lines.push(format!(
            "K={:<4} compliance {:.4}  log-odds {:.4}  distance {:.4}  calls/sample {}  {:.3}s",
            row.k,
            rep.compliance_rate,
            rep.mean_log_odds,
            rep.distance_to_target,
            rep.calls_per_sample(),
            rep.wall_time
        ));
    }
    summary.files.push(write_file(&r.out, "sweep_k.csv", &csv.into_bytes()?)?);
    let timing = timing_csv(&meta, "k", rows.iter().map(|row| (row.k.to_string(), row.report.wall_time)))?;
    summary.files.push(write_file(&r.out, "timing.csv", &timing)?);
    Ok(summary)
}

pub fn hypothesis(r: &Resolved) -> CliResult<Summary> {
    let loaded = Loaded::new(r)?;
    let engine = Engine::new(loaded.get(), &r.world, &r.sched)?;
    let grid = r.config.drift_grid();
    let g = GuidanceConfig { strategy: Strategy::Cfg, ..r.config.guidance.clone() };
    let table = negative_drift_experiment(&engine, &g, r.positive, &grid, r.config.n_seeds)?;
    let dnp = GuidanceConfig { strategy: Strategy::Dnp, ..g.clone() };
    let dnp_labels = table
        .seeds
        .par_iter()
        .map(|&seed| {
            let trace = engine.run(r.positive, &GuidanceConfig { seed, ..dnp.clone() })?;
            Ok(trace.records[0].negative_concept.unwrap_or(ConceptId(0)))
        })
        .collect::<negdiff_core::Result<Vec<_>>>()?;
    let meta = Meta::new(&r.hash);
    let mut cols = header(&["seed"]);
    cols.extend(grid.iter().map(|t| format!("t{t}")));
    cols.push("dnp_negative".into());
    let mut csv = Csv::new(&meta, &cols)?;
    let name = |id: ConceptId| r.world.concept_name(id).to_string();
    for ((seed, labels), n) in table.seeds.iter().zip(&table.labels).zip(&dnp_labels) {
        let mut row = vec![seed.to_string()];
        row.extend(labels.iter().map(|l| name(*l)));
        row.push(name(*n));
        csv.row(&row)?;
    }

    #[derive(Serialize)]
    struct Body<'a> {
        t_grid: &'a [usize],
        first_seed: u64,
        n_seeds: usize,
        non_constant_fraction: f64,
    }
    let body = Body {
        t_grid: &grid,
        first_seed: table.seeds[0],
        n_seeds: table.seeds.len(),
        non_constant_fraction: table.non_constant_fraction,
    };
    let mut summary = Summary::default();
    summary.files.push(write_file(&r.out, "drift.csv", &csv.into_bytes()?)?);
    summary.files.push(write_file(&r.out, "drift.json", &json_document(&meta, &body)?)?);
    summary.lines.push(format!(
        "negative label changes along t = {grid:?} for {:.1}% of {} seeds",
        100.0 * table.non_constant_fraction,
        table.seeds.len()
    ));
    Ok(summary)
}

pub fn train(r: &Resolved) -> CliResult<Summary> {
    let seed = r.config.guidance.seed;
    let train = &r.config.train;
    train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    let model = TrainableDenoiser::for_world(&r.world, &r.sched, train.clone(), seed)?;
    let (model, report) = train_denoiser(model, &r.world, &r.sched, seed.wrapping_add(1))?;
    let file = ModelFileOut {
        format_version: MODEL_FORMAT_VERSION,
        seed,
        schedule: &r.config.schedule,
        train,
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        model: &model,
    };
    let meta = Meta::new(&r.hash);
    let mut summary = Summary::default();
    summary.files.push(write_file(&r.out, MODEL_FILE, &json_document(&meta, &file)?)?);
    summary.lines.push(format!(
        "trained {} parameters for {} iterations: loss {:.4} -> {:.4}",
        model.parameter_count(),
        train.iterations,
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN)
    ));
    Ok(summary)
}

/// Closed-form and instrumented call counts of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct CallCount {
    pub strategy: Strategy,
    pub closed_form: u64,
    pub instrumented: u64,
}

/// Runs one chain per strategy and records both counts. NP is skipped in a
/// single-concept world, which has nothing to use as the negative.
pub fn call_counts(engine: &Engine<'_>, base: &GuidanceConfig, pos: ConceptId) -> CliResult<Vec<CallCount>> {
    let world = engine.world();
    let negative = base.negative.clone().or_else(|| {
        (0..world.len()).find(|i| *i != pos.0).map(|i| world.concept_name(ConceptId(i)).to_string())
    });
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let mut config = GuidanceConfig { strategy, ..base.clone() };
        if strategy == Strategy::Np {
            match &negative {
                Some(n) => config.negative = Some(n.clone()),
                None => continue,
            }
        }
        let trace = engine.run(pos, &config)?;
        rows.push(CallCount {
            strategy,
            closed_form: closed_form_calls(&config, engine.total_steps()),
            instrumented: trace.total_denoiser_calls,
        });
    }
    Ok(rows)
}

pub fn check_counts(rows: &[CallCount]) -> CliResult<()> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.closed_form != r.instrumented)
        .map(|r| format!("{}: closed form {} but counted {}", r.strategy, r.closed_form, r.instrumented))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(bad.join("; ")))
    }
}

pub fn count_calls(r: &Resolved) -> CliResult<Summary> {
    let loaded = Loaded::new(r)?;
    let engine = Engine::new(loaded.get(), &r.world, &r.sched)?;
    warn_costs([&GuidanceConfig::new(Strategy::Cnp, 1.0)], r.sched.total_steps());
    let rows = call_counts(&engine, &r.config.guidance, r.positive)?;
    // printed before the check so a mismatch still shows the whole table
    println!("T = {}, K = {}", r.sched.total_steps(), r.config.guidance.k);
    for row in &rows {
        println!(
            "{:<7} closed form {:>8}  counted {:>8}  {}",
            row.strategy.label(),
            row.closed_form,
            row.instrumented,
            if row.closed_form == row.instrumented { "ok" } else { "MISMATCH" }
        );
    }
    check_counts(&rows)?;
    Ok(Summary::default())
}
