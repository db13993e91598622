//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use negdiff_core::chains::{chain_rng, closed_form_calls};
use negdiff_core::eval::{compare_strategies, negative_drift_experiment, wasserstein1};
use negdiff_core::guidance::{
    cfg_combine, dns_combine, noise_stats, normalize_noise, np_combine, schedule_k, schedule_k_raw,
    DEFAULT_SCHEDULE_OFFSET,
};
use negdiff_core::{
    AnalyticDenoiser, ChainTrace, ConceptId, ConceptWorld, Condition, Denoiser, Engine, Error, GuidanceConfig,
    SamplerKind, ScheduleKind, Strategy, TrainableDenoiser, VarianceSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn manifest_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn adversarial() -> ConceptWorld {
    ConceptWorld::from_json_file(manifest_path("../core/fixtures/adversarial.json")).unwrap()
}

fn standard_normal() -> ConceptWorld {
    ConceptWorld::from_json_file(manifest_path("../core/fixtures/standard_normal_1d.json")).unwrap()
}

fn cosine(t: usize) -> VarianceSchedule {
    VarianceSchedule::new(ScheduleKind::Cosine, t, 1e-4, 0.02).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn score_consistency() -> Outcome {
    let world = adversarial();
    let sched = cosine(40);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z = gaussian_vec(&mut rng, 2, 1.5);
        let t = rng.random_range(1..=40);
        let c = match rng.random_range(0..=world.len()) {
            0 => Condition::Null,
            i => Condition::Concept(ConceptId(i - 1)),
        };
        let eps = world.analytic_epsilon(&sched, &z, t, c).unwrap();
        let scale = (1.0 - sched.alpha_bar(t).unwrap()).sqrt();
        let fd: Vec<f64> = (0..2)
            .map(|i| {
                let (mut up, mut down) = (z.clone(), z.clone());
                up[i] += h;
                down[i] -= h;
                let f = |p: &[f64]| world.marginal_log_density(&sched, p, t, c).unwrap();
                -scale * (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&eps, &fd));
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 triples (limit 1e-4)"))
}

fn distribution_recovery() -> Outcome {
    let world = standard_normal();
    let sched = cosine(200);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let config = GuidanceConfig::new(Strategy::Cfg, 1.0).with_sampler(SamplerKind::Ddpm);
    let xs: Vec<f64> = (0..10_000u64)
        .into_par_iter()
        .map(|seed| engine.run_unconditional(&config, &mut chain_rng(seed)).unwrap()[0])
        .collect();
    let w1 = wasserstein1(&xs, &world, ConceptId(0)).unwrap();
    check(w1 <= 0.05, format!("W1 = {w1:.4} over 10000 DDPM samples, T=200 (limit 0.05)"))
}

fn single_step_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for s in [1.5, 3.0, 7.5] {
        for _ in 0..1000 {
            let d = rng.random_range(1..=8);
            let u = gaussian_vec(&mut rng, d, 1.0);
            let p = gaussian_vec(&mut rng, d, 1.0);
            let answer = np_combine(&dns_combine(&p, &u, s).unwrap(), &p, s).unwrap();
            worst = worst.max(rel_err(&answer, &cfg_combine(&u, &p, s * s - s + 1.0).unwrap()));
        }
    }
    let world = adversarial();
    let sched = cosine(40);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let mut live_steps = 0;
    for s in [1.5, 3.0, 7.5] {
        for seed in 0..10 {
            let config = GuidanceConfig::new(Strategy::Answer, s).with_normalize(false).with_seed(seed);
            let trace = engine.run_answer_with(ConceptId(0), &config, &mut chain_rng(seed), |_| 1).unwrap();
            for r in trace.records.iter().filter(|r| r.k_t == 1) {
                let cfg = cfg_combine(r.eps_uncond.as_ref().unwrap(), &r.eps_cond, s * s - s + 1.0).unwrap();
                worst = worst.max(rel_err(&r.eps_combined, &cfg));
                live_steps += 1;
            }
        }
    }
    check(
        worst <= 1e-10 && live_steps > 0,
        format!("max relative error {worst:.2e} over 3000 random pairs and {live_steps} live steps (limit 1e-10)"),
    )
}

fn scheduler_shape() -> Outcome {
    let mut failures = Vec::new();
    for total in [2, 10, 40, 41, 1000] {
        for k in [0, 1, 5, 17] {
            if schedule_k(k, total, total) != k {
                failures.push(format!("schedule_k({k}, {total}, {total}) != {k}"));
            }
            if schedule_k(k, total / 2, total) != 0 {
                failures.push(format!("schedule_k({k}, {}, {total}) != 0", total / 2));
            }
            let raw: Vec<f64> =
                (total / 2 + 1..=total).map(|t| schedule_k_raw(k, t, total, DEFAULT_SCHEDULE_OFFSET)).collect();
            if raw.windows(2).any(|w| w[1] < w[0]) {
                failures.push(format!("raw values decrease for K={k}, T={total}"));
            }
        }
    }
    let raw = schedule_k_raw(5, 30, 40, DEFAULT_SCHEDULE_OFFSET);
    let spot = schedule_k(5, 30, 40);
    if (raw - 3.75).abs() > 1e-12 || spot != 4 {
        failures.push(format!("spot value: raw {raw}, rounded {spot}"));
    }
    check(failures.is_empty(), if failures.is_empty() { format!("endpoints, monotone shape, spot 3.75 -> {spot}") } else { failures.join("; ") })
}

fn normalization_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(2..=16);
        let eps: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0) * rng.random_range(0.1..4.0)).collect();
        let reference: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0) + 0.5).collect();
        let out = normalize_noise(&eps, &reference, 7).unwrap();
        let (m, s) = noise_stats(&out);
        let (mr, sr) = noise_stats(&reference);
        worst = worst.max((m - mr).abs()).max((s - sr).abs());
    }
    let degenerate = matches!(normalize_noise(&[0.3; 4], &[1.0, 2.0, 3.0, 4.0], 3), Err(Error::DegenerateNoise { .. }));
    check(
        worst <= 1e-9 && degenerate,
        format!("max stat deviation {worst:.2e} over 100 pairs (limit 1e-9); degenerate input rejected: {degenerate}"),
    )
}

fn call_accounting() -> Outcome {
    let world = adversarial();
    let mut checked = 0;
    let mut failures = Vec::new();
    for t in [4, 20, 40] {
        let sched = cosine(t);
        let den = AnalyticDenoiser::new(&world, &sched).unwrap();
        let engine = Engine::new(&den, &world, &sched).unwrap();
        for k in [0, 2, 5] {
            for strategy in Strategy::ALL {
                let mut config = GuidanceConfig::new(strategy, 2.0).with_k(k).with_seed(11);
                config.negative = Some("main".into());
                let counted = engine.run(ConceptId(0), &config).unwrap().total_denoiser_calls;
                let t64 = t as u64;
                let by_hand = match strategy {
                    Strategy::Cfg | Strategy::Np | Strategy::Dns => 2 * t64,
                    Strategy::Dnp => 4 * t64,
                    Strategy::Cnp => t64 * t64 + 3 * t64,
                    Strategy::Answer => closed_form_calls(&config, t),
                };
                if counted != by_hand {
                    failures.push(format!("{strategy} T={t} K={k}: counted {counted}, expected {by_hand}"));
                }
                checked += 1;
            }
        }
    }
    check(failures.is_empty(), if failures.is_empty() { format!("{checked} (strategy, T, K) cases exact") } else { failures.join("; ") })
}

fn collapse_to_cfg() -> Outcome {
    let world = adversarial();
    let sched = cosine(40);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let mut compared = 0;
    for sampler in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        for seed in 0..20 {
            let base = GuidanceConfig::new(Strategy::Cfg, 2.0).with_seed(seed).with_sampler(sampler);
            let cfg = engine.run(ConceptId(0), &base).unwrap();
            let zero_k = GuidanceConfig { strategy: Strategy::Answer, ..base.clone() };
            let no_window = zero_k.clone().with_k(5).with_window(1.0);
            for config in [zero_k, no_window] {
                let answer = engine.run(ConceptId(0), &config).unwrap();
                if !same_steps(&answer, &cfg) {
                    return Err(format!("trace differs from CFG at seed {seed} ({sampler:?})"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} traces bitwise identical to CFG (K=0 and closed window, DDIM and DDPM)"))
}

fn same_steps(a: &ChainTrace, b: &ChainTrace) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            bits(&x.z_before) == bits(&y.z_before)
                && bits(&x.z_after) == bits(&y.z_after)
                && bits(&x.eps_combined) == bits(&y.eps_combined)
        })
        && bits(&a.final_sample) == bits(&b.final_sample)
}

fn dns_negativity() -> Outcome {
    let world = adversarial();
    let sched = cosine(40);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let configs = [GuidanceConfig::new(Strategy::Cfg, 2.0), GuidanceConfig::new(Strategy::Dns, 2.0)];
    let cmp = compare_strategies(&engine, &configs, ConceptId(0), 500).unwrap();
    let (cfg, dns) = (cmp.reports[0].mean_positive_posterior, cmp.reports[1].mean_positive_posterior);
    let p = cmp.p_values[0][1];
    check(dns < cfg && p < 0.05, format!("mean posterior DNS {dns:.4} < CFG {cfg:.4}; sign test p = {p:.2e}"))
}

fn comparative_improvement() -> Outcome {
    let world = adversarial();
    let sched = cosine(40);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let configs = [
        GuidanceConfig::new(Strategy::Cfg, 2.0),
        GuidanceConfig::new(Strategy::Answer, 2.0).with_k(5),
        GuidanceConfig::new(Strategy::Dnp, 2.0),
    ];
    let cmp = compare_strategies(&engine, &configs, ConceptId(0), 500).unwrap();
    let (wa, pa) = (cmp.win_rates[1][0], cmp.p_values[1][0]);
    let (wd, pd) = (cmp.win_rates[2][0], cmp.p_values[2][0]);
    check(
        wa > 0.5 && pa < 0.05 && wd > 0.5 && pd < 0.05,
        format!("ANSWER(K=5) vs CFG win rate {wa:.3} (p = {pa:.2e}); DNP vs CFG {wd:.3} (p = {pd:.2e}); 500 seeds"),
    )
}

fn negative_drift() -> Outcome {
    let world = adversarial();
    let sched = cosine(40);
    let den = AnalyticDenoiser::new(&world, &sched).unwrap();
    let engine = Engine::new(&den, &world, &sched).unwrap();
    let config = GuidanceConfig::new(Strategy::Cfg, 2.0);
    let table = negative_drift_experiment(&engine, &config, ConceptId(0), &[40, 30, 21], 100).unwrap();
    let mismatched = table
        .seeds
        .iter()
        .zip(&table.labels)
        .filter(|(seed, labels)| {
            let dnp = GuidanceConfig::new(Strategy::Dnp, 2.0).with_seed(**seed);
            engine.run(ConceptId(0), &dnp).unwrap().records[0].negative_concept != Some(labels[0])
        })
        .count();
    let frac = table.non_constant_fraction;
    check(
        frac > 0.0 && mismatched == 0,
        format!("non-constant fraction {frac:.2} over 100 seeds; t=T label differs from DNP n* on {mismatched} seeds"),
    )
}

fn trained_denoiser() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest_path("../../configs/train_1d.json");
    let code = negdiff_cli::run([
        "negdiff",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    if code != 0 {
        return Err(format!("train exited with {code}"));
    }
    let text = std::fs::read_to_string(dir.path().join("model.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let model: TrainableDenoiser = serde_json::from_value(doc["model"].clone()).unwrap();
    let world = standard_normal();
    let sched = cosine(40);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut total = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=40);
        let z = sched.forward_diffuse(&gaussian_vec(&mut rng, 1, 1.0), t, &gaussian_vec(&mut rng, 1, 1.0)).unwrap();
        let c = if rng.random_bool(0.5) { Condition::Null } else { Condition::Concept(ConceptId(0)) };
        let pred = model.predict_noise(&z, t, c).unwrap();
        let exact = world.analytic_epsilon(&sched, &z, t, c).unwrap();
        let dot: f64 = pred.iter().zip(&exact).map(|(a, b)| a * b).sum();
        total += dot / (norm(&pred) * norm(&exact)).max(f64::MIN_POSITIVE);
    }
    let mean = total / 1000.0;
    check(mean >= 0.9, format!("mean cosine similarity {mean:.4} over 1000 probes (limit 0.9)"))
}

fn reproducibility() -> Outcome {
    let runs = [
        ("sample", "../../configs/sample.json", vec!["samples.csv", "traces.jsonl"]),
        ("compare", "../../configs/compare.json", vec!["compare.csv", "compare.json"]),
        ("sweep-k", "../../configs/sweep_k.json", vec!["sweep_k.csv"]),
    ];
    let mut files = 0;
    for (cmd, config, outputs) in runs {
        let config = manifest_path(config);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for (dir, workers) in dirs.iter().zip(["1", "4"]) {
            let code = negdiff_cli::run([
                "negdiff",
                cmd,
                "--config",
                config.to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
                "--workers",
                workers,
                "--n-seeds",
                "40",
            ]);
            if code != 0 {
                return Err(format!("{cmd} exited with {code}"));
            }
        }
        for name in outputs {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            if a != b {
                return Err(format!("{cmd}: {name} differs between reruns"));
            }
            files += 1;
        }
    }
    Ok(format!("{files} data files byte-identical across reruns (1 vs 4 workers)"))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "score consistency", budget: Duration::from_secs(60), run: score_consistency },
        Criterion { name: "distribution recovery", budget: Duration::from_secs(120), run: distribution_recovery },
        Criterion { name: "K=1 collapse identity", budget: Duration::MAX, run: single_step_collapse },
        Criterion { name: "scheduler endpoints and shape", budget: Duration::MAX, run: scheduler_shape },
        Criterion { name: "normalization contract", budget: Duration::MAX, run: normalization_contract },
        Criterion { name: "call accounting", budget: Duration::MAX, run: call_accounting },
        Criterion { name: "collapse to CFG", budget: Duration::MAX, run: collapse_to_cfg },
        Criterion { name: "DNS negativity", budget: Duration::MAX, run: dns_negativity },
        Criterion { name: "comparative improvement", budget: Duration::from_secs(900), run: comparative_improvement },
        Criterion { name: "negative drift", budget: Duration::MAX, run: negative_drift },
        Criterion { name: "trainable denoiser", budget: Duration::from_secs(300), run: trained_denoiser },
        Criterion { name: "reproducibility", budget: Duration::MAX, run: reproducibility },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("criterion {:>2} {status} {:<30} {detail} [{:.2?}]", i + 1, c.name, elapsed);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
