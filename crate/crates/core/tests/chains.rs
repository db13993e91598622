use approx::assert_relative_eq;
use negdiff_core::chains::{chain_rng, closed_form_calls, cost_warning, effective_k, Quantizer};
use negdiff_core::guidance::{cfg_combine, schedule_k};
use negdiff_core::*;
use negdiff_core::Strategy;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn trio() -> ConceptWorld {
    ConceptWorld::new(
        2,
        vec![
            Concept::new("a", 0.1, vec![Component::isotropic(1.0, vec![0.0, 1.0], 0.9)]),
            Concept::new("b", 0.6, vec![Component::isotropic(1.0, vec![0.0, -0.8], 0.5)]),
            Concept::new(
                "c",
                0.3,
                vec![
                    Component::isotropic(0.5, vec![-1.5, 0.8], 0.3),
                    Component::diagonal(0.5, vec![1.5, 0.8], &[0.3, 0.6]),
                ],
            ),
        ],
    )
    .unwrap()
}

fn sched(t: usize) -> VarianceSchedule {
    VarianceSchedule::new(ScheduleKind::Cosine, t, 1e-4, 0.02).unwrap()
}

struct Fixture {
    world: ConceptWorld,
    sched: VarianceSchedule,
    den: AnalyticDenoiser,
}

impl Fixture {
    fn new(t: usize) -> Self {
        let world = trio();
        let sched = sched(t);
        let den = AnalyticDenoiser::new(&world, &sched).unwrap();
        Self { world, sched, den }
    }

    fn engine(&self) -> Engine<'_> {
        Engine::new(&self.den, &self.world, &self.sched).unwrap()
    }
}

const POS: ConceptId = ConceptId(0);

#[test]
fn runs_are_deterministic_per_seed() {
    let f = Fixture::new(12);
    let e = f.engine();
    for strategy in [Strategy::Cfg, Strategy::Dnp, Strategy::Answer] {
        let config = GuidanceConfig::new(strategy, 3.0).with_k(4).with_seed(17).with_sampler(SamplerKind::Ddpm);
        assert_eq!(e.run(POS, &config).unwrap(), e.run(POS, &config).unwrap());
        let other = config.clone().with_seed(18);
        assert_ne!(e.run(POS, &config).unwrap().final_sample, e.run(POS, &other).unwrap().final_sample);
    }
}

#[test]
fn answer_without_budget_is_cfg_bitwise() {
    let f = Fixture::new(16);
    let e = f.engine();
    for sampler in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        for seed in 0..5 {
            let cfg = e.run(POS, &GuidanceConfig::new(Strategy::Cfg, 4.0).with_seed(seed).with_sampler(sampler)).unwrap();
            let zero_k = GuidanceConfig::new(Strategy::Answer, 4.0).with_seed(seed).with_sampler(sampler);
            let closed = zero_k.clone().with_k(5).with_window(1.0);
            for config in [zero_k, closed] {
                let answer = e.run(POS, &config).unwrap();
                assert_eq!(answer.records, cfg.records);
                assert_eq!(answer.final_sample, cfg.final_sample);
            }
        }
    }
}

#[test]
fn single_step_budget_is_cfg_at_quadratic_scale_on_live_chains() {
    let f = Fixture::new(20);
    let e = f.engine();
    for s in [1.5, 3.0, 7.5] {
        let config = GuidanceConfig::new(Strategy::Answer, s).with_normalize(false).with_seed(3);
        let trace = e.run_answer_with(POS, &config, &mut chain_rng(3), |_| 1).unwrap();
        let active: Vec<_> = trace.records.iter().filter(|r| r.k_t == 1).collect();
        assert_eq!(active.len(), 10);
        for r in active {
            let expected = cfg_combine(r.eps_uncond.as_ref().unwrap(), &r.eps_cond, s * s - s + 1.0).unwrap();
            for (a, b) in r.eps_combined.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "s={s}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn instrumented_calls_match_closed_forms() {
    for t in [4, 20, 40] {
        let f = Fixture::new(t);
        let e = f.engine();
        for k in [0, 2, 5] {
            for strategy in Strategy::ALL {
                let mut config = GuidanceConfig::new(strategy, 2.0).with_k(k).with_seed(1);
                config.negative = Some("b".into());
                let trace = e.run(POS, &config).unwrap();
                assert_eq!(trace.total_denoiser_calls, closed_form_calls(&config, t), "{strategy} T={t} K={k}");
                assert_eq!(trace.records.len(), t);
                assert_eq!(trace.records.last().unwrap().denoiser_calls_so_far, trace.total_denoiser_calls);
            }
        }
    }
}

#[test]
fn closed_form_values() {
    let answer = GuidanceConfig::new(Strategy::Answer, 2.0).with_k(5);
    let sum_k: u64 = (21..=40).map(|t| schedule_k(5, t, 40).min(t) as u64).sum();
    assert_eq!(closed_form_calls(&answer, 40), 80 + 2 * sum_k);
    assert_eq!(closed_form_calls(&GuidanceConfig::new(Strategy::Cnp, 2.0), 40), 1600 + 120);
    assert_eq!(effective_k(&answer, 20, 40), 0);
    assert_eq!(effective_k(&answer, 40, 40), 5);
    // a budget larger than the steps left is clamped
    assert_eq!(effective_k(&GuidanceConfig::new(Strategy::Answer, 2.0).with_k(50), 3, 4), 3);
}

#[test]
fn cnp_cost_warning_threshold() {
    assert!(cost_warning(Strategy::Cnp, 200).unwrap().contains("40600"));
    assert!(cost_warning(Strategy::Cnp, 100).is_none());
    assert!(cost_warning(Strategy::Answer, 1000).is_none());
}

#[test]
fn dnp_negative_is_label_of_negative_chain_from_same_start() {
    let f = Fixture::new(16);
    let e = f.engine();
    for seed in 0..8 {
        let config = GuidanceConfig::new(Strategy::Dnp, 2.5).with_seed(seed);
        let trace = e.run(POS, &config).unwrap();
        let z_t = e.initial_latent(&mut chain_rng(seed));
        assert_eq!(trace.records[0].z_before, z_t);
        let label = e.dns_label(POS, &config, &z_t, 16).unwrap();
        assert!(trace.records.iter().all(|r| r.negative_concept == Some(label)));
        let full = e.run_dns(POS, &config, &z_t, 16, 16).unwrap();
        assert_eq!(f.world.quantize(&full.latent).unwrap(), label);
    }
}

#[test]
fn dns_excursion_bounds() {
    let f = Fixture::new(10);
    let e = f.engine();
    let config = GuidanceConfig::new(Strategy::Dns, 2.0);
    let z = [0.3, -0.2];
    assert!(e.run_dns(POS, &config, &z, 5, 0).is_err());
    assert!(e.run_dns(POS, &config, &z, 5, 6).is_err());
    assert!(e.run_dns(POS, &config, &z, 11, 1).is_err());
    let out = e.run_dns(POS, &config, &z, 5, 5).unwrap();
    assert_eq!(out.denoiser_calls, 10);
    assert_eq!(e.run_dns(POS, &config, &z, 5, 5).unwrap(), out);
}

#[test]
fn negative_prompting_requires_a_known_negative() {
    let f = Fixture::new(6);
    let e = f.engine();
    let mut config = GuidanceConfig::new(Strategy::Np, 2.0);
    assert!(matches!(e.run(POS, &config), Err(Error::Parameter(_))));
    config.negative = Some("zzz".into());
    assert!(e.run(POS, &config).is_err());
    config.negative = Some("c".into());
    let trace = e.run(POS, &config).unwrap();
    assert!(trace.records.iter().all(|r| r.eps_uncond.is_none() && r.negative_concept == Some(ConceptId(2))));
}

#[test]
fn invalid_inputs_are_rejected() {
    let f = Fixture::new(6);
    let e = f.engine();
    assert!(e.run(ConceptId(9), &GuidanceConfig::new(Strategy::Cfg, 2.0)).is_err());
    assert!(e.run(POS, &GuidanceConfig::new(Strategy::Cfg, f64::NAN)).is_err());
    assert!(e.run(POS, &GuidanceConfig::new(Strategy::Answer, 2.0).with_window(0.0)).is_err());
    let one_d = ConceptWorld::new(1, vec![Concept::new("x", 1.0, vec![Component::isotropic(1.0, vec![0.0], 1.0)])])
        .unwrap();
    assert!(Engine::new(&f.den, &one_d, &f.sched).is_err());
}

#[test]
fn full_trace_round_trips_through_jsonl() {
    let f = Fixture::new(8);
    let e = f.engine();
    let trace = e.run(POS, &GuidanceConfig::new(Strategy::Answer, 3.0).with_k(4).with_seed(2)).unwrap();
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert_eq!(ChainTrace::read_jsonl(&text).unwrap(), trace);
}

#[test]
fn custom_quantizer_changes_dnp_negative() {
    struct Always(ConceptId);
    impl Quantizer for Always {
        fn quantize(&self, _: &[f64]) -> negdiff_core::Result<ConceptId> {
            Ok(self.0)
        }
    }
    let f = Fixture::new(8);
    let q = Always(ConceptId(2));
    let e = f.engine().with_quantizer(&q);
    let trace = e.run(POS, &GuidanceConfig::new(Strategy::Dnp, 2.0)).unwrap();
    assert!(trace.records.iter().all(|r| r.negative_concept == Some(ConceptId(2))));
}

#[test]
fn unconditional_ddpm_matches_single_gaussian() {
    let world = ConceptWorld::new(1, vec![Concept::new("n", 1.0, vec![Component::isotropic(1.0, vec![1.0], 0.25)])])
        .unwrap();
    let s = VarianceSchedule::new(ScheduleKind::Linear, 100, 1e-4, 0.05).unwrap();
    let den = AnalyticDenoiser::new(&world, &s).unwrap();
    let e = Engine::new(&den, &world, &s).unwrap();
    let config = GuidanceConfig::new(Strategy::Cfg, 1.0).with_sampler(SamplerKind::Ddpm);
    let mut rng = chain_rng(5);
    let xs: Vec<f64> = (0..4000).map(|_| e.run_unconditional(&config, &mut rng).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert_relative_eq!(mean, 1.0, epsilon = 0.03);
    assert_relative_eq!(var, 0.25, epsilon = 0.03);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn answer_call_count_tracks_budget(t in 2usize..30, k in 0usize..12, window in 0.05f64..1.0, offset in 1.0f64..40.0) {
        let f = Fixture::new(t);
        let mut config = GuidanceConfig::new(Strategy::Answer, 2.0).with_k(k).with_window(window);
        config.schedule_offset = offset;
        let trace = f.engine().run(POS, &config).unwrap();
        prop_assert_eq!(trace.total_denoiser_calls, closed_form_calls(&config, t));
        prop_assert_eq!(trace.total_denoiser_calls, 2 * t as u64 + 2 * trace.total_k());
        for r in &trace.records {
            prop_assert!(r.k_t <= r.t);
            prop_assert_eq!(r.k_t, effective_k(&config, r.t, t));
        }
    }

    #[test]
    fn normalized_negative_noise_matches_unconditional_stats(seed in 0u64..1000) {
        let f = Fixture::new(10);
        let config = GuidanceConfig::new(Strategy::Answer, 2.0).with_k(3).with_seed(seed);
        let trace = f.engine().run(POS, &config).unwrap();
        for r in trace.records.iter().filter(|r| r.k_t > 0) {
            let (m, s) = guidance::noise_stats(r.eps_neg.as_ref().unwrap());
            let (mr, sr) = guidance::noise_stats(r.eps_uncond.as_ref().unwrap());
            prop_assert!((m - mr).abs() < 1e-9);
            prop_assert!((s - sr).abs() < 1e-9);
        }
    }
}
