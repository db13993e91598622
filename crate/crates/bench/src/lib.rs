//! Shared setup for the benchmarks.

use negdiff_core::{AnalyticDenoiser, ConceptWorld, ScheduleKind, VarianceSchedule};

const WORLD: &str = include_str!("../../core/fixtures/adversarial.json");

pub struct Setup {
    pub world: ConceptWorld,
    pub sched: VarianceSchedule,
    pub denoiser: AnalyticDenoiser,
}

impl Setup {
    pub fn new(steps: usize) -> Self {
        let world = ConceptWorld::from_json_str(WORLD).expect("fixture parses");
        let sched = VarianceSchedule::new(ScheduleKind::Cosine, steps, 1e-4, 0.02).expect("valid schedule");
        let denoiser = AnalyticDenoiser::new(&world, &sched).expect("denoiser builds");
        Self { world, sched, denoiser }
    }
}
