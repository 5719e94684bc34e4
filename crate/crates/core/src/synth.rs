//! Seeded synthetic EHR with a planted kidney-function progression signal.
//!
//! Each patient is generated from its own random stream
//! (`STREAM_SYNTH_BASE + index`) and owns a disjoint block of visit and event
//! ids, so patients can be generated in any order or in parallel and the
//! concatenated output never changes.
//!
//! Trajectory model: eGFR stays at a start level until an onset time, then
//! declines linearly at a per-patient slope until it reaches a floor.
//! Progressors decline fast to a floor below the stage-5 threshold; stable
//! patients decline slowly to a floor well above it. Background conditions,
//! drugs, procedures and labs are drawn per visit, with a "risk" subset of
//! concepts that progressors receive more often.

use alloc::vec::Vec;

use chrono::{NaiveDate, TimeDelta};
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use thiserror::Error;

use crate::cdm::{Domain, EventRecord, Gender, PersonRecord, VisitRecord, VisitType};
use crate::rng::{self, Rng, STREAM_SYNTH_BASE};
use crate::{concepts, ConceptId, DateTime};

const VISIT_ID_BLOCK: i64 = 100_000;
const EVENT_ID_BLOCK: i64 = 1_000_000;
const DAYS_PER_YEAR: f64 = 365.25;

/// Background concept ids are `base + k`.
const CONDITION_BASE: ConceptId = 4_000_000;
const DRUG_BASE: ConceptId = 19_000_000;
const PROCEDURE_BASE: ConceptId = 2_000_000;
const LAB_BASE: ConceptId = 3_100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub progressor_fraction: f64,
    pub visits_per_year: f64,
    pub egfr_start_range: (f64, f64),
    /// eGFR units per year; negative means decline.
    pub progressor_slope_range: (f64, f64),
    pub stable_slope_range: (f64, f64),
    pub noise_sd: f64,
    pub n_background_concepts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            progressor_fraction: 0.3,
            visits_per_year: 4.0,
            egfr_start_range: (62.0, 85.0),
            progressor_slope_range: (-200.0, -70.0),
            stable_slope_range: (-10.0, -4.0),
            noise_sd: 3.0,
            n_background_concepts: 40,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(&'static str),
    #[error("planted signal missing: progressor final-year eGFR {progressors:.2} is not below stable {stable:.2}")]
    Signal { progressors: f64, stable: f64 },
}

fn ordered(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.progressor_fraction) {
            return Err(SynthError::Config("progressor_fraction must be in [0, 1]"));
        }
        if !(self.visits_per_year > 0.0 && self.visits_per_year <= 200.0) {
            return Err(SynthError::Config("visits_per_year must be in (0, 200]"));
        }
        if ![self.egfr_start_range, self.progressor_slope_range, self.stable_slope_range].into_iter().all(ordered) {
            return Err(SynthError::Config("ranges must be finite and ordered"));
        }
        if self.egfr_start_range.0 <= 0.0 {
            return Err(SynthError::Config("egfr_start_range must be positive"));
        }
        if self.progressor_slope_range.1 >= 0.0 || self.stable_slope_range.1 > 0.0 {
            return Err(SynthError::Config("slopes must be declines"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SynthError::Config("noise_sd must be non-negative"));
        }
        if self.n_background_concepts == 0 || self.n_background_concepts > 10_000 {
            return Err(SynthError::Config("n_background_concepts must be in 1..=10000"));
        }
        if self.n_patients as i64 >= i64::MAX / EVENT_ID_BLOCK - 1 {
            return Err(SynthError::Config("n_patients is too large"));
        }
        Ok(())
    }

    /// Number of leading concepts per domain that progressors favor.
    fn n_risk(&self) -> usize {
        (self.n_background_concepts / 5).max(1)
    }
}

/// Everything generated for one patient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatientRecords {
    pub person: Option<PersonRecord>,
    pub visits: Vec<VisitRecord>,
    pub events: Vec<EventRecord>,
    pub progressor: bool,
    /// Mean observed eGFR over the last year of observation.
    pub final_year_egfr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthCounts {
    pub persons: usize,
    pub visits: usize,
    pub conditions: usize,
    pub drugs: usize,
    pub procedures: usize,
    pub measurements: usize,
    pub progressors: usize,
}

impl SynthCounts {
    pub fn of_domain(&self, d: Domain) -> usize {
        match d {
            Domain::Condition => self.conditions,
            Domain::Drug => self.drugs,
            Domain::Procedure => self.procedures,
            Domain::Measurement => self.measurements,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthOutput {
    pub persons: Vec<PersonRecord>,
    pub visits: Vec<VisitRecord>,
    pub events: Vec<EventRecord>,
    pub counts: SynthCounts,
    /// Mean final-year eGFR of progressors and stable patients.
    pub progressor_final_egfr: Option<f64>,
    pub stable_final_egfr: Option<f64>,
}

impl SynthOutput {
    /// Concatenates per-patient records in index order.
    pub fn assemble(patients: impl IntoIterator<Item = PatientRecords>) -> Result<Self, SynthError> {
        let mut out = SynthOutput::default();
        let (mut prog, mut stable) = ((0.0, 0usize), (0.0, 0usize));
        for p in patients {
            if p.progressor {
                prog = (prog.0 + p.final_year_egfr, prog.1 + 1);
                out.counts.progressors += 1;
            } else {
                stable = (stable.0 + p.final_year_egfr, stable.1 + 1);
            }
            out.persons.extend(p.person);
            out.visits.extend(p.visits);
            out.events.extend(p.events);
        }
        out.counts.persons = out.persons.len();
        out.counts.visits = out.visits.len();
        for e in &out.events {
            match e.domain {
                Domain::Condition => out.counts.conditions += 1,
                Domain::Drug => out.counts.drugs += 1,
                Domain::Procedure => out.counts.procedures += 1,
                Domain::Measurement => out.counts.measurements += 1,
            }
        }
        out.progressor_final_egfr = (prog.1 > 0).then(|| prog.0 / prog.1 as f64);
        out.stable_final_egfr = (stable.1 > 0).then(|| stable.0 / stable.1 as f64);
        if let (Some(p), Some(s)) = (out.progressor_final_egfr, out.stable_final_egfr) {
            if p >= s {
                return Err(SynthError::Signal { progressors: p, stable: s });
            }
        }
        Ok(out)
    }
}

/// Generates the whole dataset sequentially.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    SynthOutput::assemble((0..cfg.n_patients).map(|i| generate_patient(cfg, i)))
}

struct Trajectory {
    start: f64,
    onset_day: f64,
    slope_per_day: f64,
    floor: f64,
}

impl Trajectory {
    fn at(&self, day: f64) -> f64 {
        if day <= self.onset_day {
            self.start
        } else {
            (self.start + self.slope_per_day * (day - self.onset_day)).max(self.floor)
        }
    }
}

fn uniform(rng: &mut Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn round1(x: f64) -> f64 {
    libm::round(x * 10.0) / 10.0
}

struct Emitter {
    person_id: i64,
    next_event: i64,
    events: Vec<EventRecord>,
}

impl Emitter {
    fn push(&mut self, domain: Domain, concept_id: ConceptId, at: DateTime, visit_id: Option<i64>, value: Option<f64>) {
        self.next_event += 1;
        self.events.push(EventRecord {
            event_id: self.next_event,
            domain,
            concept_id,
            at,
            person_id: self.person_id,
            visit_id,
            value,
        });
    }
}

/// Patient `index` (0-based); its person_id is `index + 1`.
pub fn generate_patient(cfg: &SynthConfig, index: usize) -> PatientRecords {
    let mut rng = rng::stream(cfg.seed, STREAM_SYNTH_BASE + index as u64);
    let person_id = index as i64 + 1;
    let progressor = rng.random_bool(cfg.progressor_fraction);
    let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
    let birth_year = rng.random_range(1930..=1975);

    let base = NaiveDate::from_ymd_opt(2008, 1, 1).expect("valid date");
    let obs_start = base + TimeDelta::days(rng.random_range(0..5 * 365));
    let obs_days = uniform(&mut rng, (9.0, 13.0)) * DAYS_PER_YEAR;

    let traj = if progressor {
        Trajectory {
            start: uniform(&mut rng, cfg.egfr_start_range),
            onset_day: uniform(&mut rng, (1.0, 5.0)) * DAYS_PER_YEAR,
            slope_per_day: uniform(&mut rng, cfg.progressor_slope_range) / DAYS_PER_YEAR,
            floor: uniform(&mut rng, (4.0, 10.0)),
        }
    } else {
        Trajectory {
            start: uniform(&mut rng, cfg.egfr_start_range),
            onset_day: uniform(&mut rng, (0.5, 2.0)) * DAYS_PER_YEAR,
            slope_per_day: uniform(&mut rng, cfg.stable_slope_range) / DAYS_PER_YEAR,
            floor: uniform(&mut rng, (25.0, 50.0)),
        }
    };
    let has_ckd_dx = rng.random_bool(0.9);
    let risk_share = if progressor { 0.45 } else { 0.1 };
    let uacr_median: f64 = if progressor { uniform(&mut rng, (60.0, 300.0)) } else { uniform(&mut rng, (5.0, 40.0)) };

    let noise = Normal::new(0.0, cfg.noise_sd.max(1e-12)).expect("finite sd");
    let log_noise = Normal::new(0.0, 0.35).expect("finite sd");
    let n_risk = cfg.n_risk();
    let n_bg = cfg.n_background_concepts;
    let mut em = Emitter { person_id, next_event: (person_id) * EVENT_ID_BLOCK, events: Vec::new() };
    let mut visits = Vec::new();
    let mut dx_done = false;
    let mut esrd_done = false;
    let mut final_year = (0.0, 0usize);
    let mut last_egfr = traj.start;
    let to_time = |day: f64| -> DateTime {
        let secs = libm::floor(day * 86_400.0) as i64;
        obs_start.and_hms_opt(0, 0, 0).expect("midnight") + TimeDelta::seconds(secs)
    };

    let mut cursor = 0.0f64;
    let mut first = true;
    loop {
        let accelerated = progressor && cursor >= traj.onset_day;
        let rate = cfg.visits_per_year * if accelerated { 1.5 } else { 1.0 } / DAYS_PER_YEAR;
        let gap = if first { 0.0 } else { Exp::new(rate).expect("positive rate").sample(&mut rng) };
        let day = libm::floor(cursor + gap.max(1.0)) + uniform(&mut rng, (8.0, 17.0)) / 24.0;
        if day >= obs_days {
            break;
        }
        let r: f64 = rng.random();
        let (visit_type, hours) = if r < 0.85 {
            (VisitType::Outpatient, uniform(&mut rng, (0.25, 1.5)))
        } else if r < 0.95 {
            (VisitType::Inpatient, uniform(&mut rng, (48.0, 240.0)))
        } else {
            (VisitType::Emergency, uniform(&mut rng, (2.0, 12.0)))
        };
        let end_day = day + hours / 24.0;
        let visit_id = person_id * VISIT_ID_BLOCK + visits.len() as i64 + 1;
        let start = to_time(day);
        let end = to_time(end_day);
        visits.push(VisitRecord { visit_id, person_id, visit_type, start, end });
        let span = end_day - day;
        let inside = |rng: &mut Rng| to_time(day + rng.random_range(0.0..=1.0) * span);
        let scale = if visit_type == VisitType::Inpatient { 3.0 } else { 1.0 };

        if first || rng.random_bool(0.8) {
            let t = day + 0.1 * span;
            let v = (round1(traj.at(t) + noise.sample(&mut rng))).clamp(1.0, 150.0);
            last_egfr = v;
            em.push(Domain::Measurement, concepts::EGFR, to_time(t), Some(visit_id), Some(v));
            if day >= obs_days - DAYS_PER_YEAR {
                final_year = (final_year.0 + v, final_year.1 + 1);
            }
        }
        if rng.random_bool(0.4) {
            let v = round1(uacr_median * libm::exp(log_noise.sample(&mut rng))).max(0.1);
            em.push(Domain::Measurement, concepts::UACR, inside(&mut rng), Some(visit_id), Some(v));
        }
        if has_ckd_dx && !dx_done && last_egfr < 60.0 && rng.random_bool(0.5) {
            em.push(Domain::Condition, concepts::CKD, inside(&mut rng), Some(visit_id), None);
            dx_done = true;
        }
        if progressor && !esrd_done && last_egfr < 15.0 {
            em.push(Domain::Condition, concepts::ESRD, inside(&mut rng), Some(visit_id), None);
            esrd_done = true;
        }
        for (domain, base, mean) in [
            (Domain::Condition, CONDITION_BASE, 1.0),
            (Domain::Drug, DRUG_BASE, 1.5),
            (Domain::Procedure, PROCEDURE_BASE, 0.7),
            (Domain::Measurement, LAB_BASE, 1.0),
        ] {
            let n = Poisson::new(mean * scale).expect("positive mean").sample(&mut rng) as usize;
            for _ in 0..n {
                let k = if rng.random_bool(risk_share) {
                    rng.random_range(0..n_risk)
                } else {
                    rng.random_range(n_risk.min(n_bg - 1)..n_bg)
                };
                let concept = base + k as ConceptId;
                let value = (domain == Domain::Measurement)
                    .then(|| round1(50.0 + 5.0 * k as f64 + 10.0 * noise.sample(&mut rng) / cfg.noise_sd.max(1.0)));
                em.push(domain, concept, inside(&mut rng), Some(visit_id), value);
            }
        }
        // Ambulatory events outside any visit: home-dispensed drugs.
        if rng.random_bool(0.05) {
            let t = end_day + uniform(&mut rng, (1.0, 20.0));
            if t < obs_days {
                let k = rng.random_range(0..n_bg);
                em.push(Domain::Drug, DRUG_BASE + k as ConceptId, to_time(t), None, None);
            }
        }
        cursor = end_day;
        first = false;
    }
    // A diagnosis-only patient who never dropped below 60 still gets coded.
    if has_ckd_dx && !dx_done {
        if let Some(v) = visits.last() {
            let (at, id) = (v.start, v.visit_id);
            em.push(Domain::Condition, concepts::CKD, at, Some(id), None);
        }
    }
    let final_year_egfr = if final_year.1 > 0 { final_year.0 / final_year.1 as f64 } else { last_egfr };
    PatientRecords {
        person: Some(PersonRecord { person_id, gender, birth_year }),
        visits,
        events: em.events,
        progressor,
        final_year_egfr,
    }
}
