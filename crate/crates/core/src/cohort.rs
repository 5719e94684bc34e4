//! Cohort inclusion/exclusion and CKD stage index dates from eGFR series.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::TimeDelta;
use thiserror::Error;

use crate::cdm::{Dataset, Domain, EventRecord};
use crate::{concepts, ConceptId, Date, DateTime, PersonId};

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub ckd_concept_ids: BTreeSet<ConceptId>,
    pub egfr_concept_id: ConceptId,
    pub uacr_concept_id: ConceptId,
    pub egfr_stage3a_threshold: f64,
    pub egfr_stage5_threshold: f64,
    pub uacr_threshold: f64,
    pub persistence_days: u32,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            ckd_concept_ids: [concepts::CKD, concepts::ESRD].into_iter().collect(),
            egfr_concept_id: concepts::EGFR,
            uacr_concept_id: concepts::UACR,
            egfr_stage3a_threshold: 60.0,
            egfr_stage5_threshold: 15.0,
            uacr_threshold: 30.0,
            persistence_days: 90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CohortError {
    #[error("series is not sorted by time at index {0}")]
    Unsorted(usize),
    #[error("invalid cohort config: {0}")]
    Config(&'static str),
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let all_positive = [self.egfr_stage3a_threshold, self.egfr_stage5_threshold, self.uacr_threshold]
            .iter()
            .all(|t| t.is_finite() && *t > 0.0);
        if !all_positive {
            return Err(CohortError::Config("thresholds must be positive"));
        }
        if self.egfr_stage5_threshold >= self.egfr_stage3a_threshold {
            return Err(CohortError::Config("stage 5 threshold must be below the stage 3a threshold"));
        }
        if self.persistence_days == 0 {
            return Err(CohortError::Config("persistence_days must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Below,
    Above,
}

impl Direction {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::Below => value < threshold,
            Direction::Above => value > threshold,
        }
    }
}

/// Earliest time `t` such that a run of consecutive measurements starting at
/// `t`, all satisfying the predicate (strictly), reaches another satisfying
/// measurement at least `persistence_days` later.
///
/// A lone qualifying measurement never persists, however long the silence
/// after it.
pub fn persistent(
    series: &[(DateTime, f64)],
    threshold: f64,
    persistence_days: u32,
    direction: Direction,
) -> Result<Option<DateTime>, CohortError> {
    if let Some(i) = series.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(CohortError::Unsorted(i + 1));
    }
    let span = TimeDelta::days(i64::from(persistence_days));
    let mut run_start: Option<DateTime> = None;
    for &(t, value) in series {
        if direction.holds(value, threshold) {
            let start = *run_start.get_or_insert(t);
            if t - start >= span {
                return Ok(Some(start));
            }
        } else {
            run_start = None;
        }
    }
    Ok(None)
}

pub fn persistent_below(
    series: &[(DateTime, f64)],
    threshold: f64,
    persistence_days: u32,
) -> Result<Option<DateTime>, CohortError> {
    persistent(series, threshold, persistence_days, Direction::Below)
}

pub fn persistent_above(
    series: &[(DateTime, f64)],
    threshold: f64,
    persistence_days: u32,
) -> Result<Option<DateTime>, CohortError> {
    persistent(series, threshold, persistence_days, Direction::Above)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InclusionReason {
    Diagnosis,
    EgfrPersistent,
    UacrPersistent,
}

impl InclusionReason {
    pub fn tag(self) -> &'static str {
        match self {
            InclusionReason::Diagnosis => "diagnosis",
            InclusionReason::EgfrPersistent => "egfr_persistent",
            InclusionReason::UacrPersistent => "uacr_persistent",
        }
    }
}

impl fmt::Display for InclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for InclusionReason {
    type Err = crate::cdm::ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diagnosis" => Ok(InclusionReason::Diagnosis),
            "egfr_persistent" => Ok(InclusionReason::EgfrPersistent),
            "uacr_persistent" => Ok(InclusionReason::UacrPersistent),
            _ => Err(crate::cdm::ParseEnumError { kind: "inclusion reason" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortMember {
    pub person_id: PersonId,
    pub inclusion_reasons: BTreeSet<InclusionReason>,
    pub stage3a_index: Option<Date>,
    pub stage5_index: Option<Date>,
    pub last_observed: Date,
}

/// Numeric series for one measurement concept, in timeline order.
pub fn measurement_series(events: &[EventRecord], concept_id: ConceptId) -> Vec<(DateTime, f64)> {
    events
        .iter()
        .filter(|e| e.domain == Domain::Measurement && e.concept_id == concept_id)
        .filter_map(|e| e.value.map(|v| (e.at, v)))
        .collect()
}

/// Evaluates one person's timeline. `None` if the person is not a member.
pub fn evaluate_person(
    person_id: PersonId,
    events: &[EventRecord],
    cfg: &CohortConfig,
) -> Result<Option<CohortMember>, CohortError> {
    let measured_egfr =
        events.iter().any(|e| e.domain == Domain::Measurement && e.concept_id == cfg.egfr_concept_id);
    if !measured_egfr {
        return Ok(None);
    }
    let egfr = measurement_series(events, cfg.egfr_concept_id);
    let uacr = measurement_series(events, cfg.uacr_concept_id);
    let stage3a = persistent_below(&egfr, cfg.egfr_stage3a_threshold, cfg.persistence_days)?;
    let stage5 = persistent_below(&egfr, cfg.egfr_stage5_threshold, cfg.persistence_days)?;
    let uacr_hit = persistent_above(&uacr, cfg.uacr_threshold, cfg.persistence_days)?;

    let mut reasons = BTreeSet::new();
    if events.iter().any(|e| e.domain == Domain::Condition && cfg.ckd_concept_ids.contains(&e.concept_id)) {
        reasons.insert(InclusionReason::Diagnosis);
    }
    if stage3a.is_some() {
        reasons.insert(InclusionReason::EgfrPersistent);
    }
    if uacr_hit.is_some() {
        reasons.insert(InclusionReason::UacrPersistent);
    }
    if reasons.is_empty() {
        return Ok(None);
    }
    // Non-empty: at least one eGFR measurement exists.
    let last_observed = events.iter().map(|e| e.at).max().map(|t| t.date());
    Ok(last_observed.map(|last_observed| CohortMember {
        person_id,
        inclusion_reasons: reasons,
        stage3a_index: stage3a.map(|t| t.date()),
        stage5_index: stage5.map(|t| t.date()),
        last_observed,
    }))
}

/// Members in ascending person_id order.
pub fn build_cohort(ds: &Dataset, cfg: &CohortConfig) -> Result<Vec<CohortMember>, CohortError> {
    cfg.validate()?;
    let mut members = Vec::new();
    for person_id in ds.person_ids() {
        let events = ds.events_for(person_id, None).expect("person ids come from the dataset");
        if let Some(m) = evaluate_person(person_id, events, cfg)? {
            members.push(m);
        }
    }
    Ok(members)
}
