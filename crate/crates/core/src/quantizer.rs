//! Per-concept decile cut points and Q1..Q10 assignment for lab values.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cdm::{Domain, EventRecord};
use crate::ConceptId;

pub const N_BUCKETS: u8 = 10;
pub const N_CUTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantizerError {
    #[error("concept {0} has no values to fit")]
    EmptyConcept(ConceptId),
    #[error("concept {0} has a non-finite value")]
    NonFinite(ConceptId),
    #[error("concept {0} is not in the quantile map")]
    UnknownConcept(ConceptId),
    #[error("cut points for concept {0} are not non-decreasing")]
    UnorderedCuts(ConceptId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCuts {
    pub cuts: [f64; N_CUTS],
    /// Number of fitting values; unknown for maps read back from disk.
    pub training_count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantileMap {
    concepts: BTreeMap<ConceptId, ConceptCuts>,
}

/// Nearest-rank percentile of sorted data: the value at rank ceil(p/100 * n).
fn nearest_rank(sorted: &[f64], percent: usize) -> f64 {
    let n = sorted.len();
    let rank = (percent * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

impl QuantileMap {
    /// Fits the 10th..90th nearest-rank percentiles of every concept.
    pub fn fit(values_by_concept: &BTreeMap<ConceptId, Vec<f64>>) -> Result<Self, QuantizerError> {
        let mut concepts = BTreeMap::new();
        for (&concept, values) in values_by_concept {
            if values.is_empty() {
                return Err(QuantizerError::EmptyConcept(concept));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(QuantizerError::NonFinite(concept));
            }
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let mut cuts = [0.0; N_CUTS];
            for (k, cut) in cuts.iter_mut().enumerate() {
                *cut = nearest_rank(&sorted, 10 * (k + 1));
            }
            concepts.insert(concept, ConceptCuts { cuts, training_count: Some(sorted.len()) });
        }
        Ok(QuantileMap { concepts })
    }

    /// Rebuilds a map from stored cut points.
    pub fn from_cuts(entries: impl IntoIterator<Item = (ConceptId, [f64; N_CUTS])>) -> Result<Self, QuantizerError> {
        let mut concepts = BTreeMap::new();
        for (concept, cuts) in entries {
            if cuts.iter().any(|c| !c.is_finite()) {
                return Err(QuantizerError::NonFinite(concept));
            }
            if cuts.windows(2).any(|w| w[1] < w[0]) {
                return Err(QuantizerError::UnorderedCuts(concept));
            }
            concepts.insert(concept, ConceptCuts { cuts, training_count: None });
        }
        Ok(QuantileMap { concepts })
    }

    /// Bucket 1..=10: one plus the number of cut points strictly below
    /// `value`. A value equal to a cut point lands in the lower bucket.
    pub fn assign(&self, concept: ConceptId, value: f64) -> Result<u8, QuantizerError> {
        let entry = self.concepts.get(&concept).ok_or(QuantizerError::UnknownConcept(concept))?;
        let below = entry.cuts.partition_point(|&c| c < value);
        Ok((1 + below as u8).min(N_BUCKETS))
    }

    pub fn get(&self, concept: ConceptId) -> Option<&ConceptCuts> {
        self.concepts.get(&concept)
    }

    pub fn contains(&self, concept: ConceptId) -> bool {
        self.concepts.contains_key(&concept)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConceptId, &ConceptCuts)> {
        self.concepts.iter().map(|(&c, cuts)| (c, cuts))
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

/// Groups the numeric measurement values of `events` by concept.
pub fn collect_values<'a>(events: impl IntoIterator<Item = &'a EventRecord>) -> BTreeMap<ConceptId, Vec<f64>> {
    let mut out: BTreeMap<ConceptId, Vec<f64>> = BTreeMap::new();
    for e in events {
        if let (Domain::Measurement, Some(v)) = (e.domain, e.value) {
            out.entry(e.concept_id).or_default().push(v);
        }
    }
    out
}
