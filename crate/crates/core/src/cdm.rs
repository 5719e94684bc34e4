//! Typed records for the six CDM domain tables and a validated, immutable
//! [`Dataset`] that links them by person and visit.

use alloc::collections::btree_map::Entry;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use chrono::Datelike;
use thiserror::Error;

use crate::{ConceptId, DateTime, EventId, PersonId, VisitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
            Gender::Unknown => "U",
        }
    }
}

impl FromStr for Gender {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Gender::Male),
            "F" => Ok(Gender::Female),
            "U" => Ok(Gender::Unknown),
            _ => Err(ParseEnumError { kind: "gender" }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VisitType {
    Outpatient,
    Inpatient,
    Emergency,
}

impl VisitType {
    pub const ALL: [VisitType; 3] = [VisitType::Outpatient, VisitType::Inpatient, VisitType::Emergency];

    /// Name used in `visit_occurrence.csv`.
    pub fn code(self) -> &'static str {
        match self {
            VisitType::Outpatient => "OUTPATIENT",
            VisitType::Inpatient => "INPATIENT",
            VisitType::Emergency => "EMERGENCY",
        }
    }

    /// Suffix used in visit start/end tokens.
    pub fn token_suffix(self) -> &'static str {
        match self {
            VisitType::Outpatient => "OUT",
            VisitType::Inpatient => "IN",
            VisitType::Emergency => "ER",
        }
    }
}

impl FromStr for VisitType {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OUTPATIENT" => Ok(VisitType::Outpatient),
            "INPATIENT" => Ok(VisitType::Inpatient),
            "EMERGENCY" => Ok(VisitType::Emergency),
            _ => Err(ParseEnumError { kind: "visit type" }),
        }
    }
}

/// Event domain. The declaration order is the tie-break rank used when two
/// events share a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Condition,
    Drug,
    Procedure,
    Measurement,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Condition, Domain::Drug, Domain::Procedure, Domain::Measurement];

    /// Source table name, without extension.
    pub fn table(self) -> &'static str {
        match self {
            Domain::Condition => "condition_occurrence",
            Domain::Drug => "drug_exposure",
            Domain::Procedure => "procedure_occurrence",
            Domain::Measurement => "measurement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognized {kind}")]
pub struct ParseEnumError {
    pub kind: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonRecord {
    pub person_id: PersonId,
    pub gender: Gender,
    pub birth_year: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitRecord {
    pub visit_id: VisitId,
    pub person_id: PersonId,
    pub visit_type: VisitType,
    pub start: DateTime,
    pub end: DateTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub event_id: EventId,
    pub domain: Domain,
    pub concept_id: ConceptId,
    pub at: DateTime,
    pub person_id: PersonId,
    pub visit_id: Option<VisitId>,
    /// Numeric result; only measurements carry one.
    pub value: Option<f64>,
}

impl EventRecord {
    /// Total order used for patient timelines:
    /// (timestamp, domain rank, concept_id, event_id).
    pub fn timeline_cmp(&self, other: &Self) -> Ordering {
        (self.at, self.domain, self.concept_id, self.event_id).cmp(&(
            other.at,
            other.domain,
            other.concept_id,
            other.event_id,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CdmError {
    #[error("duplicate person_id {0}")]
    DuplicatePerson(PersonId),
    #[error("person {person_id}: birth_year {birth_year} outside 1900..={max_year}")]
    BirthYear { person_id: PersonId, birth_year: i32, max_year: i32 },
    #[error("duplicate visit_id {0}")]
    DuplicateVisit(VisitId),
    #[error("duplicate event_id {event_id} in {table}", table = domain.table())]
    DuplicateEvent { domain: Domain, event_id: EventId },
    #[error("{table} row {id} references unknown person_id {person_id}")]
    DanglingPerson { table: &'static str, id: i64, person_id: PersonId },
    #[error("{table} event {event_id} references unknown visit_id {visit_id}", table = domain.table())]
    DanglingVisit { domain: Domain, event_id: EventId, visit_id: VisitId },
    #[error("{table} event {event_id} belongs to person {person_id} but visit {visit_id} does not", table = domain.table())]
    VisitPersonMismatch { domain: Domain, event_id: EventId, person_id: PersonId, visit_id: VisitId },
    #[error("visit {0} ends before it starts")]
    VisitOrder(VisitId),
    #[error("{table} event {event_id} at {at} lies outside visit {visit_id}", table = domain.table())]
    EventOutsideVisit { domain: Domain, event_id: EventId, visit_id: VisitId, at: DateTime },
    #[error("{table} event {event_id} carries a value but only measurements may", table = domain.table())]
    ValueOnNonMeasurement { domain: Domain, event_id: EventId },
    #[error("measurement {0} has a non-finite value")]
    NonFiniteValue(EventId),
    #[error("unknown person_id {0}")]
    UnknownPerson(PersonId),
}

/// Validated, immutable collection of persons, visits and events.
///
/// Per-person events are stored in timeline order, so [`Dataset::events_for`]
/// is a slice lookup. Construction order of the inputs never affects the
/// result.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    persons: BTreeMap<PersonId, PersonRecord>,
    visits: BTreeMap<VisitId, VisitRecord>,
    visits_by_person: BTreeMap<PersonId, Vec<VisitId>>,
    events_by_person: BTreeMap<PersonId, Vec<EventRecord>>,
}

impl Dataset {
    /// Validates and links the records. `current_year` bounds birth years.
    pub fn from_records(
        persons: Vec<PersonRecord>,
        visits: Vec<VisitRecord>,
        events: Vec<EventRecord>,
        current_year: i32,
    ) -> Result<Self, CdmError> {
        let mut person_map = BTreeMap::new();
        for p in persons {
            if !(1900..=current_year).contains(&p.birth_year) {
                return Err(CdmError::BirthYear {
                    person_id: p.person_id,
                    birth_year: p.birth_year,
                    max_year: current_year,
                });
            }
            match person_map.entry(p.person_id) {
                Entry::Occupied(_) => return Err(CdmError::DuplicatePerson(p.person_id)),
                Entry::Vacant(slot) => {
                    slot.insert(p);
                }
            }
        }

        let mut visit_map = BTreeMap::new();
        for v in visits {
            if !person_map.contains_key(&v.person_id) {
                return Err(CdmError::DanglingPerson {
                    table: "visit_occurrence",
                    id: v.visit_id,
                    person_id: v.person_id,
                });
            }
            if v.start > v.end {
                return Err(CdmError::VisitOrder(v.visit_id));
            }
            match visit_map.entry(v.visit_id) {
                Entry::Occupied(_) => return Err(CdmError::DuplicateVisit(v.visit_id)),
                Entry::Vacant(slot) => {
                    slot.insert(v);
                }
            }
        }

        let mut seen_events = BTreeSet::new();
        let mut events_by_person: BTreeMap<PersonId, Vec<EventRecord>> =
            person_map.keys().map(|&id| (id, Vec::new())).collect();
        for e in events {
            validate_event(&e, &visit_map)?;
            if !seen_events.insert((e.domain, e.event_id)) {
                return Err(CdmError::DuplicateEvent { domain: e.domain, event_id: e.event_id });
            }
            match events_by_person.get_mut(&e.person_id) {
                Some(list) => list.push(e),
                None => {
                    return Err(CdmError::DanglingPerson {
                        table: e.domain.table(),
                        id: e.event_id,
                        person_id: e.person_id,
                    })
                }
            }
        }
        for list in events_by_person.values_mut() {
            list.sort_by(EventRecord::timeline_cmp);
        }

        let mut visits_by_person: BTreeMap<PersonId, Vec<VisitId>> =
            person_map.keys().map(|&id| (id, Vec::new())).collect();
        for v in visit_map.values() {
            visits_by_person.entry(v.person_id).or_default().push(v.visit_id);
        }
        for ids in visits_by_person.values_mut() {
            ids.sort_by_key(|id| (visit_map[id].start, *id));
        }

        Ok(Dataset { persons: person_map, visits: visit_map, visits_by_person, events_by_person })
    }

    pub fn person(&self, id: PersonId) -> Option<&PersonRecord> {
        self.persons.get(&id)
    }

    /// Persons in ascending id order.
    pub fn persons(&self) -> impl Iterator<Item = &PersonRecord> {
        self.persons.values()
    }

    pub fn person_ids(&self) -> impl Iterator<Item = PersonId> + '_ {
        self.persons.keys().copied()
    }

    pub fn visit(&self, id: VisitId) -> Option<&VisitRecord> {
        self.visits.get(&id)
    }

    /// Visits in ascending id order.
    pub fn visits(&self) -> impl Iterator<Item = &VisitRecord> {
        self.visits.values()
    }

    /// A person's visits ordered by (start, visit_id).
    pub fn visits_of(&self, person_id: PersonId) -> Result<Vec<&VisitRecord>, CdmError> {
        let ids = self.visits_by_person.get(&person_id).ok_or(CdmError::UnknownPerson(person_id))?;
        Ok(ids.iter().map(|id| &self.visits[id]).collect())
    }

    /// Events in person order, each person's events in timeline order.
    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.events_by_person.values().flatten()
    }

    /// A person's events in timeline order, optionally cut at `until`
    /// (inclusive).
    pub fn events_for(&self, person_id: PersonId, until: Option<DateTime>) -> Result<&[EventRecord], CdmError> {
        let all = self.events_by_person.get(&person_id).ok_or(CdmError::UnknownPerson(person_id))?;
        Ok(match until {
            Some(limit) => &all[..all.partition_point(|e| e.at <= limit)],
            None => all,
        })
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    pub fn n_events(&self) -> usize {
        self.events_by_person.values().map(Vec::len).sum()
    }

    pub fn n_events_in(&self, domain: Domain) -> usize {
        self.events().filter(|e| e.domain == domain).count()
    }

    /// The latest calendar year referenced by any visit or event, if any.
    pub fn max_year(&self) -> Option<i32> {
        let visit_years = self.visits.values().map(|v| v.end.year());
        let event_years = self.events().map(|e| e.at.year());
        visit_years.chain(event_years).max()
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} persons, {} visits", self.n_persons(), self.n_visits())?;
        for d in Domain::ALL {
            write!(f, ", {} {}", self.n_events_in(d), d.table())?;
        }
        Ok(())
    }
}

fn validate_event(e: &EventRecord, visits: &BTreeMap<VisitId, VisitRecord>) -> Result<(), CdmError> {
    match (e.domain, e.value) {
        (Domain::Measurement, Some(v)) if !v.is_finite() => return Err(CdmError::NonFiniteValue(e.event_id)),
        (Domain::Measurement, _) | (_, None) => {}
        (domain, Some(_)) => return Err(CdmError::ValueOnNonMeasurement { domain, event_id: e.event_id }),
    }
    if let Some(visit_id) = e.visit_id {
        let visit = visits.get(&visit_id).ok_or(CdmError::DanglingVisit {
            domain: e.domain,
            event_id: e.event_id,
            visit_id,
        })?;
        if visit.person_id != e.person_id {
            return Err(CdmError::VisitPersonMismatch {
                domain: e.domain,
                event_id: e.event_id,
                person_id: e.person_id,
                visit_id,
            });
        }
        if e.at < visit.start || e.at > visit.end {
            return Err(CdmError::EventOutsideVisit { domain: e.domain, event_id: e.event_id, visit_id, at: e.at });
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use alloc::vec;

    fn visit(id: VisitId, person: PersonId, start: DateTime, end: DateTime) -> VisitRecord {
        VisitRecord { visit_id: id, person_id: person, visit_type: VisitType::Outpatient, start, end }
    }

    #[test]
    fn single_person_single_visit_no_events() {
        let ds = Dataset::from_records(vec![person(1)], vec![visit(10, 1, at(0), at(0))], vec![], 2026).unwrap();
        assert_eq!(ds.n_persons(), 1);
        assert_eq!(ds.n_visits(), 1);
        assert_eq!(ds.n_events(), 0);
        assert!(ds.events_for(1, None).unwrap().is_empty());
    }

    #[test]
    fn simultaneous_events_order_by_domain_rank() {
        let events = vec![event(1, Domain::Drug, 5, at(3), 1), event(2, Domain::Condition, 9, at(3), 1)];
        let ds = Dataset::from_records(vec![person(1)], vec![], events, 2026).unwrap();
        let got = ds.events_for(1, None).unwrap();
        assert_eq!(got[0].domain, Domain::Condition);
        assert_eq!(got[1].domain, Domain::Drug);
    }

    #[test]
    fn until_before_everything_is_empty() {
        let events = vec![event(1, Domain::Drug, 5, at(3), 1)];
        let ds = Dataset::from_records(vec![person(1)], vec![], events, 2026).unwrap();
        assert!(ds.events_for(1, Some(at(2))).unwrap().is_empty());
        assert_eq!(ds.events_for(1, Some(at(3))).unwrap().len(), 1);
    }

    #[test]
    fn unknown_person_is_an_error() {
        let ds = Dataset::from_records(vec![person(1)], vec![], vec![], 2026).unwrap();
        assert_eq!(ds.events_for(7, None), Err(CdmError::UnknownPerson(7)));
    }

    #[test]
    fn rejects_integrity_violations() {
        let p = || vec![person(1)];
        assert_eq!(
            Dataset::from_records(vec![person(1), person(1)], vec![], vec![], 2026),
            Err(CdmError::DuplicatePerson(1))
        );
        assert!(matches!(
            Dataset::from_records(vec![PersonRecord { birth_year: 1850, ..person(1) }], vec![], vec![], 2026),
            Err(CdmError::BirthYear { .. })
        ));
        assert!(matches!(
            Dataset::from_records(p(), vec![visit(10, 2, at(0), at(0))], vec![], 2026),
            Err(CdmError::DanglingPerson { .. })
        ));
        assert_eq!(
            Dataset::from_records(p(), vec![visit(10, 1, at(1), at(0))], vec![], 2026),
            Err(CdmError::VisitOrder(10))
        );
        let mut outside = event(1, Domain::Drug, 5, at(2), 1);
        outside.visit_id = Some(10);
        assert!(matches!(
            Dataset::from_records(p(), vec![visit(10, 1, at(0), at(1))], vec![outside.clone()], 2026),
            Err(CdmError::EventOutsideVisit { .. })
        ));
        outside.visit_id = Some(11);
        assert!(matches!(
            Dataset::from_records(p(), vec![visit(10, 1, at(0), at(1))], vec![outside], 2026),
            Err(CdmError::DanglingVisit { .. })
        ));
        let mut valued = event(1, Domain::Condition, 5, at(2), 1);
        valued.value = Some(1.0);
        assert!(matches!(
            Dataset::from_records(p(), vec![], vec![valued], 2026),
            Err(CdmError::ValueOnNonMeasurement { .. })
        ));
    }

    #[test]
    fn event_visit_must_belong_to_same_person() {
        let mut e = event(1, Domain::Drug, 5, at(0), 2);
        e.visit_id = Some(10);
        let err = Dataset::from_records(vec![person(1), person(2)], vec![visit(10, 1, at(0), at(0))], vec![e], 2026);
        assert!(matches!(err, Err(CdmError::VisitPersonMismatch { .. })));
    }

    #[test]
    fn measurement_without_value_is_kept() {
        let e = event(1, Domain::Measurement, 5, at(0), 1);
        let ds = Dataset::from_records(vec![person(1)], vec![], vec![e], 2026).unwrap();
        assert_eq!(ds.events_for(1, None).unwrap()[0].value, None);
    }
}
