//! Case/control labeling per (follow-up, assessment) task and the
//! leakage-free assessment window.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::{NaiveTime, TimeDelta};
use thiserror::Error;

use crate::cdm::{CdmError, Dataset, EventRecord};
use crate::cohort::CohortMember;
use crate::{Date, DateTime, PersonId};

pub const FOLLOWUP_GRID: [u32; 5] = [180, 365, 730, 1095, 1460];
pub const ASSESSMENT_GRID: [u32; 3] = [180, 365, 730];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskSpec {
    pub followup_days: u32,
    pub assessment_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("follow-up and assessment periods must be positive")]
pub struct TaskSpecError;

impl TaskSpec {
    pub fn new(followup_days: u32, assessment_days: u32) -> Result<Self, TaskSpecError> {
        if followup_days == 0 || assessment_days == 0 {
            return Err(TaskSpecError);
        }
        Ok(TaskSpec { followup_days, assessment_days })
    }

    /// Every (follow-up, assessment) pair, follow-up major.
    pub fn grid(followups: &[u32], assessments: &[u32]) -> Result<Vec<TaskSpec>, TaskSpecError> {
        followups
            .iter()
            .flat_map(|&f| assessments.iter().map(move |&a| TaskSpec::new(f, a)))
            .collect()
    }

    /// The 5 × 3 evaluation grid.
    pub fn full_grid() -> Vec<TaskSpec> {
        Self::grid(&FOLLOWUP_GRID, &ASSESSMENT_GRID).expect("grid values are positive")
    }

    /// Short identifier used in artifact names, e.g. `F365_A180`.
    pub fn key(&self) -> alloc::string::String {
        alloc::format!("F{}_A{}", self.followup_days, self.assessment_days)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Control,
    Case,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Case => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Control),
            1 => Some(Label::Case),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Control => "control",
            Label::Case => "case",
        })
    }
}

impl FromStr for Label {
    type Err = crate::cdm::ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "case" => Ok(Label::Case),
            "control" => Ok(Label::Control),
            _ => Err(crate::cdm::ParseEnumError { kind: "label" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub person_id: PersonId,
    /// Stage-3a index date.
    pub anchor: Date,
    pub window_start: Date,
    pub followup_days: u32,
    pub assessment_days: u32,
    pub label: Label,
}

impl LabeledExample {
    pub fn task(&self) -> TaskSpec {
        TaskSpec { followup_days: self.followup_days, assessment_days: self.assessment_days }
    }

    /// First instant of the assessment window.
    pub fn window_open(&self) -> DateTime {
        self.window_start.and_time(NaiveTime::MIN)
    }

    /// Last instant of the assessment window: the end of the anchor day.
    pub fn window_close(&self) -> DateTime {
        end_of_day(self.anchor)
    }

    pub fn contains(&self, t: DateTime) -> bool {
        self.window_open() <= t && t <= self.window_close()
    }
}

pub fn end_of_day(d: Date) -> DateTime {
    d.and_hms_opt(23, 59, 59).expect("valid time of day")
}

/// Labels one member, or `None` if it lacks a stage-3a index or sufficient
/// follow-up.
pub fn label_member(m: &CohortMember, task: TaskSpec) -> Option<LabeledExample> {
    let anchor = m.stage3a_index?;
    let horizon = i64::from(task.followup_days);
    let progressed_within = m.stage5_index.is_some_and(|s5| (s5 - anchor).num_days() <= horizon);
    let label = if progressed_within {
        Label::Case
    } else if (m.last_observed - anchor).num_days() > horizon {
        Label::Control
    } else {
        return None;
    };
    Some(LabeledExample {
        person_id: m.person_id,
        anchor,
        window_start: anchor - TimeDelta::days(i64::from(task.assessment_days)),
        followup_days: task.followup_days,
        assessment_days: task.assessment_days,
        label,
    })
}

pub fn label_cohort(members: &[CohortMember], task: TaskSpec) -> Vec<LabeledExample> {
    members.iter().filter_map(|m| label_member(m, task)).collect()
}

/// The person's events inside `[window_start 00:00:00, anchor 23:59:59]`.
pub fn assessment_slice<'a>(ds: &'a Dataset, ex: &LabeledExample) -> Result<&'a [EventRecord], CdmError> {
    let events = ds.events_for(ex.person_id, Some(ex.window_close()))?;
    let open = ex.window_open();
    Ok(&events[events.partition_point(|e| e.at < open)..])
}
