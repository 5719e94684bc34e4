//! The six-file CSV layout of an OMOP-shaped extract.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use proq_core::cdm::{CdmError, Dataset, Domain, EventRecord, Gender, PersonRecord, VisitRecord, VisitType};
use proq_core::DateTime;
use thiserror::Error;

pub const PERSON_FILE: &str = "person.csv";
pub const VISIT_FILE: &str = "visit_occurrence.csv";

pub const PERSON_HEADER: [&str; 3] = ["person_id", "gender", "birth_year"];
pub const VISIT_HEADER: [&str; 5] = ["visit_id", "person_id", "visit_type", "start_datetime", "end_datetime"];
pub const EVENT_HEADER: [&str; 5] = ["event_id", "person_id", "visit_id", "concept_id", "event_datetime"];
pub const MEASUREMENT_HEADER: [&str; 6] =
    ["event_id", "person_id", "visit_id", "concept_id", "event_datetime", "value_as_number"];

pub const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn event_file(domain: Domain) -> String {
    format!("{}.csv", domain.table())
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: missing column {column}", path.display())]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("{}:{line}: column {column}: {message}", path.display())]
    Field { path: PathBuf, line: u64, column: String, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Line { path: PathBuf, line: u64, message: String },
    #[error("{}: {message}", path.display())]
    Content { path: PathBuf, message: String },
    #[error("dataset validation failed: {0}")]
    Invalid(#[from] CdmError),
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        FormatError::Csv { path: path.to_path_buf(), source }
    }
}

pub fn parse_datetime(s: &str) -> Result<DateTime, String> {
    DateTime::parse_from_str(s, DATETIME_FORMAT)
        .or_else(|_| DateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .map_err(|e| format!("invalid datetime {s:?}: {e}"))
}

pub fn format_datetime(t: DateTime) -> String {
    t.format(DATETIME_FORMAT).to_string()
}

/// Rows of a headed CSV file, with columns resolved by name.
pub struct Table {
    path: PathBuf,
    reader: csv::Reader<fs::File>,
    columns: Vec<(&'static str, usize)>,
}

pub struct Row<'t> {
    path: &'t Path,
    columns: &'t [(&'static str, usize)],
    record: csv::StringRecord,
}

impl Table {
    pub fn open(path: &Path, required: &[&'static str]) -> Result<Self, FormatError> {
        let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers = reader.headers().map_err(|e| FormatError::csv(path, e))?.clone();
        let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        let columns = required
            .iter()
            .map(|&c| {
                index.get(c).map(|&i| (c, i)).ok_or(FormatError::MissingColumn { path: path.to_path_buf(), column: c })
            })
            .collect::<Result<_, _>>()?;
        Ok(Table { path: path.to_path_buf(), reader, columns })
    }

    pub fn for_each(mut self, mut f: impl FnMut(&Row<'_>) -> Result<(), FormatError>) -> Result<(), FormatError> {
        for record in self.reader.records() {
            let record = record.map_err(|e| FormatError::csv(&self.path, e))?;
            f(&Row { path: &self.path, columns: &self.columns, record })?;
        }
        Ok(())
    }
}

impl Row<'_> {
    pub fn line(&self) -> u64 {
        self.record.position().map_or(0, |p| p.line())
    }

    pub fn raw(&self, column: &str) -> &str {
        let idx = self.columns.iter().find(|(c, _)| *c == column).map(|(_, i)| *i).expect("column was required");
        self.record.get(idx).unwrap_or("").trim()
    }

    pub fn error(&self, column: &str, message: impl Into<String>) -> FormatError {
        FormatError::Field { path: self.path.to_path_buf(), line: self.line(), column: column.to_string(), message: message.into() }
    }

    pub fn parse<T: std::str::FromStr>(&self, column: &str) -> Result<T, FormatError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(column);
        raw.parse().map_err(|e| self.error(column, format!("{e}: {raw:?}")))
    }

    pub fn optional<T: std::str::FromStr>(&self, column: &str) -> Result<Option<T>, FormatError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(column).is_empty() {
            Ok(None)
        } else {
            self.parse(column).map(Some)
        }
    }

    pub fn datetime(&self, column: &str) -> Result<DateTime, FormatError> {
        parse_datetime(self.raw(column)).map_err(|m| self.error(column, m))
    }
}

pub fn read_persons(path: &Path) -> Result<Vec<PersonRecord>, FormatError> {
    let mut out = Vec::new();
    Table::open(path, &PERSON_HEADER)?.for_each(|r| {
        out.push(PersonRecord {
            person_id: r.parse("person_id")?,
            gender: r.parse::<Gender>("gender")?,
            birth_year: r.parse("birth_year")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_visits(path: &Path) -> Result<Vec<VisitRecord>, FormatError> {
    let mut out = Vec::new();
    Table::open(path, &VISIT_HEADER)?.for_each(|r| {
        out.push(VisitRecord {
            visit_id: r.parse("visit_id")?,
            person_id: r.parse("person_id")?,
            visit_type: r.parse::<VisitType>("visit_type")?,
            start: r.datetime("start_datetime")?,
            end: r.datetime("end_datetime")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_events(path: &Path, domain: Domain) -> Result<Vec<EventRecord>, FormatError> {
    let header: &[&'static str] = if domain == Domain::Measurement { &MEASUREMENT_HEADER } else { &EVENT_HEADER };
    let mut out = Vec::new();
    Table::open(path, header)?.for_each(|r| {
        let value = if domain == Domain::Measurement { r.optional::<f64>("value_as_number")? } else { None };
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(r.error("value_as_number", "value must be finite"));
        }
        out.push(EventRecord {
            event_id: r.parse("event_id")?,
            domain,
            concept_id: r.parse("concept_id")?,
            at: r.datetime("event_datetime")?,
            person_id: r.parse("person_id")?,
            visit_id: r.optional("visit_id")?,
            value,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Parsed but not yet cross-validated records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTables {
    pub persons: Vec<PersonRecord>,
    pub visits: Vec<VisitRecord>,
    pub events: Vec<EventRecord>,
}

impl RawTables {
    pub fn into_dataset(self, current_year: i32) -> Result<Dataset, FormatError> {
        Ok(Dataset::from_records(self.persons, self.visits, self.events, current_year)?)
    }
}

/// Parses the six files, the four event tables on separate threads.
pub fn read_tables(dir: &Path) -> Result<RawTables, FormatError> {
    let persons = read_persons(&dir.join(PERSON_FILE))?;
    let visits = read_visits(&dir.join(VISIT_FILE))?;
    let per_domain: Vec<Result<Vec<EventRecord>, FormatError>> = std::thread::scope(|s| {
        let handles: Vec<_> = Domain::ALL
            .iter()
            .map(|&d| s.spawn(move || read_events(&dir.join(event_file(d)), d)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("reader thread panicked")).collect()
    });
    let mut events = Vec::new();
    for r in per_domain {
        events.extend(r?);
    }
    Ok(RawTables { persons, visits, events })
}

pub fn read_dataset(dir: &Path, current_year: i32) -> Result<Dataset, FormatError> {
    read_tables(dir)?.into_dataset(current_year)
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FormatError::csv(path, e))?;
    w.write_record(header).map_err(|e| FormatError::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| FormatError::csv(path, e))?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes the six files in the order the records are given.
pub fn write_tables(dir: &Path, persons: &[PersonRecord], visits: &[VisitRecord], events: &[EventRecord]) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    write_csv(
        &dir.join(PERSON_FILE),
        &PERSON_HEADER,
        persons.iter().map(|p| vec![p.person_id.to_string(), p.gender.code().to_string(), p.birth_year.to_string()]),
    )?;
    write_csv(
        &dir.join(VISIT_FILE),
        &VISIT_HEADER,
        visits.iter().map(|v| {
            vec![
                v.visit_id.to_string(),
                v.person_id.to_string(),
                v.visit_type.code().to_string(),
                format_datetime(v.start),
                format_datetime(v.end),
            ]
        }),
    )?;
    for domain in Domain::ALL {
        let rows = events.iter().filter(|e| e.domain == domain).map(|e| {
            let mut row = vec![
                e.event_id.to_string(),
                e.person_id.to_string(),
                opt(e.visit_id),
                e.concept_id.to_string(),
                format_datetime(e.at),
            ];
            if domain == Domain::Measurement {
                row.push(opt(e.value));
            }
            row
        });
        let header: &[&str] = if domain == Domain::Measurement { &MEASUREMENT_HEADER } else { &EVENT_HEADER };
        write_csv(&dir.join(event_file(domain)), header, rows)?;
    }
    Ok(())
}
