//! Patient token sequences: the token grammar, time-gap buckets, the
//! segment-by-visit tokenizer, the vocabulary and fixed-length encoding.
//!
//! A sequence reads
//!
//! ```text
//! [CLS] GENDER_x  [SEP] AGE_k VS_t  <event> TIME_.. <event> ..  VE_t  [SEP] AGE_k ...
//! ```
//!
//! where each event is its domain token, its concept token and, for
//! measurements with a value of a fitted concept, a quantile token.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::{Datelike, TimeDelta};
use thiserror::Error;

use crate::cdm::{Domain, EventRecord, Gender, PersonRecord, VisitRecord, VisitType};
use crate::outcome::Label;
use crate::quantizer::QuantileMap;
use crate::{ConceptId, DateTime, PersonId, VisitId};

pub const MAX_AGE: u8 = 119;

/// Gap between consecutive events inside a segment, bucketed on (lo, hi].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeBucket {
    M5To15,
    M15To1H,
    H1To2,
    H2To6,
    H6To12,
    H12To1D,
    D1To3,
    D3To1W,
    W1To1Mo,
    Mo1To3,
    Mo3To6,
    Mo6To1Y,
    OverYear,
}

const MINUTE: i64 = 60;
const HOUR: i64 = 60 * MINUTE;
const DAY: i64 = 24 * HOUR;

impl TimeBucket {
    pub const ALL: [TimeBucket; 13] = [
        TimeBucket::M5To15,
        TimeBucket::M15To1H,
        TimeBucket::H1To2,
        TimeBucket::H2To6,
        TimeBucket::H6To12,
        TimeBucket::H12To1D,
        TimeBucket::D1To3,
        TimeBucket::D3To1W,
        TimeBucket::W1To1Mo,
        TimeBucket::Mo1To3,
        TimeBucket::Mo3To6,
        TimeBucket::Mo6To1Y,
        TimeBucket::OverYear,
    ];

    /// Inclusive upper edge in seconds; `None` for the overflow bucket.
    pub fn upper_seconds(self) -> Option<i64> {
        Some(match self {
            TimeBucket::M5To15 => 15 * MINUTE,
            TimeBucket::M15To1H => HOUR,
            TimeBucket::H1To2 => 2 * HOUR,
            TimeBucket::H2To6 => 6 * HOUR,
            TimeBucket::H6To12 => 12 * HOUR,
            TimeBucket::H12To1D => DAY,
            TimeBucket::D1To3 => 3 * DAY,
            TimeBucket::D3To1W => 7 * DAY,
            TimeBucket::W1To1Mo => 30 * DAY,
            TimeBucket::Mo1To3 => 90 * DAY,
            TimeBucket::Mo3To6 => 180 * DAY,
            TimeBucket::Mo6To1Y => 365 * DAY,
            TimeBucket::OverYear => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            TimeBucket::M5To15 => "5m-15m",
            TimeBucket::M15To1H => "15m-1h",
            TimeBucket::H1To2 => "1h-2h",
            TimeBucket::H2To6 => "2h-6h",
            TimeBucket::H6To12 => "6h-12h",
            TimeBucket::H12To1D => "12h-1d",
            TimeBucket::D1To3 => "1d-3d",
            TimeBucket::D3To1W => "3d-1w",
            TimeBucket::W1To1Mo => "1w-1mo",
            TimeBucket::Mo1To3 => "1mo-3mo",
            TimeBucket::Mo3To6 => "3mo-6mo",
            TimeBucket::Mo6To1Y => "6mo-1y",
            TimeBucket::OverYear => "gt-1y",
        }
    }
}

/// Gaps up to and including five minutes produce no token.
pub const MIN_GAP_SECONDS: i64 = 5 * MINUTE;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SequencerError {
    #[error("negative time gap of {0} seconds")]
    NegativeGap(i64),
    #[error("event {event_id} references visit {visit_id} which was not supplied")]
    MissingVisit { event_id: i64, visit_id: VisitId },
    #[error("event {event_id} belongs to person {found}, expected {expected}")]
    WrongPerson { event_id: i64, expected: PersonId, found: PersonId },
    #[error("slice is not in timeline order at index {0}")]
    Unordered(usize),
    #[error("unrecognized token `{0}`")]
    BadToken(String),
    #[error("vocabulary line {line} must be `{expected}`")]
    BadSpecial { line: usize, expected: &'static str },
    #[error("duplicate vocabulary token `{0}`")]
    DuplicateToken(String),
}

pub fn time_bucket(gap: TimeDelta) -> Result<Option<TimeBucket>, SequencerError> {
    let secs = gap.num_seconds();
    if secs < 0 {
        return Err(SequencerError::NegativeGap(secs));
    }
    if secs <= MIN_GAP_SECONDS {
        return Ok(None);
    }
    Ok(TimeBucket::ALL.iter().copied().find(|b| b.upper_seconds().is_none_or(|hi| secs <= hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Pad,
    Cls,
    Sep,
    Mask,
    Unk,
    Gender(Gender),
    Age(u8),
    VisitStart(VisitType),
    VisitEnd(VisitType),
    Domain(Domain),
    Concept(ConceptId),
    Quantile(u8),
    Time(TimeBucket),
}

impl Token {
    /// Special tokens in vocabulary-id order.
    pub const SPECIALS: [Token; 5] = [Token::Pad, Token::Cls, Token::Sep, Token::Mask, Token::Unk];

    pub fn is_special(self) -> bool {
        matches!(self, Token::Pad | Token::Cls | Token::Sep | Token::Mask | Token::Unk)
    }
}

fn domain_token_text(d: Domain) -> &'static str {
    match d {
        Domain::Condition => "[CONDITION]",
        Domain::Drug => "[DRUG]",
        Domain::Procedure => "[PROCEDURE]",
        Domain::Measurement => "[LAB]",
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::Pad => f.write_str("[PAD]"),
            Token::Cls => f.write_str("[CLS]"),
            Token::Sep => f.write_str("[SEP]"),
            Token::Mask => f.write_str("[MASK]"),
            Token::Unk => f.write_str("[UNK]"),
            Token::Gender(g) => write!(f, "GENDER_{}", g.code()),
            Token::Age(k) => write!(f, "AGE_{k}"),
            Token::VisitStart(v) => write!(f, "VS_{}", v.token_suffix()),
            Token::VisitEnd(v) => write!(f, "VE_{}", v.token_suffix()),
            Token::Domain(d) => f.write_str(domain_token_text(d)),
            Token::Concept(c) => write!(f, "C_{c}"),
            Token::Quantile(q) => write!(f, "Q{q}"),
            Token::Time(b) => write!(f, "TIME_{}", b.label()),
        }
    }
}

fn visit_type_from_suffix(s: &str) -> Option<VisitType> {
    VisitType::ALL.into_iter().find(|v| v.token_suffix() == s)
}

/// Parses decimal digits without a sign or leading zeros, so that every
/// token has exactly one spelling.
fn canonical_uint(s: &str) -> Option<u64> {
    let ok = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if ok {
        s.parse().ok()
    } else {
        None
    }
}

impl FromStr for Token {
    type Err = SequencerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(t) = Token::SPECIALS.iter().find(|t| t.to_string() == s) {
            return Ok(*t);
        }
        if let Some(d) = Domain::ALL.into_iter().find(|&d| domain_token_text(d) == s) {
            return Ok(Token::Domain(d));
        }
        let parsed = if let Some(rest) = s.strip_prefix("GENDER_") {
            rest.parse().ok().map(Token::Gender)
        } else if let Some(rest) = s.strip_prefix("AGE_") {
            canonical_uint(rest).filter(|&k| k <= u64::from(MAX_AGE)).map(|k| Token::Age(k as u8))
        } else if let Some(rest) = s.strip_prefix("VS_") {
            visit_type_from_suffix(rest).map(Token::VisitStart)
        } else if let Some(rest) = s.strip_prefix("VE_") {
            visit_type_from_suffix(rest).map(Token::VisitEnd)
        } else if let Some(rest) = s.strip_prefix("C_") {
            let (neg, digits) = match rest.strip_prefix('-') {
                Some(d) => (true, d),
                None => (false, rest),
            };
            canonical_uint(digits)
                .filter(|&v| !(neg && v == 0))
                .and_then(|v| i64::try_from(v).ok())
                .map(|v| Token::Concept(if neg { -v } else { v }))
        } else if let Some(rest) = s.strip_prefix("TIME_") {
            TimeBucket::ALL.into_iter().find(|b| b.label() == rest).map(Token::Time)
        } else if let Some(rest) = s.strip_prefix('Q') {
            canonical_uint(rest).filter(|q| (1..=10).contains(q)).map(|q| Token::Quantile(q as u8))
        } else {
            None
        };
        parsed.ok_or_else(|| SequencerError::BadToken(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub person_id: PersonId,
    pub tokens: Vec<Token>,
    /// Source time of each token, parallel to `tokens`.
    pub times: Vec<DateTime>,
    pub label: Option<Label>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&t.to_string());
        }
        out
    }
}

/// Closed time interval that token times are clamped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: DateTime,
    pub end: DateTime,
}

impl TimeWindow {
    pub const UNBOUNDED: TimeWindow = TimeWindow { start: DateTime::MIN, end: DateTime::MAX };

    fn clamp(&self, t: DateTime) -> DateTime {
        t.clamp(self.start, self.end)
    }
}

fn age_token(year: i32, birth_year: i32) -> Token {
    Token::Age((year - birth_year).clamp(0, i32::from(MAX_AGE)) as u8)
}

enum SegmentKind<'a> {
    Visit(&'a VisitRecord),
    Ambulatory,
}

struct Segment<'a> {
    kind: SegmentKind<'a>,
    events: Vec<&'a EventRecord>,
}

impl Segment<'_> {
    fn sort_key(&self) -> (DateTime, u8, i64) {
        match self.kind {
            SegmentKind::Visit(v) => (v.start, 0, v.visit_id),
            SegmentKind::Ambulatory => (self.events[0].at, 1, 0),
        }
    }
}

struct Builder {
    tokens: Vec<Token>,
    times: Vec<DateTime>,
}

impl Builder {
    fn push(&mut self, token: Token, at: DateTime) {
        // Overlapping visits could otherwise step times backwards.
        let at = self.times.last().map_or(at, |&prev| prev.max(at));
        self.tokens.push(token);
        self.times.push(at);
    }

    fn push_gap(&mut self, from: DateTime, to: DateTime) {
        if let Ok(Some(bucket)) = time_bucket(to - from) {
            self.push(Token::Time(bucket), to);
        }
    }

    fn push_event(&mut self, e: &EventRecord, qm: &QuantileMap) {
        self.push(Token::Domain(e.domain), e.at);
        self.push(Token::Concept(e.concept_id), e.at);
        if let (Domain::Measurement, Some(v)) = (e.domain, e.value) {
            if let Ok(q) = qm.assign(e.concept_id, v) {
                self.push(Token::Quantile(q), e.at);
            }
        }
    }
}

/// Converts a chronologically ordered slice of one person's events into a
/// token sequence. Visit boundary times are clamped into `window`, so a visit
/// straddling the window edge contributes tokens timed inside it.
pub fn tokenize(
    slice: &[EventRecord],
    person: &PersonRecord,
    visits: &[&VisitRecord],
    qm: &QuantileMap,
    window: TimeWindow,
) -> Result<TokenSequence, SequencerError> {
    if let Some(i) = slice.windows(2).position(|w| w[1].timeline_cmp(&w[0]).is_lt()) {
        return Err(SequencerError::Unordered(i + 1));
    }
    let visit_by_id: BTreeMap<VisitId, &VisitRecord> = visits.iter().map(|v| (v.visit_id, *v)).collect();

    let mut by_visit: BTreeMap<VisitId, Segment<'_>> = BTreeMap::new();
    let mut segments: Vec<Segment<'_>> = Vec::new();
    for e in slice {
        if e.person_id != person.person_id {
            return Err(SequencerError::WrongPerson {
                event_id: e.event_id,
                expected: person.person_id,
                found: e.person_id,
            });
        }
        match e.visit_id {
            Some(visit_id) => {
                let visit = *visit_by_id
                    .get(&visit_id)
                    .ok_or(SequencerError::MissingVisit { event_id: e.event_id, visit_id })?;
                by_visit
                    .entry(visit_id)
                    .or_insert_with(|| Segment { kind: SegmentKind::Visit(visit), events: Vec::new() })
                    .events
                    .push(e);
            }
            None => match segments.last_mut() {
                Some(seg) if matches!(seg.kind, SegmentKind::Ambulatory) && seg.events[0].at == e.at => {
                    seg.events.push(e)
                }
                _ => segments.push(Segment { kind: SegmentKind::Ambulatory, events: alloc::vec![e] }),
            },
        }
    }
    segments.extend(by_visit.into_values());
    segments.sort_by_key(Segment::sort_key);

    let mut b = Builder { tokens: Vec::new(), times: Vec::new() };
    let header_time = segments.first().map_or(window.start, |s| match s.kind {
        SegmentKind::Visit(v) => window.clamp(v.start),
        SegmentKind::Ambulatory => s.events[0].at,
    });
    b.push(Token::Cls, header_time);
    b.push(Token::Gender(person.gender), header_time);

    for seg in &segments {
        match seg.kind {
            SegmentKind::Visit(v) => {
                let start = window.clamp(v.start);
                let end = window.clamp(v.end);
                b.push(Token::Sep, start);
                b.push(age_token(v.start.year(), person.birth_year), start);
                b.push(Token::VisitStart(v.visit_type), start);
                let mut prev = start;
                for e in &seg.events {
                    b.push_gap(prev, e.at);
                    b.push_event(e, qm);
                    prev = e.at;
                }
                b.push_gap(prev, end);
                b.push(Token::VisitEnd(v.visit_type), end);
            }
            SegmentKind::Ambulatory => {
                let at = seg.events[0].at;
                b.push(Token::Sep, at);
                b.push(age_token(at.year(), person.birth_year), at);
                for e in &seg.events {
                    b.push_event(e, qm);
                }
            }
        }
    }

    Ok(TokenSequence { person_id: person.person_id, tokens: b.tokens, times: b.times, label: None })
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const N_SPECIAL: u32 = 5;

/// Bijective token <-> id map. Ids 0..5 are the specials in
/// [`Token::SPECIALS`] order; the rest are sorted by token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: BTreeMap<Token, u32>,
}

impl Vocabulary {
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut seen = alloc::collections::BTreeSet::new();
        for seq in sequences {
            seen.extend(seq.tokens.iter().copied().filter(|t| !t.is_special()));
        }
        let tokens: Vec<Token> = Token::SPECIALS.into_iter().chain(seen).collect();
        Self::from_ordered(tokens).expect("specials first and tokens distinct")
    }

    fn from_ordered(tokens: Vec<Token>) -> Result<Self, SequencerError> {
        for (line, expected) in Token::SPECIALS.iter().enumerate() {
            if tokens.get(line) != Some(expected) {
                return Err(SequencerError::BadSpecial { line, expected: special_text(line) });
            }
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(*t, i as u32).is_some() {
                return Err(SequencerError::DuplicateToken(t.to_string()));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Parses token texts where line number = id.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self, SequencerError> {
        let tokens = lines.into_iter().map(str::parse).collect::<Result<Vec<Token>, _>>()?;
        Self::from_ordered(tokens)
    }

    pub fn id(&self, token: &Token) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token text per line, newline-terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&format!("{t}\n"));
        }
        out
    }
}

fn special_text(id: usize) -> &'static str {
    ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"][id]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

/// Fixed-length encoding. Long sequences keep their first two tokens
/// ([CLS], gender) and the most recent `max_len - 2` tokens; short ones are
/// right-padded.
pub fn encode(tokens: &[Token], vocab: &Vocabulary, max_len: usize) -> Encoded {
    assert!(max_len >= 2, "max_len must be at least 2");
    let kept: Vec<&Token> = if tokens.len() > max_len {
        tokens[..2].iter().chain(&tokens[tokens.len() - (max_len - 2)..]).collect()
    } else {
        tokens.iter().collect()
    };
    let mut ids: Vec<u32> = kept.iter().map(|t| vocab.id(t)).collect();
    let mut mask = alloc::vec![1u8; ids.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    Encoded { ids, mask }
}
