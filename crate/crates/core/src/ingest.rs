//! Interaction-event logs: parsing, validation, dropout labelling and
//! chronological iteration.
//!
//! The on-disk format is one submission per line:
//!
//! ```text
//! user_id,exercise_id,workbook_id,timestamp_ms,score
//! ```
//!
//! A header line is optional and is recognised by a non-numeric timestamp
//! field. Dropout labels never appear in the file; they are derived with
//! [`derive_dropout_labels`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{self, BufRead, Write};
use std::time::Duration;

use thiserror::Error;

pub const HEADER: &str = "user_id,exercise_id,workbook_id,timestamp_ms,score";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate event ({user_id}, {exercise_id}, t={timestamp})")]
    DuplicateEvent {
        line: usize,
        user_id: String,
        exercise_id: String,
        timestamp: i64,
    },
    #[error("exercise {exercise_id} appears in workbooks {first} and {second}")]
    InconsistentWorkbook {
        exercise_id: String,
        first: String,
        second: String,
    },
    #[error("user {user_id}: dropout label must be on the final event only")]
    InvalidDropoutLabel { user_id: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One exercise submission.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionEvent {
    pub user_id: String,
    pub exercise_id: String,
    pub workbook_id: String,
    pub timestamp: i64,
    pub correct: bool,
    pub dropout: bool,
}

impl InteractionEvent {
    pub fn new(user_id: &str, exercise_id: &str, workbook_id: &str, timestamp: i64, correct: bool) -> Self {
        InteractionEvent {
            user_id: user_id.to_string(),
            exercise_id: exercise_id.to_string(),
            workbook_id: workbook_id.to_string(),
            timestamp,
            correct,
            dropout: false,
        }
    }

    /// Binary score as a real, the value the factorization trains on.
    pub fn score(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParseMode {
    /// Any malformed or duplicate line rejects the whole ingest.
    #[default]
    Strict,
    /// Malformed and duplicate lines are skipped and counted.
    Lenient,
}

/// Result of [`parse_log`]: the log plus counts of skipped lines.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub log: EventLog,
    pub malformed: usize,
    pub duplicates: usize,
}

/// An immutable, validated event log.
///
/// Events are stored in global chronological order (stable on equal
/// timestamps), which also makes every user's subsequence chronological.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    events: Vec<InteractionEvent>,
    user_index: BTreeMap<String, Vec<usize>>,
    workbook_index: BTreeMap<String, BTreeSet<String>>,
    exercise_workbook: BTreeMap<String, String>,
}

impl EventLog {
    /// Build a log from events in input order.
    pub fn from_events(mut events: Vec<InteractionEvent>) -> Result<Self, IngestError> {
        // stable: equal timestamps keep input order
        events.sort_by_key(|e| e.timestamp);

        let mut exercise_workbook: BTreeMap<String, String> = BTreeMap::new();
        let mut workbook_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut user_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, e) in events.iter().enumerate() {
            match exercise_workbook.get(&e.exercise_id) {
                Some(wb) if *wb != e.workbook_id => {
                    return Err(IngestError::InconsistentWorkbook {
                        exercise_id: e.exercise_id.clone(),
                        first: wb.clone(),
                        second: e.workbook_id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    exercise_workbook.insert(e.exercise_id.clone(), e.workbook_id.clone());
                }
            }
            workbook_index
                .entry(e.workbook_id.clone())
                .or_default()
                .insert(e.exercise_id.clone());
            user_index.entry(e.user_id.clone()).or_default().push(pos);
        }

        for (user, positions) in &user_index {
            let last = *positions.last().expect("non-empty");
            if positions.iter().any(|&p| p != last && events[p].dropout) {
                return Err(IngestError::InvalidDropoutLabel { user_id: user.clone() });
            }
        }

        Ok(EventLog {
            events,
            user_index,
            workbook_index,
            exercise_workbook,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn user_count(&self) -> usize {
        self.user_index.len()
    }

    /// User ids in ascending order.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn user_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.user_index
    }

    pub fn workbook_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.workbook_index
    }

    pub fn workbook_of(&self, exercise_id: &str) -> Option<&str> {
        self.exercise_workbook.get(exercise_id).map(String::as_str)
    }

    /// Chronological events of one user; empty if the user is unknown.
    pub fn user_events<'a>(&'a self, user_id: &str) -> impl Iterator<Item = &'a InteractionEvent> + 'a {
        self.user_index
            .get(user_id)
            .map(|p| p.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |&p| &self.events[p])
    }

    /// Number of distinct exercises per workbook as observed in the log.
    pub fn workbook_sizes(&self) -> BTreeMap<String, usize> {
        self.workbook_index
            .iter()
            .map(|(wb, ex)| (wb.clone(), ex.len()))
            .collect()
    }

    pub fn dropout_count(&self) -> usize {
        self.events.iter().filter(|e| e.dropout).count()
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

enum Line {
    Header,
    Record(InteractionEvent),
}

fn parse_line(raw: &str, first: bool) -> Result<Line, String> {
    let fields: Vec<&str> = raw.split(',').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let timestamp = match fields[3].parse::<i64>() {
        Ok(t) => t,
        Err(_) if first => return Ok(Line::Header),
        Err(_) => return Err(format!("bad timestamp {:?}", fields[3])),
    };
    for id in &fields[..3] {
        if !valid_id(id) {
            return Err(format!("bad id {:?}", id));
        }
    }
    let correct = match fields[4] {
        "0" => false,
        "1" => true,
        other => return Err(format!("score must be 0 or 1, found {:?}", other)),
    };
    Ok(Line::Record(InteractionEvent::new(
        fields[0], fields[1], fields[2], timestamp, correct,
    )))
}

/// Parse a newline-delimited event log.
pub fn parse_log<R: BufRead>(source: R, mode: ParseMode) -> Result<Ingested, IngestError> {
    let mut events = Vec::new();
    let mut seen: HashSet<(String, String, i64)> = HashSet::new();
    let mut malformed = 0;
    let mut duplicates = 0;
    let mut first = true;

    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(trimmed, first);
        first = false;
        let event = match parsed {
            Ok(Line::Header) => continue,
            Ok(Line::Record(e)) => e,
            Err(reason) => match mode {
                ParseMode::Strict => {
                    return Err(IngestError::MalformedRecord { line: line_no, reason })
                }
                ParseMode::Lenient => {
                    malformed += 1;
                    continue;
                }
            },
        };
        let key = (event.user_id.clone(), event.exercise_id.clone(), event.timestamp);
        if !seen.insert(key) {
            match mode {
                ParseMode::Strict => {
                    return Err(IngestError::DuplicateEvent {
                        line: line_no,
                        user_id: event.user_id,
                        exercise_id: event.exercise_id,
                        timestamp: event.timestamp,
                    })
                }
                ParseMode::Lenient => {
                    duplicates += 1;
                    continue;
                }
            }
        }
        events.push(event);
    }

    Ok(Ingested {
        log: EventLog::from_events(events)?,
        malformed,
        duplicates,
    })
}

/// Serialize a log in the ingest format (with header), chronologically.
pub fn write_log<W: Write>(log: &EventLog, mut out: W) -> io::Result<()> {
    writeln!(out, "{}", HEADER)?;
    for e in log.events() {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.user_id,
            e.exercise_id,
            e.workbook_id,
            e.timestamp,
            u8::from(e.correct)
        )?;
    }
    Ok(())
}

/// Label each user's final event as a dropout iff the workbook the user was
/// last active in still has exercises the user never answered.
///
/// `workbook_sizes` gives the full size of each workbook; workbooks missing
/// from it fall back to the number of distinct exercises seen in the log.
/// `gap_threshold` is reserved for a session-gap rule and is not used here.
pub fn derive_dropout_labels(
    mut log: EventLog,
    _gap_threshold: Duration,
    workbook_sizes: &BTreeMap<String, usize>,
) -> EventLog {
    for e in &mut log.events {
        e.dropout = false;
    }
    let mut finals = Vec::new();
    for positions in log.user_index.values() {
        let last = *positions.last().expect("non-empty");
        let wb = &log.events[last].workbook_id;
        let answered: BTreeSet<&str> = positions
            .iter()
            .map(|&p| &log.events[p])
            .filter(|e| e.workbook_id == *wb)
            .map(|e| e.exercise_id.as_str())
            .collect();
        let size = workbook_sizes
            .get(wb)
            .copied()
            .unwrap_or_else(|| log.workbook_index.get(wb).map_or(0, BTreeSet::len));
        if answered.len() < size {
            finals.push(last);
        }
    }
    for p in finals {
        log.events[p].dropout = true;
    }
    log
}

/// Events in global timestamp order, stable on ties.
pub fn chronological_stream(log: &EventLog) -> impl Iterator<Item = &InteractionEvent> {
    log.events.iter()
}
