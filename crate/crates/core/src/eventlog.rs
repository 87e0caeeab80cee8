//! Line-delimited simulation event log: `time_s,event_type,grain_id,lane,detail`.
//!
//! Absent ids are written as `-`. `detail` holds `key=value` pairs joined
//! by `;`. Floats use Rust's shortest round-trip formatting, so a parsed
//! log reproduces every number exactly.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    RunStart,
    FeedGrain,
    FrameCapture,
    ValveFire,
    LateCommand,
    GrainAtNozzle,
    GrainBinned,
    RunEnd,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::RunStart => "RunStart",
            EventKind::FeedGrain => "FeedGrain",
            EventKind::FrameCapture => "FrameCapture",
            EventKind::ValveFire => "ValveFire",
            EventKind::LateCommand => "LateCommand",
            EventKind::GrainAtNozzle => "GrainAtNozzle",
            EventKind::GrainBinned => "GrainBinned",
            EventKind::RunEnd => "RunEnd",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "RunStart" => EventKind::RunStart,
            "FeedGrain" => EventKind::FeedGrain,
            "FrameCapture" => EventKind::FrameCapture,
            "ValveFire" => EventKind::ValveFire,
            "LateCommand" => EventKind::LateCommand,
            "GrainAtNozzle" => EventKind::GrainAtNozzle,
            "GrainBinned" => EventKind::GrainBinned,
            "RunEnd" => EventKind::RunEnd,
            other => return Err(format!("unknown event type {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub grain: Option<u64>,
    pub lane: Option<usize>,
    pub detail: Vec<(String, String)>,
}

impl EventRecord {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Self {
            time,
            kind,
            grain: None,
            lane: None,
            detail: Vec::new(),
        }
    }

    pub fn grain(mut self, id: u64) -> Self {
        self.grain = Some(id);
        self
    }

    pub fn lane(mut self, lane: usize) -> Self {
        self.lane = Some(lane);
        self
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.detail.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.time, self.kind.name())?;
        match self.grain {
            Some(g) => write!(f, "{g},")?,
            None => f.write_str("-,")?,
        }
        match self.lane {
            Some(l) => write!(f, "{l},")?,
            None => f.write_str("-,")?,
        }
        for (i, (k, v)) in self.detail.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("event log line {line}: {reason}")]
pub struct LogError {
    pub line: usize,
    pub reason: String,
}

fn parse_line(line: &str, lineno: usize) -> Result<EventRecord, LogError> {
    let err = |reason: String| LogError {
        line: lineno,
        reason,
    };
    let fields: Vec<&str> = line.splitn(5, ',').collect();
    if fields.len() != 5 {
        return Err(err(format!(
            "expected 5 fields, found {} (truncated record?)",
            fields.len()
        )));
    }
    let time: f64 = fields[0]
        .parse()
        .map_err(|_| err(format!("bad time {:?}", fields[0])))?;
    let kind: EventKind = fields[1].parse().map_err(err)?;
    let grain = match fields[2] {
        "-" => None,
        g => Some(g.parse().map_err(|_| err(format!("bad grain id {g:?}")))?),
    };
    let lane = match fields[3] {
        "-" => None,
        l => Some(l.parse().map_err(|_| err(format!("bad lane {l:?}")))?),
    };
    let mut detail = Vec::new();
    if !fields[4].is_empty() {
        for pair in fields[4].split(';') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| err(format!("bad detail entry {pair:?}")))?;
            detail.push((k.to_string(), v.to_string()));
        }
    }
    Ok(EventRecord {
        time,
        kind,
        grain,
        lane,
        detail,
    })
}

pub fn write_log(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Parses a complete log. The last record must be `RunEnd` and its
/// `events` count must match, so a cut-off file is reported at the line
/// where it ends.
pub fn parse_log(text: &str) -> Result<Vec<EventRecord>, LogError> {
    let mut records = Vec::new();
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        last_line = i + 1;
        if line.is_empty() {
            continue;
        }
        records.push(parse_line(line, i + 1)?);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(LogError {
            line: last_line,
            reason: "record not terminated (truncated log)".into(),
        });
    }
    match records.last() {
        Some(end) if end.kind == EventKind::RunEnd => {
            let expected = end
                .get("events")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| LogError {
                    line: last_line,
                    reason: "RunEnd without event count".into(),
                })?;
            if expected != records.len() {
                return Err(LogError {
                    line: last_line,
                    reason: format!("RunEnd counts {expected} records, log has {}", records.len()),
                });
            }
            Ok(records)
        }
        _ => Err(LogError {
            line: last_line + 1,
            reason: "log ends without RunEnd (truncated log)".into(),
        }),
    }
}
