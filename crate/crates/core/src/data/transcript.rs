use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Participant,
    Interviewer,
}

impl Speaker {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "participant" => Some(Speaker::Participant),
            "interviewer" => Some(Speaker::Interviewer),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Speaker::Participant => "participant",
            Speaker::Interviewer => "interviewer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub start: f64,
    pub stop: f64,
    pub text: String,
}

/// Parses `start<TAB>stop<TAB>speaker<TAB>text` lines. A leading header line
/// whose first cell is not numeric is skipped.
pub fn parse_transcript(text: &str, path: &Path) -> Result<Vec<TranscriptTurn>> {
    let mut turns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cells: Vec<&str> = line.splitn(4, '\t').collect();
        if i == 0 && cells[0].trim().parse::<f64>().is_err() {
            continue;
        }
        if cells.len() < 3 {
            return Err(err("expected start<TAB>stop<TAB>speaker<TAB>text".into()));
        }
        let time = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad time {s:?}")))
        };
        let start = time(cells[0])?;
        let stop = time(cells[1])?;
        if start >= stop {
            return Err(err(format!("turn start {start} is not before stop {stop}")));
        }
        let speaker = Speaker::parse(cells[2]).ok_or_else(|| err(format!("unknown speaker {:?}", cells[2])))?;
        turns.push(TranscriptTurn {
            speaker,
            start,
            stop,
            text: cells.get(3).copied().unwrap_or("").to_string(),
        });
    }
    Ok(turns)
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptTurn>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcript(&text, path)
}

pub fn write_transcript(turns: &[TranscriptTurn], path: &Path) -> Result<()> {
    let mut out = String::from("start\tstop\tspeaker\ttext\n");
    for t in turns {
        writeln!(
            out,
            "{:.3}\t{:.3}\t{}\t{}",
            t.start,
            t.stop,
            t.speaker.as_str(),
            t.text.replace(['\t', '\n'], " ")
        )
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrubbedTranscript {
    pub participant: Vec<TranscriptTurn>,
    /// Interviewer time ranges `[start, stop)` to drop from feature streams.
    pub excluded: Vec<(f64, f64)>,
}

impl ScrubbedTranscript {
    /// No participant speech left; the session cannot be used.
    pub fn is_unusable(&self) -> bool {
        self.participant.is_empty()
    }

    pub fn participant_text(&self) -> String {
        self.participant
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Keeps participant turns and reports the interviewer ranges.
pub fn scrub_interviewer(turns: &[TranscriptTurn]) -> Result<ScrubbedTranscript> {
    for w in turns.windows(2) {
        if w[1].start < w[0].start {
            return Err(Error::invalid(format!(
                "transcript turns out of order at {}s",
                w[1].start
            )));
        }
        if w[1].start < w[0].stop {
            return Err(Error::invalid(format!(
                "overlapping turns: [{}, {}) and [{}, {})",
                w[0].start, w[0].stop, w[1].start, w[1].stop
            )));
        }
    }
    let (participant, interviewer): (Vec<_>, Vec<_>) =
        turns.iter().cloned().partition(|t| t.speaker == Speaker::Participant);
    Ok(ScrubbedTranscript {
        participant,
        excluded: interviewer.iter().map(|t| (t.start, t.stop)).collect(),
    })
}

/// Lowercases, strips `<…>` and `[…]` annotations and collapses whitespace.
/// An empty result means nothing but annotations (or nothing) was spoken.
pub fn clean_text(raw: &str) -> String {
    let mut kept = String::with_capacity(raw.len());
    let mut closer: Option<char> = None;
    for c in raw.chars() {
        match closer {
            Some(end) if c == end => {
                closer = None;
                kept.push(' ');
            }
            Some(_) => {}
            None => match c {
                '<' => closer = Some('>'),
                '[' => closer = Some(']'),
                _ => kept.extend(c.to_lowercase()),
            },
        }
    }
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}
