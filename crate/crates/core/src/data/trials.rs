use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::codec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn is_target(self) -> bool {
        self == Label::Target
    }

    pub fn from_bool(target: bool) -> Self {
        if target {
            Label::Target
        } else {
            Label::Nontarget
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(format!("expected target|nontarget, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_speaker: String,
    pub enroll_utterances: Vec<String>,
    pub test_utterance: String,
    pub label: Option<Label>,
}

impl Trial {
    /// Identifier used in score files.
    pub fn id(&self) -> String {
        format!("{}:{}", self.enroll_speaker, self.test_utterance)
    }
}

pub type TrialList = Vec<Trial>;

/// One trial per line:
/// `enroll-spk<TAB>utt1,utt2,...<TAB>test-utt[<TAB>target|nontarget]`.
pub fn format_trials(trials: &[Trial]) -> Result<String> {
    let mut out = String::new();
    for (i, t) in trials.iter().enumerate() {
        let bad_id = |s: &str| s.is_empty() || s.contains(['\t', '\n', '\r']);
        if bad_id(&t.enroll_speaker)
            || bad_id(&t.test_utterance)
            || t.enroll_utterances.is_empty()
            || t.enroll_utterances
                .iter()
                .any(|u| bad_id(u) || u.contains(','))
        {
            return Err(Error::InvalidArgument(format!(
                "trial {i} has an empty or unencodable id"
            )));
        }
        out.push_str(&t.enroll_speaker);
        out.push('\t');
        out.push_str(&t.enroll_utterances.join(","));
        out.push('\t');
        out.push_str(&t.test_utterance);
        if let Some(label) = t.label {
            out.push('\t');
            out.push_str(&label.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_trials(text: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!(
                "expected 3 or 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(err("empty field".into()));
        }
        let enroll_utterances: Vec<String> = fields[1].split(',').map(str::to_owned).collect();
        if enroll_utterances.iter().any(String::is_empty) {
            return Err(err("empty enrollment utterance id".into()));
        }
        let label = match fields.get(3) {
            Some(l) => Some(l.parse::<Label>().map_err(err)?),
            None => None,
        };
        trials.push(Trial {
            enroll_speaker: fields[0].to_owned(),
            enroll_utterances,
            test_utterance: fields[2].to_owned(),
            label,
        });
    }
    Ok(trials)
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let bytes = codec::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("{}: not UTF-8 ({e})", path.display()),
    })?;
    parse_trials(&text)
}

pub fn write_trials(trials: &[Trial], path: &Path) -> Result<()> {
    codec::write_atomic(path, format_trials(trials)?.as_bytes())
}
