use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub fn index(self) -> usize {
        match self {
            NliLabel::Entailment => 0,
            NliLabel::Neutral => 1,
            NliLabel::Contradiction => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::invalid(format!("unknown NLI label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledNliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// Parses `premise TAB hypothesis TAB label` lines. Any bad line rejects the file.
pub fn parse_nli_tsv(text: &str, origin: &Path) -> Result<Vec<LabeledNliPair>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::data(
                origin,
                format!("line {}: expected 3 tab-separated columns, found {}", lineno + 1, cols.len()),
            ));
        }
        let label = cols[2]
            .parse()
            .map_err(|e: Error| Error::data(origin, format!("line {}: {e}", lineno + 1)))?;
        out.push(LabeledNliPair {
            premise: cols[0].to_string(),
            hypothesis: cols[1].to_string(),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::data(origin, "no NLI examples"));
    }
    Ok(out)
}

pub fn load_nli_tsv(path: &Path) -> Result<Vec<LabeledNliPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    parse_nli_tsv(&text, path)
}

/// One sentence per non-empty line, text preserved exactly (line endings stripped).
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    let lines: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::data(path, "corpus has no sentences"));
    }
    Ok(lines)
}
