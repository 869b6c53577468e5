use std::path::Path;

use super::EvalError;

/// Segment start times and labels from a TIMIT `.PHN` file.
#[derive(Debug, Clone, PartialEq)]
pub struct PhnLabels {
    pub boundaries: Vec<f64>,
    pub labels: Vec<String>,
}

pub fn parse_phn_str(text: &str, sample_rate: u32) -> Result<PhnLabels, EvalError> {
    let mut out = PhnLabels { boundaries: Vec::new(), labels: Vec::new() };
    let mut prev_end: Option<u64> = None;
    for (i, line) in text.lines().enumerate() {
        let err = |detail: String| EvalError::Parse { line: i + 1, detail };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [start, end, label] = fields[..] else {
            return Err(err(format!("expected `start end label`, got {line:?}")));
        };
        let start: u64 = start.parse().map_err(|_| err(format!("bad start sample {start:?}")))?;
        let end: u64 = end.parse().map_err(|_| err(format!("bad end sample {end:?}")))?;
        if end < start {
            return Err(err(format!("segment ends ({end}) before it starts ({start})")));
        }
        if let Some(p) = prev_end {
            if p != start {
                return Err(err(format!("segment starts at {start} but the previous one ended at {p}")));
            }
        }
        prev_end = Some(end);
        out.boundaries.push(start as f64 / sample_rate as f64);
        out.labels.push(label.to_string());
    }
    Ok(out)
}

pub fn parse_phn(path: &Path, sample_rate: u32) -> Result<PhnLabels, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    parse_phn_str(&text, sample_rate).map_err(|e| match e {
        EvalError::Parse { line, detail } => EvalError::Parse { line, detail: format!("{}: {detail}", path.display()) },
        e => e,
    })
}
