//! JSON-lines files: datasets (header line, then one example per line) and
//! predictions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synth::{Dataset, SynthConfig, SyntheticExample};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    synth_config: SynthConfig,
    answers: Vec<String>,
}

fn invalid(path: &Path, line: usize, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Invalid(format!("{}:{line}: {e}", path.display()))
}

pub fn write_dataset_to<W: Write>(w: &mut W, d: &Dataset) -> std::io::Result<()> {
    let header = Header {
        synth_config: d.config.clone(),
        answers: d.answers.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for ex in &d.examples {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, d)
        .and_then(|_| w.flush())
        .map_err(|e| HarnessError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| invalid(path, 1, "missing header"))?
        .map_err(|e| HarnessError::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| invalid(path, 1, e))?;
    header.synth_config.validate()?;
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SyntheticExample =
            serde_json::from_str(&line).map_err(|e| invalid(path, i + 2, e))?;
        if ex.answer >= header.answers.len() {
            return Err(invalid(path, i + 2, format!("answer {} out of range", ex.answer)));
        }
        examples.push(ex);
    }
    Ok(Dataset {
        config: header.synth_config,
        answers: header.answers,
        examples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: usize,
    pub predicted: String,
    pub gold: String,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })();
    res.map_err(|e| HarnessError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(path, i + 1, e)))
        .collect()
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(path, 0, e))
}
