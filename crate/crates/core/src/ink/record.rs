//! One JSON object per line:
//! `{"version":1,"transcript":"...","strokes":[[[x,y],...],...]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{InkLine, InkStroke, Point};
use crate::error::{Error, Result};

pub const INK_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InkRecord {
    #[serde(default = "default_version")]
    pub version: u32,
    pub transcript: String,
    pub strokes: Vec<Vec<[f64; 2]>>,
}

fn default_version() -> u32 {
    INK_SCHEMA_VERSION
}

impl From<&InkLine> for InkRecord {
    fn from(line: &InkLine) -> Self {
        InkRecord {
            version: INK_SCHEMA_VERSION,
            transcript: line.transcript.clone(),
            strokes: line.strokes.iter().map(|s| s.points().iter().map(|p| [p.x, p.y]).collect()).collect(),
        }
    }
}

impl TryFrom<InkRecord> for InkLine {
    type Error = Error;

    fn try_from(rec: InkRecord) -> Result<Self> {
        if rec.version != INK_SCHEMA_VERSION {
            return Err(Error::format(format!("unsupported ink schema version {}", rec.version)));
        }
        let strokes = rec
            .strokes
            .into_iter()
            .map(|s| InkStroke::new(s.into_iter().map(|[x, y]| Point::new(x, y)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(InkLine { strokes, transcript: rec.transcript })
    }
}

pub fn read_ink_file(reader: impl BufRead) -> Result<Vec<InkLine>> {
    let mut lines = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InkRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("ink record on line {}: {e}", no + 1)))?;
        lines.push(InkLine::try_from(rec)?);
    }
    Ok(lines)
}

pub fn write_ink_file(mut writer: impl Write, lines: &[InkLine]) -> Result<()> {
    for line in lines {
        let rec = InkRecord::from(line);
        serde_json::to_writer(&mut writer, &rec).map_err(|e| Error::format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
