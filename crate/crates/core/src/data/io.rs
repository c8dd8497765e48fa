use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    features: Vec<Vec<f64>>,
    targets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<(usize, usize)>>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads one utterance per line; blank lines are skipped. Files ending in
/// `.gz` are decompressed.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let rows = rec.features.len();
        let cols = rec.features.first().map_or(0, Vec::len);
        if let Some(bad) = rec.features.iter().position(|r| r.len() != cols) {
            return Err(Error::Schema(format!(
                "{}:{}: feature row {bad} has {} values, expected {cols}",
                path.display(),
                i + 1,
                rec.features[bad].len()
            )));
        }
        let utt = Utterance {
            id: rec.id,
            features: Tensor::new(vec![rows, cols], rec.features.into_iter().flatten().collect())?,
            targets: rec.targets,
            spans: rec.spans,
        };
        utt.validate()
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(utt);
    }
    Ok(out)
}

/// Writes one JSON object per line, with floats in shortest round-trip form.
pub fn write_jsonl(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for u in utts {
        let rec = Record {
            id: u.id.clone(),
            features: (0..u.num_frames()).map(|t| u.features.row(t).to_vec()).collect(),
            targets: u.targets.clone(),
            spans: u.spans.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
