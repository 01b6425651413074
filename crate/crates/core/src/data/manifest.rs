use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::features::{log_mel, read_features, read_waveform, FeaturizerConfig};
use crate::model::ModelInput;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    /// Relative paths resolve against the manifest directory.
    pub path: PathBuf,
    pub transcript: Vec<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One loaded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub input: ModelInput,
    pub transcript: Vec<usize>,
    pub domain: Domain,
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut out = String::from("# id\tpath\ttranscript\tdomain\n");
    for r in &m.rows {
        let tr: Vec<String> = r.transcript.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id,
            r.path.display(),
            tr.join(" "),
            r.domain
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a TSV manifest. Ids must be unique and every path must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, msg: String| DataError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(
                i + 1,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        let transcript = cols[2]
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| err(i + 1, format!("token {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let domain = cols[3].trim().parse().map_err(|e| err(i + 1, e))?;
        let id = cols[0].trim().to_string();
        if id.is_empty() {
            return Err(err(i + 1, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        rows.push(ManifestRow {
            id,
            path: PathBuf::from(cols[1].trim()),
            transcript,
            domain,
        });
    }
    let m = Manifest { base_dir, rows };
    for r in &m.rows {
        let p = m.resolve(r);
        if !p.is_file() {
            return Err(DataError::MissingFile(p));
        }
    }
    Ok(m)
}

/// Read every row. `.wav` files become log-mel features when `featurizer`
/// is given and raw sample inputs otherwise; anything else is read as FEAT1.
pub fn load_utterances(
    m: &Manifest,
    dtype: DType,
    featurizer: Option<&FeaturizerConfig>,
) -> Result<Vec<Utterance>> {
    m.rows
        .iter()
        .map(|r| {
            let p = m.resolve(r);
            let is_wav = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            let input = match (is_wav, featurizer) {
                (true, Some(cfg)) => {
                    ModelInput::from_features(&log_mel(&read_waveform(&p)?, cfg)?, dtype)
                }
                (true, None) => ModelInput::from_waveform(&read_waveform(&p)?, dtype),
                (false, _) => ModelInput::from_features(&read_features(&p)?, dtype),
            };
            Ok(Utterance {
                id: r.id.clone(),
                input,
                transcript: r.transcript.clone(),
                domain: r.domain,
            })
        })
        .collect()
}
