//! Utterances, corpora and the JSON Lines manifest format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weaksup_autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, d]` feature matrix.
    pub features: Tensor<f32>,
    /// Transcript (source of supervised targets).
    pub text: Option<String>,
    /// Loosely related context text (source of weak targets).
    pub context: Option<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Supervised,
    Weak,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Checks that every utterance carries the text its kind requires.
    pub fn new(kind: CorpusKind, utterances: Vec<Utterance>) -> Result<Self> {
        for u in &utterances {
            let ok = match kind {
                CorpusKind::Supervised => u.text.is_some(),
                CorpusKind::Weak => u.context.is_some(),
            };
            if !ok {
                return Err(Error::Input(format!(
                    "utterance {} lacks {kind:?} text",
                    u.id
                )));
            }
            if u.features.shape().len() != 2 {
                return Err(Error::Input(format!(
                    "utterance {} features are not T×d",
                    u.id
                )));
            }
        }
        Ok(Self { kind, utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Target text for training on this corpus.
    pub fn target<'a>(&self, u: &'a Utterance) -> &'a str {
        match self.kind {
            CorpusKind::Supervised => u.text.as_deref().unwrap_or_default(),
            CorpusKind::Weak => u.context.as_deref().unwrap_or_default(),
        }
    }

    /// Sub-corpus with the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            kind: self.kind,
            utterances: indices
                .iter()
                .map(|&i| self.utterances[i].clone())
                .collect(),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub feat_path: String,
    pub frames: usize,
    pub dim: usize,
    pub text: Option<String>,
    pub context: Option<String>,
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.len() * 4);
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(fs::write(path, bytes)?)
}

pub fn read_features(path: &Path, frames: usize, dim: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != frames * dim * 4 {
        return Err(Error::parse(
            "features",
            format!(
                "{} has {} bytes, expected {frames}×{dim}×4",
                path.display(),
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(vec![frames, dim], data)?)
}

/// Writes `<dir>/<name>.jsonl` plus one feature file per utterance under
/// `<dir>/<name>.feats/`.
pub fn write_manifest(dir: &Path, name: &str, corpus: &Corpus) -> Result<PathBuf> {
    let feat_dir = format!("{name}.feats");
    fs::create_dir_all(dir.join(&feat_dir))?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut out = BufWriter::new(fs::File::create(&path)?);
    for u in &corpus.utterances {
        let rel = format!("{feat_dir}/{}.f32", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            feat_path: rel,
            frames: u.frames(),
            dim: u.dim(),
            text: u.text.clone(),
            context: u.context.clone(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path, kind: CorpusKind) -> Result<Corpus> {
    let base = path.parent().unwrap_or(Path::new("."));
    let utterances = read_manifest_entries(path)?
        .into_iter()
        .map(|e| {
            let fp = Path::new(&e.feat_path);
            let fp = if fp.is_absolute() {
                fp.to_path_buf()
            } else {
                base.join(fp)
            };
            Ok(Utterance {
                features: read_features(&fp, e.frames, e.dim)?,
                id: e.id,
                text: e.text,
                context: e.context,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(kind, utterances)
}

/// Writes manifest lines only, pointing at existing feature files.
pub fn write_entries(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, text: Option<&str>, context: Option<&str>) -> Utterance {
        Utterance {
            id: id.into(),
            features: Tensor::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0),
            text: text.map(Into::into),
            context: context.map(Into::into),
        }
    }

    #[test]
    fn kind_invariants() {
        assert!(Corpus::new(CorpusKind::Supervised, vec![utt("a", None, Some("x"))]).is_err());
        assert!(Corpus::new(CorpusKind::Weak, vec![utt("a", Some("x"), None)]).is_err());
        let c = Corpus::new(CorpusKind::Weak, vec![utt("a", Some("t"), Some("c"))]).unwrap();
        assert_eq!(c.target(&c.utterances[0]), "c");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::new(
            CorpusKind::Supervised,
            vec![
                utt("u1", Some("hello there"), None),
                utt("u2", Some("x"), Some("y z")),
            ],
        )
        .unwrap();
        let path = write_manifest(dir.path(), "train", &c).unwrap();
        let back = read_manifest(&path, CorpusKind::Supervised).unwrap();
        assert_eq!(back, c);
        let first = std::fs::read_to_string(&path).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["id", "feat_path", "frames", "dim", "text", "context"] {
            assert!(line.get(key).is_some(), "{key}");
        }
    }
}
