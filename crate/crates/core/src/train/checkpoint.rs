//! Checkpoint files: a line-oriented manifest plus a little-endian f32 blob.
//!
//! ```text
//! #checkpoint v1
//! config <sha256 hex>
//! step <n>
//! blob <file name, relative to the manifest>
//! optimizer <rho> <epsilon>        (or "optimizer none")
//! tensor <name> f32 <d0,d1,..> <byte offset>
//! ```
//!
//! Optimizer accumulators are stored as tensors named `opt.grad_sq.<param>`
//! and `opt.update_sq.<param>` after all parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use weaksup_autograd::{AdaDeltaState, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

const HEADER: &str = "#checkpoint v1";
const GRAD_SQ: &str = "opt.grad_sq.";
const UPDATE_SQ: &str = "opt.update_sq.";

/// Which parameter layout a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    EncDec,
    Ctc { adapter: bool },
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::EncDec => "enc-dec",
            Arch::Ctc { adapter: false } => "ctc",
            Arch::Ctc { adapter: true } => "ctc+adapter",
        }
    }
}

/// SHA-256 over the architecture tag and the canonical model config.
pub fn config_hash(cfg: &ModelConfig, arch: Arch) -> String {
    let mut h = Sha256::new();
    h.update(arch.tag().as_bytes());
    h.update(b"\n");
    h.update(cfg.canonical().as_bytes());
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdaDeltaState<f32>>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".bin");
    manifest.with_file_name(name)
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, accum) in [
                (GRAD_SQ, &opt.accum_grad_sq),
                (UPDATE_SQ, &opt.accum_update_sq),
            ] {
                for ((_, n, _), t) in self.params.iter().zip(accum) {
                    out.push((format!("{prefix}{n}"), t));
                }
            }
        }
        out
    }

    /// Writes `path` (manifest) and `path.bin` (data).
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_name = blob_path(path)
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Input(format!("bad checkpoint path {}", path.display())))?;
        let mut text = format!(
            "{HEADER}\nconfig {}\nstep {}\nblob {blob_name}\n",
            self.config_hash, self.step
        );
        match &self.optimizer {
            Some(o) => {
                let _ = writeln!(text, "optimizer {:?} {:?}", o.rho, o.epsilon);
            }
            None => text.push_str("optimizer none\n"),
        }
        let mut blob = Vec::new();
        for (name, t) in self.tensors() {
            let _ = writeln!(
                text,
                "tensor {name} f32 {} {}",
                shape_str(t.shape()),
                blob.len()
            );
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(blob_path(path), blob)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::parse("checkpoint", m);
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(format!(
                "{} lacks the checkpoint header",
                path.display()
            )));
        }
        let mut field = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing {key} line")))
        };
        let config_hash = field("config")?;
        let step: usize = field("step")?
            .parse()
            .map_err(|e| bad(format!("step: {e}")))?;
        let blob_name = field("blob")?;
        let opt_line = field("optimizer")?;
        let opt_hyper = if opt_line == "none" {
            None
        } else {
            let v: Vec<f64> = opt_line
                .split(' ')
                .map(|x| x.parse::<f64>().map_err(|e| bad(format!("optimizer: {e}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [rho, eps] => Some((rho, eps)),
                _ => return Err(bad(format!("optimizer line {opt_line:?}"))),
            }
        };
        let blob = fs::read(path.with_file_name(&blob_name))?;
        let mut params = ParamStore::new();
        let mut grad_sq = Vec::new();
        let mut update_sq = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(' ').collect();
            let ["tensor", name, "f32", shape, offset] = parts[..] else {
                return Err(bad(format!("bad tensor line {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|d| d.parse().map_err(|e| bad(format!("shape: {e}"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|e| bad(format!("offset: {e}")))?;
            let n: usize = shape.iter().product();
            let bytes = blob
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("{name} runs past the end of the blob")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix(GRAD_SQ) {
                grad_sq.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(UPDATE_SQ) {
                update_sq.push((p.to_string(), t));
            } else {
                params.insert(name, t)?;
            }
        }
        let optimizer = match opt_hyper {
            None if grad_sq.is_empty() && update_sq.is_empty() => None,
            None => return Err(bad("optimizer tensors without optimizer line".into())),
            Some((rho, epsilon)) => {
                let order = |v: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
                    if v.len() != params.len() {
                        return Err(bad(format!(
                            "{} accumulators for {} parameters",
                            v.len(),
                            params.len()
                        )));
                    }
                    v.into_iter()
                        .zip(params.iter())
                        .map(|((n, t), (_, pn, pt))| {
                            if n != pn || t.shape() != pt.shape() {
                                Err(bad(format!(
                                    "accumulator {n} does not match parameter {pn}"
                                )))
                            } else {
                                Ok(t)
                            }
                        })
                        .collect()
                };
                Some(AdaDeltaState {
                    accum_grad_sq: order(grad_sq)?,
                    accum_update_sq: order(update_sq)?,
                    rho,
                    epsilon,
                })
            }
        };
        Ok(Self {
            step,
            config_hash,
            params,
            optimizer,
        })
    }

    /// Loads and checks the config hash.
    pub fn load_expecting(path: &Path, config_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model config",
                path.display()
            )));
        }
        Ok(ck)
    }
}

/// Elementwise mean of the last `last_k` parameter sets (clamped to the list
/// length). Each element is averaged over its values in sorted order, so the
/// result does not depend on the order of the selected checkpoints.
pub fn average_checkpoints(list: &[ParamStore<f32>], last_k: usize) -> Result<ParamStore<f32>> {
    if list.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    let k = last_k.clamp(1, list.len());
    let chosen = &list[list.len() - k..];
    let first = &chosen[0];
    for other in &chosen[1..] {
        if other.len() != first.len() {
            return Err(Error::Input(
                "checkpoints hold different parameter sets".into(),
            ));
        }
        for ((_, na, ta), (_, nb, tb)) in first.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Input(format!(
                    "checkpoint parameter mismatch: {na} vs {nb}"
                )));
            }
        }
    }
    let mut out = ParamStore::new();
    let mut column = Vec::with_capacity(k);
    for (id, name, t) in first.iter() {
        let data = (0..t.len())
            .map(|j| {
                column.clear();
                column.extend(chosen.iter().map(|c| c.get(id).data()[j]));
                column.sort_by(f32::total_cmp);
                let sum: f64 = column.iter().map(|&v| v as f64).sum();
                (sum / k as f64) as f32
            })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
