//! Checkpoint files: a UTF-8 header followed by `ECAT` tensor blobs.
//!
//! ```text
//! ECAF-CHECKPOINT 1
//! [config]
//! c0=8
//! ...
//! [state]
//! iter=500
//! ...
//! [manifest]
//! vsc.conv1.weight<TAB>8,3,3,3<TAB>0
//! ...
//! [data]
//! <ECAT blobs, offsets relative to the byte after this line>
//! ```
//!
//! Values are stored as `f32`, so an `f32` model round-trips bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

const MAGIC_LINE: &str = "ECAF-CHECKPOINT 1";
const DATA_LINE: &str = "[data]\n";
/// Tensors under this prefix (optimizer moments) are not model parameters.
pub const EXTRA_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form `key=value` records (training progress, optimizer step, ...).
    pub state: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.cast()))
            .collect();
        Self {
            config: model.config.clone(),
            state: Vec::new(),
            tensors,
        }
    }

    pub fn state_value(&self, key: &str) -> Option<&str> {
        self.state
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC_LINE}\n[config]\n{}[state]\n", self.config.to_kv());
        for (k, v) in &self.state {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("unencodable state record `{k}`"),
                ));
            }
            head.push_str(&format!("{k}={v}\n"));
        }
        head.push_str("[manifest]\n");
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if name.contains(['\t', '\n']) {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("unencodable tensor name `{name}`"),
                ));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{name}\t{}\t{offset}\n", shape.join(",")));
            offset += t.ecat_len();
        }
        head.push_str(DATA_LINE);
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            t.write_ecat(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::format("checkpoint", msg);
        let split = find(bytes, format!("\n{DATA_LINE}").as_bytes())
            .ok_or_else(|| bad("missing [data] section".into()))?;
        let head =
            std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let data = &bytes[split + 1 + DATA_LINE.len()..];

        let mut lines = head.lines();
        if lines.next() != Some(MAGIC_LINE) {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut section = "";
        let (mut config, mut state, mut manifest) = (String::new(), Vec::new(), Vec::new());
        for line in lines {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => {
                    config.push_str(line);
                    config.push('\n');
                }
                "[state]" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad state line `{line}`")))?;
                    state.push((k.to_string(), v.to_string()));
                }
                "[manifest]" => {
                    let f: Vec<&str> = line.split('\t').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("bad manifest line `{line}`")));
                    }
                    let shape = if f[1].is_empty() {
                        Vec::new()
                    } else {
                        f[1].split(',')
                            .map(|d| {
                                d.parse::<usize>()
                                    .map_err(|_| bad(format!("bad extent in `{line}`")))
                            })
                            .collect::<Result<Vec<_>>>()?
                    };
                    let off: usize = f[2]
                        .parse()
                        .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                    manifest.push((f[0].to_string(), shape, off));
                }
                other => return Err(bad(format!("unexpected section `{other}`"))),
            }
        }
        let config = ModelConfig::from_kv(&config)?;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape, off) in manifest {
            let mut r = data
                .get(off..)
                .ok_or_else(|| bad(format!("`{name}` offset past end of file")))?;
            let t = Tensor::read_ecat(&mut r).map_err(|e| bad(format!("`{name}`: {e}")))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "`{name}` manifest shape {shape:?} but data holds {:?}",
                    t.shape()
                )));
            }
            tensors.push((name, t));
        }
        Ok(Self {
            config,
            state,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let res = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        res.map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Path {
                path: path.to_path_buf(),
                msg: format!("writing checkpoint: {e}"),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            msg: format!("reading checkpoint: {e}"),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model. With `expected`, the stored config must match it;
    /// the first differing key is reported.
    pub fn to_model<T: Real>(&self, expected: Option<&ModelConfig>) -> Result<Model<T>> {
        if let Some(exp) = expected {
            if let Some((key, want, found)) = exp.first_difference(&self.config) {
                return Err(Error::ConfigMismatch {
                    key: key.to_string(),
                    expected: want,
                    found,
                });
            }
        }
        let mut model = Model::<T>::new(self.config.clone())?;
        for (name, _) in &self.tensors {
            if model.store.id(name).is_none() && !name.starts_with(EXTRA_PREFIX) {
                return Err(Error::format(
                    "checkpoint",
                    format!("unknown parameter `{name}`"),
                ));
            }
        }
        let ids: Vec<_> = model
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in ids {
            let t = self.tensor(&name).ok_or_else(|| {
                Error::format("checkpoint", format!("missing parameter `{name}`"))
            })?;
            model.store.set(id, t.cast())?;
        }
        Ok(model)
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
