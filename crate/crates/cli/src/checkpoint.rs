//! Checkpoint file: a text header followed by little-endian f32 payload.
//!
//! ```text
//! hlora-checkpoint v1
//! config_sha256 <hex>
//! architecture hlora|shared
//! history 1c,1g,...      ("-" when empty)
//! config <bytes>
//! <effective config TOML, exactly <bytes> long>
//! entries <n>
//! <name> <group> <d0>x<d1>... <offset> <len>     (offsets in floats)
//! payload <floats>
//! <floats × 4 bytes>
//! ```

use std::path::Path;

use hlora_core::model::{Architecture, Model};
use hlora_core::vq::{Codebook, LatentMap, VqCodec};
use hlora_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const CHECKPOINT_FORMAT: &str = "hlora-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub architecture: Architecture,
    pub history: Vec<String>,
    pub entries: Vec<Entry>,
}

pub fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::HLora => "hlora",
        Architecture::SharedLora => "shared",
    }
}

pub fn parse_arch(s: &str) -> Result<Architecture> {
    match s {
        "hlora" => Ok(Architecture::HLora),
        "shared" => Ok(Architecture::SharedLora),
        other => Err(Error::Config(format!("unknown architecture {other:?}; expected hlora or shared"))),
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig) -> Self {
        let entries = model
            .store
            .iter()
            .map(|(_, e)| Entry {
                name: e.name.clone(),
                group: e.group.to_string(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            architecture: model.architecture,
            history: model.history.clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config.to_toml();
        let history = if self.history.is_empty() {
            "-".to_string()
        } else {
            self.history.join(",")
        };
        let mut head = format!(
            "{CHECKPOINT_FORMAT}\nconfig_sha256 {}\narchitecture {}\nhistory {history}\nconfig {}\n{cfg}\nentries {}\n",
            self.config_hash,
            arch_name(self.architecture),
            cfg.len(),
            self.entries.len()
        );
        let mut offset = 0;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("{} {} {} {offset} {}\n", e.name, e.group, dims.join("x"), e.data.len()));
            offset += e.data.len();
        }
        head.push_str(&format!("payload {offset}\n"));
        let mut out = head.into_bytes();
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8"))
        };
        let tag = line()?;
        if tag != CHECKPOINT_FORMAT {
            return Err(bad(format!("format {tag:?}, expected {CHECKPOINT_FORMAT:?}")));
        }
        let field = |l: String, key: &str| -> Result<String> {
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line, found {l:?}")))
        };
        let config_hash = field(line()?, "config_sha256")?;
        let architecture = parse_arch(&field(line()?, "architecture")?)?;
        let history = match field(line()?, "history")?.as_str() {
            "-" => Vec::new(),
            h => h.split(',').map(str::to_string).collect(),
        };
        let cfg_len: usize = field(line()?, "config")?.parse().map_err(|_| bad("config length"))?;
        let cfg_end = pos + cfg_len;
        if cfg_end + 1 > bytes.len() || bytes[cfg_end] != b'\n' {
            return Err(bad("config block length mismatch"));
        }
        let cfg_text = std::str::from_utf8(&bytes[pos..cfg_end]).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::parse(cfg_text)?;
        if config.hash() != config_hash {
            return Err(bad("embedded config does not match its hash"));
        }
        pos = cfg_end + 1;
        let mut line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated manifest"))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("manifest is not UTF-8"))
        };
        let n: usize = field(line()?, "entries")?.parse().map_err(|_| bad("entry count"))?;
        let mut manifest = Vec::with_capacity(n);
        let mut expected_offset = 0;
        for _ in 0..n {
            let l = line()?;
            let parts: Vec<&str> = l.split(' ').collect();
            let [name, group, dims, offset, len] = parts[..] else {
                return Err(bad(format!("malformed manifest line {l:?}")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {dims:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let len: usize = len.parse().map_err(|_| bad("bad length"))?;
            if shape.iter().product::<usize>() != len {
                return Err(bad(format!("{name}: shape {dims} does not match length {len}")));
            }
            if offset != expected_offset {
                return Err(bad(format!("{name}: offset {offset}, expected {expected_offset}")));
            }
            expected_offset += len;
            manifest.push((name.to_string(), group.to_string(), shape, len));
        }
        let total: usize = field(line()?, "payload")?.parse().map_err(|_| bad("payload length"))?;
        if total != expected_offset {
            return Err(bad("payload length disagrees with manifest"));
        }
        let payload = &bytes[pos..];
        if payload.len() != total * 4 {
            return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let entries = manifest
            .into_iter()
            .map(|(name, group, shape, len)| Entry {
                name,
                group,
                shape,
                data: floats.by_ref().take(len).collect(),
            })
            .collect();
        Ok(Self {
            config,
            config_hash,
            architecture,
            history,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Errors when `config` differs from the one the checkpoint was trained under.
    pub fn check_config(&self, config: &RunConfig, force: bool) -> Result<()> {
        let want = config.hash();
        if want != self.config_hash && !force {
            return Err(Error::Config(format!(
                "checkpoint config hash {} differs from {want}; pass --force to load anyway",
                self.config_hash
            )));
        }
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing entry {name}")))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        Tensor::new(e.shape.clone(), e.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Rebuilds the model under `config` and overwrites every parameter.
    pub fn to_model(&self, config: &RunConfig) -> Result<Model> {
        let mc = config.model_config();
        let codec = VqCodec {
            codebook: Codebook::from_tensor(&self.tensor("vq.codes")?)?,
            latent: LatentMap::from_encoder(mc.encoder.patch_size, self.tensor("vq.latent_map")?)?,
        };
        let mut model = Model::new(mc, self.architecture, codec, config.seed)?;
        if model.store.len() != self.entries.len() {
            return Err(bad(format!(
                "{} entries, the model has {} parameters",
                self.entries.len(),
                model.store.len()
            )));
        }
        for e in &self.entries {
            let id = model.store.id(&e.name).ok_or_else(|| bad(format!("unexpected entry {}", e.name)))?;
            if model.store.tensor(id).shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "{}: shape {:?}, the model expects {:?}",
                    e.name,
                    e.shape,
                    model.store.tensor(id).shape()
                )));
            }
            let data: Vec<f64> = e.data.iter().map(|&v| f64::from(v)).collect();
            model.store.assign(&e.name, &data)?;
        }
        model.history = self.history.clone();
        model.refresh_codec()?;
        Ok(model)
    }
}
