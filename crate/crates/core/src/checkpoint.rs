//! Versioned binary checkpoints: a magic string, a key=value config
//! text section, then named parameter blocks stored as row-major 32-bit
//! floats. The loader rebuilds the parameter layout from the config and
//! validates every block name and shape against it.

use crate::baselines::{BucketScheme, OrdinalParams, VrParams};
use crate::data::Standardizer;
use crate::error::{GrError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 7] = b"GRCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Gr,
    Vr,
    Ordinal,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Gr => "gr",
            HeadKind::Vr => "vr",
            HeadKind::Ordinal => "ordinal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gr" => Ok(HeadKind::Gr),
            "vr" => Ok(HeadKind::Vr),
            "ordinal" => Ok(HeadKind::Ordinal),
            other => Err(GrError::Format(format!("unknown head kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Gr(ModelParams),
    Vr(VrParams),
    Ordinal(OrdinalParams),
}

impl HeadParams {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadParams::Gr(_) => HeadKind::Gr,
            HeadParams::Vr(_) => HeadKind::Vr,
            HeadParams::Ordinal(_) => HeadKind::Ordinal,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            HeadParams::Gr(p) => &p.config,
            HeadParams::Vr(p) => &p.config,
            HeadParams::Ordinal(p) => &p.config,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            HeadParams::Gr(p) => p.named_tensors(),
            HeadParams::Vr(p) => p.named_tensors(),
            HeadParams::Ordinal(p) => p.named_tensors(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub head: HeadParams,
    pub standardizer: Standardizer,
    /// Mixup window inference should use (zero disables feedback mixup).
    pub mixup_window: usize,
    /// Fingerprint of the vocabulary this model was trained against.
    pub vocab_fingerprint: String,
}

fn push_f64_list(out: &mut String, key: &str, values: &[f64]) {
    let rendered: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    out.push_str(&format!("{key}={}\n", rendered.join(",")));
}

impl Checkpoint {
    fn config_text(&self) -> String {
        let c = self.head.config();
        let mut s = String::new();
        s.push_str(&format!("head={}\n", self.head.kind().as_str()));
        s.push_str(&format!("feature_dim={}\n", c.feature_dim));
        s.push_str(&format!("hidden_dim={}\n", c.hidden_dim));
        s.push_str(&format!("encoder_layers={}\n", c.encoder_layers));
        s.push_str(&format!("decoder_blocks={}\n", c.decoder_blocks));
        s.push_str(&format!("attention_heads={}\n", c.attention_heads));
        s.push_str(&format!("ffn_mult={}\n", c.ffn_mult));
        s.push_str(&format!("vocab_size={}\n", c.vocab_size));
        s.push_str(&format!("t_max={}\n", c.t_max));
        s.push_str(&format!("seed={}\n", c.seed));
        s.push_str(&format!("mixup_window={}\n", self.mixup_window));
        s.push_str(&format!("vocab_fingerprint={}\n", self.vocab_fingerprint));
        if let HeadParams::Ordinal(p) = &self.head {
            push_f64_list(&mut s, "ordinal_edges", &p.scheme.edges);
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let config = self.config_text();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        let mut blocks: Vec<(String, &Tensor)> = self.head.named_tensors();
        let mean = Tensor::row_vector(self.standardizer.mean.clone());
        let std = Tensor::row_vector(self.standardizer.std.clone());
        let extra = [("feat_mean".to_string(), &mean), ("feat_std".to_string(), &std)];
        blocks.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));

        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, tensor) in blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
            for v in tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(GrError::Format(
                "not a checkpoint file (bad magic or unsupported version)".into(),
            ));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| GrError::Format("config section is not UTF-8".into()))?;
        let kv = parse_config(config_text)?;
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| GrError::Format(format!("config key '{k}' missing")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| GrError::Format(format!("config key '{k}' is not an integer")))
        };
        let config = ModelConfig {
            feature_dim: parse_usize("feature_dim")?,
            hidden_dim: parse_usize("hidden_dim")?,
            encoder_layers: parse_usize("encoder_layers")?,
            decoder_blocks: parse_usize("decoder_blocks")?,
            attention_heads: parse_usize("attention_heads")?,
            ffn_mult: parse_usize("ffn_mult")?,
            vocab_size: parse_usize("vocab_size")?,
            t_max: parse_usize("t_max")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| GrError::Format("config key 'seed' is not an integer".into()))?,
        };
        let head_kind = HeadKind::parse(get("head")?)?;
        let mixup_window = parse_usize("mixup_window")?;
        let vocab_fingerprint = get("vocab_fingerprint")?.clone();

        // Fresh layout to receive the blocks.
        let mut head = match head_kind {
            HeadKind::Gr => HeadParams::Gr(crate::model::init_params(&config)?),
            HeadKind::Vr => HeadParams::Vr(crate::baselines::init_vr(&config)?),
            HeadKind::Ordinal => {
                let edges_text = get("ordinal_edges")?;
                let edges: Vec<f64> = edges_text
                    .split(',')
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| GrError::Format("bad ordinal edge value".into()))
                    })
                    .collect::<Result<_>>()?;
                let scheme = BucketScheme::new(edges)?;
                HeadParams::Ordinal(crate::baselines::init_ordinal(&config, scheme)?)
            }
        };

        let nblocks = r.u32()? as usize;
        let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..nblocks {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| GrError::Format("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f32()? as f64);
            }
            loaded.insert(name, Tensor::from_vec(rows, cols, data)?);
        }

        let mean = loaded
            .remove("feat_mean")
            .ok_or_else(|| GrError::Format("missing feat_mean block".into()))?;
        let std = loaded
            .remove("feat_std")
            .ok_or_else(|| GrError::Format("missing feat_std block".into()))?;
        if mean.shape() != (1, config.feature_dim) || std.shape() != (1, config.feature_dim) {
            return Err(GrError::Format("standardizer blocks do not match feature_dim".into()));
        }
        let standardizer = Standardizer {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        };

        // Fill every expected tensor, validating names and shapes.
        let assign = |target: &mut Tensor, name: &str, loaded: &mut BTreeMap<String, Tensor>| -> Result<()> {
            let t = loaded
                .remove(name)
                .ok_or_else(|| GrError::Format(format!("missing parameter block '{name}'")))?;
            if t.shape() != target.shape() {
                return Err(GrError::Format(format!(
                    "block '{name}' shape {}x{} does not match expected {}x{}",
                    t.rows(),
                    t.cols(),
                    target.rows(),
                    target.cols()
                )));
            }
            *target = t;
            Ok(())
        };
        let names: Vec<String> = head.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        match &mut head {
            HeadParams::Gr(p) => {
                for (tensor, name) in p.tensors_mut().into_iter().zip(&names) {
                    assign(tensor, name, &mut loaded)?;
                }
            }
            HeadParams::Vr(p) => {
                for (tensor, name) in p.tensors_mut().into_iter().zip(&names) {
                    assign(tensor, name, &mut loaded)?;
                }
            }
            HeadParams::Ordinal(p) => {
                for (tensor, name) in p.tensors_mut().into_iter().zip(&names) {
                    assign(tensor, name, &mut loaded)?;
                }
            }
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(GrError::Format(format!("unexpected parameter block '{name}'")));
        }

        Ok(Checkpoint {
            head,
            standardizer,
            mixup_window,
            vocab_fingerprint,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GrError::Format(format!("bad config line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GrError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
