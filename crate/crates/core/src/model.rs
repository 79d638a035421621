//! Convolutional backbone with a shallow and a deep tap, the two attention
//! aggregators and the two linear heads.
//!
//! Both aggregators pool *values* from the deep map; the background
//! aggregator computes its attention from the shallow tap. That keeps `z_o`
//! and `z_b` in the same `C`-dimensional space so they can be concatenated.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Checkpoint magic and version.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of stages 1–3; stage 4 outputs `channels`.
    pub stage_channels: [usize; 3],
    pub channels: usize,
    pub attn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 5,
            stage_channels: [16, 32, 64],
            channels: 64,
            attn_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn shallow_channels(&self) -> usize {
        self.stage_channels[1]
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = [
            self.in_channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.channels,
        ];
        let mut v = Vec::new();
        for s in 0..4 {
            v.push((format!("stage{}.conv.weight", s + 1), vec![c[s + 1], c[s], 3, 3]));
            v.push((format!("stage{}.conv.bias", s + 1), vec![c[s + 1]]));
        }
        v.push(("agg_o.conv.weight".into(), vec![self.attn_dim, self.channels, 1, 1]));
        v.push(("agg_o.conv.bias".into(), vec![self.attn_dim]));
        v.push((
            "agg_b.conv.weight".into(),
            vec![self.attn_dim, self.shallow_channels(), 1, 1],
        ));
        v.push(("agg_b.conv.bias".into(), vec![self.attn_dim]));
        v.push(("head_f.weight".into(), vec![self.num_classes, self.channels]));
        v.push(("head_f.bias".into(), vec![self.num_classes]));
        v.push(("head_fs.weight".into(), vec![self.num_classes, 2 * self.channels]));
        v.push(("head_fs.bias".into(), vec![self.num_classes]));
        v
    }

    fn from_shapes(shapes: &[(String, Vec<usize>)]) -> Result<Self> {
        let get = |name: &str| {
            shapes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let s1 = get("stage1.conv.weight")?;
        let s2 = get("stage2.conv.weight")?;
        let s3 = get("stage3.conv.weight")?;
        let s4 = get("stage4.conv.weight")?;
        let ao = get("agg_o.conv.weight")?;
        let hf = get("head_f.weight")?;
        let bad = || Error::Format("checkpoint tensor ranks do not match the architecture".into());
        if s1.len() != 4 || s2.len() != 4 || s3.len() != 4 || s4.len() != 4 || ao.len() != 4 || hf.len() != 2 {
            return Err(bad());
        }
        let cfg = ModelConfig {
            in_channels: s1[1],
            num_classes: hf[0],
            stage_channels: [s1[0], s2[0], s3[0]],
            channels: s4[0],
            attn_dim: ao[0],
        };
        if cfg.param_shapes() != shapes {
            return Err(Error::Format(
                "checkpoint tensors do not match the expected names/shapes".into(),
            ));
        }
        Ok(cfg)
    }
}

/// Per-batch outputs of the feature extractor and aggregators.
#[derive(Debug, Clone)]
pub struct Features {
    /// `N×C_s×h×w`, average-pooled to the deep map's resolution.
    pub shallow: Tensor,
    /// `N×C×h×w`.
    pub deep: Tensor,
    /// `N×d×(h·w)`, each row a distribution over positions.
    pub attn_o: Tensor,
    pub attn_b: Tensor,
    /// `N×C`.
    pub z_o: Tensor,
    pub z_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let width = w.shape()[1];
    if x.shape().len() != 2 || x.shape()[1] != width {
        return Err(Error::shape(
            "linear",
            format!("input {:?} for weight {:?}", x.shape(), w.shape()),
        ));
    }
    x.matmul(&w.transpose()?)?.add_broadcast(b)
}

impl Model {
    /// Fan-in scaled Gaussian weights (`√(2/fan_in)` for ReLU convs,
    /// `√(1/fan_in)` for attention and heads), zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("stage") { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(Parameter::new(name, &shape, values)?);
        }
        Ok(Model { config, params })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .tensor
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// A copy whose parameters are constants, for attribution and
    /// evaluation. Safe to share across threads.
    pub fn frozen(&self) -> Model {
        Model {
            config: self.config,
            params: self.params.iter().map(Parameter::frozen).collect(),
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// `N×3×H×W` → (shallow `N×C_s×h×w`, deep `N×C×h×w`), `h = H/8`.
    pub fn backbone(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
            return Err(Error::shape(
                "backbone",
                format!(
                    "expected N×{}×H×W with H, W divisible by 8, got {s:?}",
                    self.config.in_channels
                ),
            ));
        }
        let stage = |x: &Tensor, n: usize, stride: usize| -> Result<Tensor> {
            Ok(x.conv2d(
                self.param(&format!("stage{n}.conv.weight")),
                Some(self.param(&format!("stage{n}.conv.bias"))),
                stride,
                1,
            )?
            .relu())
        };
        let x1 = stage(images, 1, 1)?;
        let x2 = stage(&x1, 2, 2)?;
        let x3 = stage(&x2, 3, 2)?;
        let deep = stage(&x3, 4, 2)?;
        let shallow = x2.avg_pool2d(4)?;
        Ok((shallow, deep))
    }

    /// Attention pooling of the deep map: `z = mean_d(attn · deepᵀ)`.
    pub fn aggregate(&self, deep: &Tensor, shallow: &Tensor) -> Result<Features> {
        let (ds, ss) = (deep.shape(), shallow.shape());
        if ds.len() != 4 || ss.len() != 4 || ds[0] != ss[0] || ds[2..] != ss[2..] {
            return Err(Error::shape(
                "aggregate",
                format!("deep {ds:?} and shallow {ss:?} must share N, h, w"),
            ));
        }
        let (n, c, hw) = (ds[0], ds[1], ds[2] * ds[3]);
        let d = self.config.attn_dim;
        let values = deep.reshape(&[n, c, hw])?.transpose()?;
        let attend = |src: &Tensor, prefix: &str| -> Result<(Tensor, Tensor)> {
            let logits = src.conv2d(
                self.param(&format!("{prefix}.conv.weight")),
                Some(self.param(&format!("{prefix}.conv.bias"))),
                1,
                0,
            )?;
            let attn = logits.reshape(&[n, d, hw])?.softmax(2)?;
            let z = attn.matmul(&values)?.mean_axis(1)?;
            Ok((attn, z))
        };
        let (attn_o, z_o) = attend(deep, "agg_o")?;
        let (attn_b, z_b) = attend(shallow, "agg_b")?;
        Ok(Features {
            shallow: shallow.clone(),
            deep: deep.clone(),
            attn_o,
            attn_b,
            z_o,
            z_b,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Features> {
        let (shallow, deep) = self.backbone(images)?;
        self.aggregate(&deep, &shallow)
    }

    /// Head `f`: `N×C` → `N×K` logits.
    pub fn classify(&self, rep: &Tensor) -> Result<Tensor> {
        linear(rep, self.param("head_f.weight"), self.param("head_f.bias"))
    }

    /// Head `f_s`: `N×2C` → `N×K` logits.
    pub fn classify_shuffled(&self, rep: &Tensor) -> Result<Tensor> {
        linear(rep, self.param("head_fs.weight"), self.param("head_fs.bias"))
    }

    /// Little-endian checkpoint bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(0); // dtype f64
            out.push(p.shape().len() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(Error::Format(format!("unsupported dtype code {dtype}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, shape, values));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        let shapes: Vec<(String, Vec<usize>)> = entries.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        let config = ModelConfig::from_shapes(&shapes)?;
        let params = entries
            .into_iter()
            .map(|(name, shape, values)| Parameter::new(name, &shape, values))
            .collect::<Result<_>>()?;
        Ok(Model { config, params })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(&format!(
                "truncated: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
