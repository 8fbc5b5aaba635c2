use std::path::Path;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Dimensions of the attention back-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackendConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Heads of the scaled-dot self-attention block.
    pub sdsa_heads: usize,
    /// Heads of the feed-forward self-attention pooling.
    pub ffsa_heads: usize,
    /// Hidden width of each pooling head.
    pub ffsa_hidden: usize,
}

impl BackendConfig {
    pub const DEFAULT_SDSA_HEADS: usize = 4;
    pub const DEFAULT_FFSA_HEADS: usize = 4;
    pub const DEFAULT_FFSA_HIDDEN: usize = 64;

    pub fn new(
        dim: usize,
        sdsa_heads: usize,
        ffsa_heads: usize,
        ffsa_hidden: usize,
    ) -> Result<Self> {
        let cfg = BackendConfig {
            dim,
            sdsa_heads,
            ffsa_heads,
            ffsa_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default head counts and hidden width for embeddings of size `dim`.
    pub fn with_dim(dim: usize) -> Result<Self> {
        Self::new(
            dim,
            Self::DEFAULT_SDSA_HEADS,
            Self::DEFAULT_FFSA_HEADS,
            Self::DEFAULT_FFSA_HIDDEN,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.sdsa_heads == 0 || self.ffsa_heads == 0 || self.ffsa_hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "all backend dimensions must be >= 1, got {self:?}"
            )));
        }
        if !self.dim.is_multiple_of(self.sdsa_heads) || !self.dim.is_multiple_of(self.ffsa_heads) {
            return Err(Error::InvalidArgument(format!(
                "head counts {} and {} must both divide dim {}",
                self.sdsa_heads, self.ffsa_heads, self.dim
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn sdsa_head_dim(&self) -> usize {
        self.dim / self.sdsa_heads
    }

    #[inline]
    pub fn ffsa_head_dim(&self) -> usize {
        self.dim / self.ffsa_heads
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim;
        3 * d * d
            + d * d
            + self.ffsa_heads * (self.ffsa_hidden * self.ffsa_head_dim() + self.ffsa_hidden)
            + 2
    }
}

/// Every trainable tensor of the attention back-end.
///
/// The same type doubles as a gradient container; see [`zeros_like`](Self::zeros_like).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBackendParams {
    config: BackendConfig,
    /// Per self-attention head, `dim x head_dim`.
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// Output projection applied to the concatenated heads, `dim x dim`.
    pub output: Matrix,
    /// Per pooling head, `hidden x head_dim`.
    pub pool_proj: Vec<Matrix>,
    /// Per pooling head, length `hidden`.
    pub pool_context: Vec<Vec<f64>>,
    /// Logistic calibration `s = scale * cos + offset`.
    pub scale: f64,
    pub offset: f64,
}

/// Lower bound enforced on `scale` after each update.
pub const MIN_SCALE: f64 = 1e-3;
pub const INIT_SCALE: f64 = 10.0;
pub const INIT_OFFSET: f64 = -5.0;

impl AttentionBackendParams {
    pub fn zeros(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hd = config.sdsa_head_dim();
        let pd = config.ffsa_head_dim();
        let mats =
            |n: usize, r: usize, c: usize| (0..n).map(|_| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Ok(AttentionBackendParams {
            config,
            query: mats(config.sdsa_heads, d, hd),
            key: mats(config.sdsa_heads, d, hd),
            value: mats(config.sdsa_heads, d, hd),
            output: Matrix::zeros(d, d),
            pool_proj: mats(config.ffsa_heads, config.ffsa_hidden, pd),
            pool_context: vec![vec![0.0; config.ffsa_hidden]; config.ffsa_heads],
            scale: 0.0,
            offset: 0.0,
        })
    }

    /// Fan-in uniform initialisation, `U(-sqrt(1/fan_in), sqrt(1/fan_in))`,
    /// drawn tensor by tensor in declaration order; calibration starts at
    /// `scale = 10, offset = -5`.
    pub fn init(config: BackendConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let d = config.dim as f64;
        let pool_fan_in = config.ffsa_head_dim() as f64;
        let hidden = config.ffsa_hidden as f64;
        let fill = |t: &mut [f64], fan_in: f64, rng: &mut Rng| {
            let bound = (1.0 / fan_in).sqrt();
            for x in t {
                *x = rng.uniform_range(-bound, bound);
            }
        };
        for i in 0..config.sdsa_heads {
            fill(p.query[i].as_mut_slice(), d, rng);
            fill(p.key[i].as_mut_slice(), d, rng);
            fill(p.value[i].as_mut_slice(), d, rng);
        }
        fill(p.output.as_mut_slice(), d, rng);
        for j in 0..config.ffsa_heads {
            fill(p.pool_proj[j].as_mut_slice(), pool_fan_in, rng);
            fill(&mut p.pool_context[j], hidden, rng);
        }
        p.scale = INIT_SCALE;
        p.offset = INIT_OFFSET;
        Ok(p)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Tensors in declaration order: per self-attention head (query, key,
    /// value), output, per pooling head (projection, context), scale, offset.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> =
            Vec::with_capacity(3 * self.query.len() + 2 * self.pool_proj.len() + 3);
        for ((q, k), val) in self.query.iter().zip(&self.key).zip(&self.value) {
            v.push(q.as_slice());
            v.push(k.as_slice());
            v.push(val.as_slice());
        }
        v.push(self.output.as_slice());
        for (w, c) in self.pool_proj.iter().zip(&self.pool_context) {
            v.push(w.as_slice());
            v.push(c);
        }
        v.push(std::slice::from_ref(&self.scale));
        v.push(std::slice::from_ref(&self.offset));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> =
            Vec::with_capacity(3 * self.query.len() + 2 * self.pool_proj.len() + 3);
        for ((q, k), val) in self
            .query
            .iter_mut()
            .zip(&mut self.key)
            .zip(&mut self.value)
        {
            v.push(q.as_mut_slice());
            v.push(k.as_mut_slice());
            v.push(val.as_mut_slice());
        }
        v.push(self.output.as_mut_slice());
        for (w, c) in self.pool_proj.iter_mut().zip(&mut self.pool_context) {
            v.push(w.as_mut_slice());
            v.push(c);
        }
        v.push(std::slice::from_mut(&mut self.scale));
        v.push(std::slice::from_mut(&mut self.offset));
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                op: "set_from_flat",
                left: format!("{} parameters", self.num_params()),
                right: format!("{} values", flat.len()),
            });
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.config, other.config, "axpy across configs");
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            crate::numerics::axpy(dst, alpha, s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Keeps the calibration scale positive so scores stay monotone in cosine.
    pub fn clamp_scale(&mut self) {
        if self.scale < MIN_SCALE {
            self.scale = MIN_SCALE;
        }
    }
}

// Checkpoint layout (all little-endian):
//   "ATNB1" | dim u32 | sdsa_heads u32 | ffsa_heads u32 | ffsa_hidden u32 |
//   every tensor of `tensors()` in order as f64
pub const PARAMS_MAGIC: &[u8; 5] = b"ATNB1";

impl AttentionBackendParams {
    pub(crate) fn encode_into(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(PARAMS_MAGIC);
        let c = self.config;
        for (v, what) in [
            (c.dim, "dim"),
            (c.sdsa_heads, "sdsa_heads"),
            (c.ffsa_heads, "ffsa_heads"),
            (c.ffsa_hidden, "ffsa_hidden"),
        ] {
            w.len_u32(v, what)?;
        }
        for t in self.tensors() {
            w.f64s(t);
        }
        Ok(())
    }

    pub(crate) fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(PARAMS_MAGIC)?;
        let at = r.offset();
        let dim = r.u32("dim")? as usize;
        let sdsa_heads = r.u32("sdsa_heads")? as usize;
        let ffsa_heads = r.u32("ffsa_heads")? as usize;
        let ffsa_hidden = r.u32("ffsa_hidden")? as usize;
        let config = BackendConfig::new(dim, sdsa_heads, ffsa_heads, ffsa_hidden)
            .map_err(|e| Error::format(at, e.to_string()))?;
        // reject absurd headers before allocating
        if r.remaining() < config.num_params() * 8 {
            return Err(Error::format(
                r.offset(),
                format!(
                    "truncated parameters: need {} bytes, {} left",
                    config.num_params() * 8,
                    r.remaining()
                ),
            ));
        }
        let mut p = Self::zeros(config)?;
        for t in p.tensors_mut() {
            let vals = r.f64s(t.len(), "parameter tensor")?;
            t.copy_from_slice(&vals);
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        self.encode_into(&mut w)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let p = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}
