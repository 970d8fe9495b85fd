//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic      "DFPN"
//! version    u32 (= 1)
//! config     11 x u32: n_inputs, base_channels, feature_rdbs,
//!            bottleneck_rdbs, reconstruction_rdbs, rdb_depth, rdb_growth,
//!            attention (0 none, 1 channel, 2 spatial, 3 both),
//!            attention_ratio, spatial_kernel, image_channels
//! count      u32 number of tensors
//! tensor     u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!            f32 values (row-major)            -- repeated `count` times
//! has_state  u8 (0 or 1)
//! state      u64 t, f64 base_lr, u64 halve_every, f64 beta1, f64 beta2,
//!            f64 eps, then the f32 values of every first-moment tensor and
//!            every second-moment tensor in table order
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use dfpn_core::attention::AttentionMode;
use dfpn_core::model::{ModelConfig, Parameters};
use dfpn_core::optim::{AdamHyper, TrainState};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFPN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Parameters<f32>,
    pub state: Option<TrainState<f32>>,
}

fn attention_code(m: AttentionMode) -> u32 {
    match m {
        AttentionMode::None => 0,
        AttentionMode::Channel => 1,
        AttentionMode::Spatial => 2,
        AttentionMode::Both => 3,
    }
}

fn attention_from(code: u32) -> Option<AttentionMode> {
    Some(match code {
        0 => AttentionMode::None,
        1 => AttentionMode::Channel,
        2 => AttentionMode::Spatial,
        3 => AttentionMode::Both,
        _ => return None,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize to the checkpoint byte layout.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let c = &ck.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.n_inputs,
        c.base_channels,
        c.feature_rdbs,
        c.bottleneck_rdbs,
        c.reconstruction_rdbs,
        c.rdb_depth,
        c.rdb_growth,
        attention_code(c.attention) as usize,
        c.attention_ratio,
        c.spatial_kernel,
        c.image_channels,
    ] {
        put_u32(&mut out, v);
    }
    let named = ck.params.named();
    put_u32(&mut out, named.len());
    for (name, t) in &named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims().len());
        for &d in t.dims() {
            put_u32(&mut out, d);
        }
        put_values(&mut out, t.data);
    }
    match &ck.state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.t.to_le_bytes());
            out.extend_from_slice(&s.base_lr.to_le_bytes());
            out.extend_from_slice(&s.halve_every.to_le_bytes());
            for v in [s.hyper.beta1, s.hyper.beta2, s.hyper.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for moments in [&s.m, &s.v] {
                for (_, t) in moments.named() {
                    put_values(&mut out, t.data);
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode(ck)).map_err(Error::io(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{} at byte {}", msg.into(), self.pos),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, dst: &mut [f32]) -> Result<()> {
        let bytes = self.take(dst.len() * 4)?;
        for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        Ok(())
    }
}

/// Parse checkpoint bytes. With `expect`, the stored parameter table must
/// match that configuration's names and shapes.
pub fn decode(bytes: &[u8], path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "not a DFPN checkpoint (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader { buf: body, pos: 8, path };
    let mut f = [0usize; 11];
    for v in f.iter_mut() {
        *v = r.u32()? as usize;
    }
    let attention = attention_from(f[7] as u32).ok_or_else(|| r.err(format!("unknown attention code {}", f[7])))?;
    let stored_cfg = ModelConfig {
        n_inputs: f[0],
        base_channels: f[1],
        feature_rdbs: f[2],
        bottleneck_rdbs: f[3],
        reconstruction_rdbs: f[4],
        rdb_depth: f[5],
        rdb_growth: f[6],
        attention,
        attention_ratio: f[8],
        spatial_kernel: f[9],
        image_channels: f[10],
    };
    stored_cfg.validate()?;

    let count = r.u32()? as usize;
    let mut table: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(r.err(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let start = r.pos;
        r.take(dims.iter().product::<usize>() * 4)?;
        table.push((name, dims, start));
    }

    let cfg = expect.copied().unwrap_or(stored_cfg);
    let mut params = Parameters::<f32>::zeros(&cfg)?;
    let expected_names = params.names();
    let missing: Vec<String> = expected_names
        .iter()
        .filter(|n| !table.iter().any(|(m, _, _)| m == *n))
        .cloned()
        .collect();
    let extra: Vec<String> = table
        .iter()
        .map(|(n, _, _)| n.clone())
        .filter(|n| !expected_names.contains(n))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(dfpn_core::Error::ParamMismatch { missing, extra }.into());
    }
    let dims: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.dims().to_vec()).collect();
    for ((name, dst), want) in expected_names.iter().zip(params.slices_mut()).zip(&dims) {
        let (_, found, start) = table.iter().find(|(m, _, _)| m == name).expect("checked above");
        if found != want {
            return Err(dfpn_core::Error::ParamShape {
                name: name.clone(),
                expected: want.clone(),
                found: found.clone(),
            }
            .into());
        }
        let mut sub = Reader {
            buf: body,
            pos: *start,
            path,
        };
        sub.values(dst)?;
    }
    if cfg != stored_cfg {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("stored configuration {stored_cfg:?} differs from the requested one"),
        });
    }

    let state = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let base_lr = r.f64()?;
            let halve_every = r.u64()?;
            let hyper = AdamHyper {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut s = TrainState::<f32>::new(&cfg, base_lr)?;
            s.t = t;
            s.halve_every = halve_every;
            s.hyper = hyper;
            for moments in [&mut s.m, &mut s.v] {
                for dst in moments.slices_mut() {
                    r.values(dst)?;
                }
            }
            Some(s)
        }
        b => return Err(r.err(format!("bad state flag {b}"))),
    };
    if r.pos != body.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(Checkpoint { cfg, params, state })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path, None)
}

/// Load and require the parameter table of `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path, Some(cfg))
}
