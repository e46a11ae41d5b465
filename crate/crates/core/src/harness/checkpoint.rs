//! Binary checkpoints.
//!
//! Layout: magic `CMNT`, u32 version, u32 entry count, then per entry a
//! u32 name length, the UTF-8 name, u32 ndim, u32 dims and the f32
//! payload, all little-endian. A trailing u64 holds the byte length of
//! everything before it.
//!
//! Besides model parameters a checkpoint holds the run configuration as
//! JSON bytes (`meta/config`), the epoch and optimizer step counters, and
//! the Adam moments (`opt/m/<name>`, `opt/v/<name>`). Integers are stored
//! as 16-bit limbs so every value is exact in f32. Every random stream is
//! derived from the configured seed and the epoch, so those two values
//! are the complete RNG state.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"CMNT";
pub const VERSION: u32 = 1;

const CONFIG: &str = "meta/config";
const EPOCH: &str = "meta/epoch";
const STEP: &str = "meta/step";
const M_PREFIX: &str = "opt/m/";
const V_PREFIX: &str = "opt/v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
    /// Every model tensor, trainable or not, in store order.
    pub params: Vec<(String, Tensor<f32>)>,
    /// First and second Adam moments of the trainable tensors, by name.
    pub adam_m: Vec<(String, Tensor<f32>)>,
    pub adam_v: Vec<(String, Tensor<f32>)>,
}

fn u64_limbs(x: u64) -> Tensor<f32> {
    Tensor::vector((0..4).map(|i| ((x >> (16 * i)) & 0xFFFF) as f32).collect())
}

fn limbs_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.len() != 4 {
        return None;
    }
    let mut x = 0u64;
    for (i, &v) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&v) || v.fract() != 0.0 {
            return None;
        }
        x |= (v as u64) << (16 * i);
    }
    Some(x)
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        let json = serde_json::to_vec(&self.config).expect("config serialises");
        let mut out = vec![
            (
                CONFIG.to_string(),
                Tensor::vector(json.iter().map(|&b| b as f32).collect()),
            ),
            (EPOCH.to_string(), u64_limbs(self.epoch)),
            (STEP.to_string(), u64_limbs(self.step)),
        ];
        out.extend(self.params.iter().cloned());
        out.extend(self.adam_m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t.clone())));
        out.extend(self.adam_v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t.clone())));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let len = buf.len() as u64;
        buf.extend_from_slice(&len.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 20 {
            return Err(fail("file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let declared = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if declared != body.len() as u64 {
            return Err(fail(format!(
                "length check failed: trailer says {declared} bytes, found {}",
                body.len()
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..count {
            let entry = r
                .entry()
                .ok_or_else(|| fail(format!("entry {i} is truncated or malformed")))?;
            entries.push(entry);
        }
        if r.pos != body.len() {
            return Err(fail(format!(
                "{} unread bytes after the last entry",
                body.len() - r.pos
            )));
        }
        Self::from_entries(entries).map_err(fail)
    }

    fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> std::result::Result<Self, String> {
        let mut config = None;
        let (mut epoch, mut step) = (None, None);
        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, t) in entries {
            match name.as_str() {
                CONFIG => {
                    let bytes: Option<Vec<u8>> = t
                        .data()
                        .iter()
                        .map(|&b| (b.fract() == 0.0 && (0.0..256.0).contains(&b)).then_some(b as u8))
                        .collect();
                    let bytes = bytes.ok_or("config entry is not a byte string")?;
                    config = Some(serde_json::from_slice(&bytes).map_err(|e| format!("config: {e}"))?);
                }
                EPOCH => epoch = Some(limbs_u64(&t).ok_or("bad epoch entry")?),
                STEP => step = Some(limbs_u64(&t).ok_or("bad step entry")?),
                _ => {
                    if let Some(n) = name.strip_prefix(M_PREFIX) {
                        adam_m.push((n.to_string(), t));
                    } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                        adam_v.push((n.to_string(), t));
                    } else {
                        params.push((name, t));
                    }
                }
            }
        }
        Ok(Self {
            config: config.ok_or("missing config entry")?,
            epoch: epoch.ok_or("missing epoch entry")?,
            step: step.ok_or("missing step entry")?,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn entry(&mut self) -> Option<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(len.checked_mul(4)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}
