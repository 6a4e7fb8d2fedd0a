//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "SSCK" | u32 version | u64 step | u32 c | u32 n_classes | u32 variant
//! f32×3 mean | f32×3 std | u32 tensor count
//! per tensor: u32 name length | name (utf-8) | u8 dtype (0 = f32)
//!             u32 rank | u32 extents… | f32 payload
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, NormStats, Variant};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: ModelConfig,
    pub norm: NormStats,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64) -> Self {
        Self {
            step,
            config: model.config,
            norm: model.norm,
            store: model.store.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_parts(self.config, self.norm, self.store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for v in [
            self.config.c as u32,
            self.config.n_classes as u32,
            self.config.variant.code(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for e in self.store.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().expect("8 bytes"));
        let c = r.u32("channel factor")? as usize;
        let n_classes = r.u32("class count")? as usize;
        let code = r.u32("variant")?;
        let variant = Variant::from_code(code)
            .ok_or_else(|| Error::Mismatch(format!("unknown variant code {code}")))?;
        let mut norm = NormStats::default();
        for v in norm.mean.iter_mut().chain(norm.std.iter_mut()) {
            *v = r.f32("normalization")?;
        }
        let count = r.u32("tensor count")? as usize;
        let mut store = ParamStore::new();
        let template = Model::<f32>::new(ModelConfig::new(c.max(1), n_classes.max(1), variant), 0)?;
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Mismatch(format!("tensor {i}: name is not utf-8")))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Mismatch(format!("tensor `{name}`: unsupported dtype {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extents").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Truncated {
                context: format!("tensor `{name}` extents overflow"),
            })?, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let trainable = template
                .store
                .find(&name)
                .map_or(true, |id| template.store.entry(id).trainable);
            store.add(name, Tensor::new(shape, data)?, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Mismatch(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            step,
            config: ModelConfig::new(c, n_classes, variant),
            norm,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                context: format!(
                    "reading {what} at byte {}: need {n}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut m = Model::<f32>::new(ModelConfig::new(2, 4, Variant::Full), 11).unwrap();
        m.norm.mean = [100.0, 110.0, 120.0];
        Checkpoint::from_model(&m, 42)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.norm, ck.norm);
        for (a, b) in ck.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert!(a.value.bitwise_eq(&b.value));
        }
        assert_eq!(back.to_bytes(), bytes);
        let m = back.into_model().unwrap();
        assert_eq!(m.param_count(), ck.config.param_count());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck/model.bin");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::BadMagic { found }) if found[0] == b'X'));
    }

    #[test]
    fn wrong_version() {
        let mut b = sample().to_bytes();
        b[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Version { found: 7, expected: VERSION })
        ));
    }

    #[test]
    fn truncation_anywhere_is_reported() {
        let b = sample().to_bytes();
        for cut in [0, 3, 10, 30, 50, b.len() / 2, b.len() - 1] {
            let err = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn channel_factor_comes_from_header() {
        let b = sample().to_bytes();
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        let mut wrong = b.clone();
        wrong[16..20].copy_from_slice(&3u32.to_le_bytes());
        let ck = Checkpoint::from_bytes(&wrong).unwrap();
        assert!(matches!(ck.into_model(), Err(Error::Mismatch(_))));
    }
}
