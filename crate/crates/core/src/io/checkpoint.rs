//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MCWC" | u32 version
//! u64 len | config text (UTF-8)
//! u64 seed
//! u32 count | count x (u32 len | name | MCWT tensor)
//! f64 beta1 | f64 beta2 | f64 eps | f64 lr0 | u64 warmup | f64 decay | u64 step
//! u32 count | count x (u32 len | name | MCWT m | MCWT v)
//! u32 CRC32 of every preceding byte
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dequant::DensityModel;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{mcwt, Real, Tensor};
use crate::train::{LrSchedule, Moments, OptimState};

pub const MAGIC: &[u8; 4] = b"MCWC";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    pub seed: u64,
    /// Every parameter and buffer, by name, in model order.
    pub params: Vec<(String, Tensor<T>)>,
    pub optim: OptimState<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.cur
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.bytes(len)?)
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.string(n)
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        mcwt::read(&mut self.cur)?.into_real()
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(dm: &DensityModel<T>, optim: &OptimState<T>, seed: u64) -> Self {
        Checkpoint {
            config: dm.config().clone(),
            seed,
            params: dm
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optim: optim.clone(),
        }
    }

    /// Copies stored values into `dm`, which must have been built from the
    /// same config.
    pub fn restore_into(&self, dm: &mut DensityModel<T>) -> Result<()> {
        if dm.config() != &self.config {
            return Err(Error::Config(
                "checkpoint config does not match the model".into(),
            ));
        }
        let mut targets = dm.params_mut();
        if targets.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                targets.len()
            )));
        }
        for (p, (name, value)) in targets.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint and loads its values.
    pub fn model(&self) -> Result<DensityModel<T>> {
        let mut dm = DensityModel::build(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut dm)?;
        Ok(dm)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text = self.config.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_name(&mut out, name);
            mcwt::encode_into(t, &mut out);
        }
        let o = &self.optim;
        put_f64(&mut out, o.beta1);
        put_f64(&mut out, o.beta2);
        put_f64(&mut out, o.eps);
        put_f64(&mut out, o.schedule.lr0);
        put_u64(&mut out, o.schedule.warmup);
        put_f64(&mut out, o.schedule.decay);
        put_u64(&mut out, o.step);
        put_u32(&mut out, o.moments.len() as u32);
        for m in &o.moments {
            put_name(&mut out, &m.name);
            mcwt::encode_into(&m.m, &mut out);
            mcwt::encode_into(&m.v, &mut out);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses a checkpoint, verifying the trailing CRC before anything else.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader {
            cur: Cursor::new(body),
        };
        r.bytes(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let len = r.u64()? as usize;
        let config = ModelConfig::parse(&r.string(len)?)?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            params.push((name, r.tensor()?));
        }
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let schedule = LrSchedule {
            lr0: r.f64()?,
            warmup: r.u64()?,
            decay: r.f64()?,
        };
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            moments.push(Moments { name, m, v });
        }
        if (r.cur.position() as usize) != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        Ok(Checkpoint {
            config,
            seed,
            params,
            optim: OptimState {
                beta1,
                beta2,
                eps,
                schedule,
                step,
                moments,
            },
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (DensityModel<f64>, OptimState<f64>) {
        let cfg = ModelConfig::parse(
            "levels = 1\ndepths = [1]\nmultiscale = original\nimage = 4x4x1\nhidden_channels = 4\n\
             n_bits = 3\ndequant_units = 1\ndequant_hidden_channels = 4\ndequant_context_channels = 2\n",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dm = DensityModel::build(&cfg, &mut rng).unwrap();
        let mut opt = OptimState::new(LrSchedule::default());
        let mut params = dm.params_mut();
        let grads: Vec<Tensor<f64>> = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Tensor::randn(p.value.shape(), 1.0, &mut rng))
            .collect();
        opt.update(&mut params, &grads).unwrap();
        (dm, opt)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (dm, opt) = toy();
        let ck = Checkpoint::capture(&dm, &opt, 42);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::<f64>::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), std::fs::read(&p).unwrap());
        let rebuilt = back.model().unwrap();
        for (a, b) in rebuilt.params().iter().zip(dm.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let (dm, opt) = toy();
        let bytes = Checkpoint::capture(&dm, &opt, 1).encode();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            Checkpoint::<f64>::decode(cut),
            Err(Error::Crc { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            Checkpoint::<f64>::decode(&flipped),
            Err(Error::Crc { .. })
        ));
        assert!(Checkpoint::<f64>::decode(b"MCWT").is_err());
    }

    #[test]
    fn version_mismatch_detected() {
        let (dm, opt) = toy();
        let mut bytes = Checkpoint::capture(&dm, &opt, 1).encode();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::decode(&bytes),
            Err(Error::Version(9))
        ));
    }

    #[test]
    fn config_mismatch_rejected() {
        let (dm, opt) = toy();
        let mut ck = Checkpoint::capture(&dm, &opt, 1);
        ck.config.hidden_channels = 8;
        let mut dm2 = dm.clone();
        assert!(matches!(ck.restore_into(&mut dm2), Err(Error::Config(_))));
    }

    #[test]
    fn loads_into_other_precision() {
        let (dm, opt) = toy();
        let bytes = Checkpoint::capture(&dm, &opt, 1).encode();
        let ck32 = Checkpoint::<f32>::decode(&bytes).unwrap();
        let dm32 = ck32.model().unwrap();
        let a = &dm.params()[0].value;
        let b = &dm32.params()[0].value;
        assert_eq!(a.shape(), b.shape());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (*x as f32) == *y));
    }
}
