//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! magic "KTCK" | version u32 | precision u8
//! | network section | optimizer section | discriminator section
//! | regressor section | cursor: phase u8, iteration u64 | config sha256
//! ```
//!
//! Each section starts with a presence byte. Specs are length-prefixed JSON;
//! parameter lists are a u32 count of `(name, part u8, frozen u8, rank u8,
//! dims u64…, values)` entries.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use ktan_core::metrics::Phase;
use ktan_core::nn::{Network, NetworkState, Param, Part, Sgd};
use ktan_core::regressor::Regressor;
use ktan_core::tensor::{Precision, Real, Tensor};
use ktan_core::train::{Cursor, Discriminator};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Option<Network<T>>,
    pub optimizer: Option<Sgd<T>>,
    pub discriminator: Option<Discriminator<T>>,
    pub regressor: Option<Regressor<T>>,
    pub cursor: Cursor,
    pub config_hash: [u8; 32],
}

fn phase_tag(p: Phase) -> u8 {
    match p {
        Phase::Regressor => 0,
        Phase::Pretrain => 1,
        Phase::Adversarial => 2,
        Phase::Eval => 3,
    }
}

fn phase_from_tag(t: u8) -> CliResult<Phase> {
    Ok(match t {
        0 => Phase::Regressor,
        1 => Phase::Pretrain,
        2 => Phase::Adversarial,
        3 => Phase::Eval,
        _ => return Err(CliError::Checkpoint(format!("unknown phase tag {t}"))),
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn json<S: Serialize>(&mut self, v: &S) {
        self.bytes(&serde_json::to_vec(v).expect("spec serializes"));
    }

    fn values<T: Real>(&mut self, vs: &[T]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            v.write_le(&mut self.0);
        }
    }

    fn params<T: Real>(&mut self, state: &NetworkState<T>) {
        self.u32(state.params.len() as u32);
        for p in &state.params {
            self.bytes(p.name.as_bytes());
            self.u8(match p.part {
                Part::Generator => 0,
                Part::Classifier => 1,
            });
            self.u8(p.frozen as u8);
            self.u8(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                self.u64(d as u64);
            }
            for &v in p.value.data() {
                v.write_le(&mut self.0);
            }
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            CliError::Checkpoint(format!("truncated {what} at byte {}", self.at))
        })?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> CliResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> CliResult<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.b.len() - self.at)
            .ok_or_else(|| CliError::Checkpoint(format!("{what}: length {n} exceeds the file")))
    }

    fn bytes(&mut self, what: &str) -> CliResult<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> CliResult<String> {
        String::from_utf8(self.bytes(what)?.to_vec())
            .map_err(|_| CliError::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn json<D: DeserializeOwned>(&mut self, what: &str) -> CliResult<D> {
        serde_json::from_slice(self.bytes(what)?).map_err(|e| CliError::Checkpoint(format!("{what}: {e}")))
    }

    fn values<T: Real>(&mut self, n: usize, what: &str) -> CliResult<Vec<T>> {
        let w = T::PRECISION.byte_width();
        let raw = self.take(n.saturating_mul(w), what)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }

    fn params<T: Real>(&mut self, what: &str) -> CliResult<NetworkState<T>> {
        let count = self.u32(what)? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = self.string("parameter name")?;
            let part = match self.u8("parameter part")? {
                0 => Part::Generator,
                1 => Part::Classifier,
                t => return Err(CliError::Checkpoint(format!("{name}: unknown part tag {t}"))),
            };
            let frozen = self.u8("frozen flag")? != 0;
            let rank = self.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                CliError::Checkpoint(format!("{name}: shape {shape:?} overflows"))
            })?;
            let data = self.values(n, &name)?;
            let value = Tensor::from_vec(shape, data)?;
            params.push(Param {
                name,
                part,
                value,
                frozen,
            });
        }
        Ok(NetworkState { params })
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(T::PRECISION.tag());

        w.u8(self.network.is_some() as u8);
        if let Some(n) = &self.network {
            w.json(&n.spec);
            w.params(&n.state);
        }
        w.u8(self.optimizer.is_some() as u8);
        if let Some(o) = &self.optimizer {
            w.f64(o.learning_rate.to_f64_lossy());
            w.f64(o.momentum.to_f64_lossy());
            w.f64(o.weight_decay.to_f64_lossy());
            w.u32(o.velocities().len() as u32);
            for (name, v) in o.velocities() {
                w.bytes(name.as_bytes());
                w.values(v);
            }
        }
        w.u8(self.discriminator.is_some() as u8);
        if let Some(d) = &self.discriminator {
            w.json(&d.spec);
            w.params(&d.state);
        }
        w.u8(self.regressor.is_some() as u8);
        if let Some(r) = &self.regressor {
            w.json(&r.spec);
            w.u8(r.trained as u8);
            w.params(&r.state);
        }
        w.u8(phase_tag(self.cursor.phase));
        w.u64(self.cursor.iteration);
        w.0.extend_from_slice(&self.config_hash);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let precision = r.u8("precision")?;
        if Precision::from_tag(precision) != Some(T::PRECISION) {
            return Err(CliError::Checkpoint(format!(
                "checkpoint precision tag {precision}, expected {:?}",
                T::PRECISION
            )));
        }

        let network = match r.u8("network flag")? {
            0 => None,
            _ => {
                let spec = r.json("network spec")?;
                let state = r.params("network parameters")?;
                Some(Network::from_parts(spec, state)?)
            }
        };
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            _ => {
                let lr = r.f64("learning rate")?;
                let mu = r.f64("momentum")?;
                let wd = r.f64("weight decay")?;
                let mut o = Sgd::new(T::from_f64_lossy(lr), T::from_f64_lossy(mu), T::from_f64_lossy(wd))?;
                for _ in 0..r.u32("velocity count")? {
                    let name = r.string("velocity name")?;
                    let n = r.len("velocity length")?;
                    let v = r.values(n, &name)?;
                    o.set_velocity(name, v);
                }
                Some(o)
            }
        };
        let discriminator = match r.u8("discriminator flag")? {
            0 => None,
            _ => {
                let spec = r.json("discriminator spec")?;
                let state = r.params("discriminator parameters")?;
                Some(Discriminator::from_parts(spec, state)?)
            }
        };
        let regressor = match r.u8("regressor flag")? {
            0 => None,
            _ => {
                let spec = r.json("regressor spec")?;
                let trained = r.u8("trained flag")? != 0;
                let state = r.params("regressor parameters")?;
                Some(Regressor::from_parts(spec, state, trained)?)
            }
        };
        let phase = phase_from_tag(r.u8("cursor phase")?)?;
        let iteration = r.u64("cursor iteration")?;
        let config_hash = r.take(32, "config hash")?.try_into().unwrap();
        if r.at != bytes.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            network,
            optimizer,
            discriminator,
            regressor,
            cursor: Cursor { phase, iteration },
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CliError::Checkpoint(msg) => CliError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ktan_core::desk;
    use ktan_core::regressor::solve_regressor_geometry;
    use ktan_core::train::DiscriminatorSpec;

    fn sample() -> Checkpoint<f32> {
        let mut net = Network::<f32>::init(desk::student([1, 16, 16], 4), 3).unwrap();
        net.state.params[0].frozen = true;
        let mut opt = Sgd::new(0.02f32, 0.9, 1e-4).unwrap();
        opt.set_velocity("a".into(), vec![1.0, -2.5, f32::MIN_POSITIVE]);
        opt.set_velocity("b".into(), vec![]);
        let map = net.spec.feature_map_shape().unwrap();
        let d = Discriminator::init(DiscriminatorSpec { input: map, channels: 8 }, 5).unwrap();
        let rs = solve_regressor_geometry([64, 6, 6], map, [1, 1], [0, 0]).unwrap();
        let mut reg = Regressor::init(rs, 7).unwrap();
        reg.state.freeze_all(true);
        Checkpoint {
            network: Some(net),
            optimizer: Some(opt),
            discriminator: Some(d),
            regressor: Some(Regressor { trained: true, ..reg }),
            cursor: Cursor {
                phase: Phase::Adversarial,
                iteration: 41,
            },
            config_hash: [9; 32],
        }
    }

    #[test]
    fn encode_decode_is_identity() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let empty = Checkpoint::<f32> {
            network: None,
            optimizer: None,
            discriminator: None,
            regressor: None,
            ..c
        };
        assert_eq!(Checkpoint::decode(&empty.encode()).unwrap(), empty);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[4] = 99;
        let err = Checkpoint::<f32>::decode(&bad).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::decode(b"NOPE").is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::<f32>::decode(&long).is_err());
        for cut in [5, 9, 10, 200, bytes.len() / 2] {
            assert!(Checkpoint::<f32>::decode(&bytes[..cut]).is_err());
        }
    }
}
