//! Binary checkpoint format.
//!
//! ```text
//! "SGRN" | version u32 | config_len u64 | config JSON
//!        | record_count u64 | records | FNV-1a 64 over everything before
//! record = name_len u32 | name | rank u32 | extents u64 × rank | f64 × numel
//! ```
//!
//! All integers and reals are little-endian. Parameters are stored as
//! `param.<name>`, optimizer moments as `opt.m.<name>`, `opt.v.<name>` and
//! `opt.vmax.<name>`, and the optimizer step as the scalar `opt.step`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SagrnnParams};
use crate::optim::OptimState;
use crate::params::{named, ParamTree};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGRN";
pub const VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: SagrnnParams<Tensor>,
    pub state: OptimState,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: SagrnnParams<Tensor>, state: OptimState) -> Self {
        Checkpoint {
            config,
            params,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_config(&self.config)?;
        let names: Vec<String> = named(&self.params).into_iter().map(|(n, _)| n).collect();
        if [&self.state.m, &self.state.v, &self.state.v_max]
            .iter()
            .any(|s| s.len() != names.len())
        {
            return Err(Error::Usage(
                "optimizer state does not match the parameters".into(),
            ));
        }
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        let params = named(&self.params);
        for (name, t) in &params {
            records.push((format!("param.{name}"), t));
        }
        for (prefix, slots) in [
            ("opt.m", &self.state.m),
            ("opt.v", &self.state.v),
            ("opt.vmax", &self.state.v_max),
        ] {
            for (name, t) in names.iter().zip(slots.iter()) {
                records.push((format!("{prefix}.{name}"), t));
            }
        }
        let step = Tensor::scalar(self.state.step as f64);
        records.push(("opt.step".into(), &step));

        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated
            } else {
                Error::Format("bad magic".into())
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        let computed = fnv1a64(body);
        let parsed = parse_body(body);
        if stored != computed {
            return Err(match parsed {
                Err(Error::Truncated) => Error::Truncated,
                _ => Error::Checksum { stored, computed },
            });
        }
        parsed
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored model configuration is `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::Config(format!(
                "checkpoint was written for {:?}, expected {:?}",
                ckpt.config, expected
            )));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format(format!("length {n} out of range")))
    }
}

fn parse_body(body: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let config_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    config.validate()?;
    let count = r.len()?;
    let mut records: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Format(format!("record {name} is too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected bytes after the records",
            body.len() - r.pos
        )));
    }

    let mut records = records.into_iter();
    let mut next = |want: &str| -> Result<Tensor> {
        match records.next() {
            Some((name, t)) if name == want => Ok(t),
            Some((name, _)) => Err(Error::Config(format!(
                "expected record {want}, found {name}"
            ))),
            None => Err(Error::Config(format!("missing record {want}"))),
        }
    };
    let mut params = SagrnnParams::init_seeded(&config, 0)?;
    let mut failure = None;
    params.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match next(&format!("param.{name}")) {
            Ok(t) if t.shape() == slot.shape() => *slot = t,
            Ok(t) => {
                failure = Some(Error::Config(format!(
                    "parameter {name} has shape {:?}, the configuration needs {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let names: Vec<(String, Tensor)> = named(&params);
    let mut state = OptimState::new(&params);
    for (prefix, slots) in [
        ("opt.m", &mut state.m),
        ("opt.v", &mut state.v),
        ("opt.vmax", &mut state.v_max),
    ] {
        for ((name, p), slot) in names.iter().zip(slots.iter_mut()) {
            let t = next(&format!("{prefix}.{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::Config(format!(
                    "{prefix}.{name} has shape {:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
    }
    let step = next("opt.step")?.item()?;
    if step < 0.0 || step.fract() != 0.0 {
        return Err(Error::Format(format!(
            "optimizer step {step} is not a count"
        )));
    }
    state.step = step as u64;
    if let Some((name, _)) = records.next() {
        return Err(Error::Format(format!("unexpected record {name}")));
    }
    Ok(Checkpoint {
        config,
        params,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::amsgrad_step;

    fn sample() -> Checkpoint {
        let config = ModelConfig::tiny();
        let mut params = SagrnnParams::init_seeded(&config, 7).unwrap();
        let mut state = OptimState::new(&params);
        let mut grads = Vec::new();
        params.visit("", &mut |_, t| grads.push(t.map(|v| 0.5 * v + 0.01)));
        for _ in 0..3 {
            amsgrad_step(&mut state, &mut params, &grads, 1e-3).unwrap();
        }
        Checkpoint::new(config, params, state)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.state.step, 3);
        let again = dir.path().join("b.ckpt");
        back.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn corruption_is_reported_distinctly() {
        let bytes = sample().to_bytes().unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(Error::Format(_))
        ));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(Error::Version {
                found: 9,
                expected: 1
            })
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::Checksum { .. })
        ));

        for cut in [2, 6, 12, 100, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn config_mismatch_is_a_config_error() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let other = ModelConfig {
            hidden: 9,
            ..ModelConfig::tiny()
        };
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(Error::Config(_))
        ));
        Checkpoint::load_for(&path, &ModelConfig::tiny()).unwrap();

        // Header claims a different model than the records hold.
        let bytes = ck.to_bytes().unwrap();
        let text = serde_json::to_string(&ck.config).unwrap();
        let forged_text = text.replace("\"hidden\":8", "\"hidden\":9");
        assert_eq!(forged_text.len(), text.len());
        let mut body = bytes[..bytes.len() - 8].to_vec();
        let at = body
            .windows(text.len())
            .position(|w| w == text.as_bytes())
            .unwrap();
        body[at..at + text.len()].copy_from_slice(forged_text.as_bytes());
        let sum = fnv1a64(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&body),
            Err(Error::Config(_))
        ));
    }
}
