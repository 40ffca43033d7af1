//! Binary checkpoint container.
//!
//! Layout: `SEAMOCKP`, u32 format version, u64 body length, body, then the
//! SHA-256 of everything before it. The body holds a JSON metadata block
//! followed by named little-endian `f64` tensors and optimizer moments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, LrSchedule, Moments, OptimizerState, ParamStore, Tensor};
use crate::pretrain::{Arch, ModelState, StageKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEAMOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: ModelState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    run: RunConfig,
    arch: Arch,
    stage: Option<StageKind>,
    step: u64,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamWConfig,
    base_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
    step: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let state = &ckpt.state;
    let meta = Meta {
        run: ckpt.run.clone(),
        arch: state.arch.clone(),
        stage: state.stage,
        step: state.step,
        optimizer: state.optimizer.as_ref().map(|o| OptimizerMeta {
            config: o.config.clone(),
            base_lr: o.schedule.base_lr,
            warmup_steps: o.schedule.warmup_steps,
            total_steps: o.schedule.total_steps,
            step: o.step,
        }),
    };
    let mut body = Vec::new();
    put_str(&mut body, &serde_json::to_string(&meta).expect("metadata serializes"));
    body.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, t) in state.params.iter() {
        put_str(&mut body, name);
        body.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut body, t.data());
    }
    let moments = state.optimizer.as_ref().map(|o| &o.moments);
    body.extend_from_slice(&(moments.map_or(0, |m| m.len()) as u32).to_le_bytes());
    for (name, m) in moments.into_iter().flatten() {
        put_str(&mut body, name);
        put_f64s(&mut body, &m.first);
        put_f64s(&mut body, &m.second);
    }

    let mut out = Vec::with_capacity(PREFIX + body.len() + DIGEST);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("body ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Format(format!("{what} length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len("array")?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too long".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Decodes a checkpoint. The checksum is verified before any field is parsed,
/// so a damaged file never yields a partial state.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = (PREFIX as u64).checked_add(body_len).and_then(|n| n.checked_add(DIGEST as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Checksum(format!(
            "file is {} bytes but header declares a {body_len}-byte body",
            bytes.len()
        )));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::Checksum("payload digest does not match".into()));
    }

    let mut r = Reader { buf: &content[PREFIX..], pos: 0 };
    let meta_text = r.string()?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len("dim")).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, r.f64s()?)?)?;
    }
    let mut moments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let first = r.f64s()?;
        let second = r.f64s()?;
        moments.insert(name, Moments { first, second });
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} trailing body bytes", r.buf.len() - r.pos)));
    }
    let optimizer = match meta.optimizer {
        Some(o) => Some(OptimizerState {
            config: o.config,
            schedule: LrSchedule::new(o.base_lr, o.warmup_steps, o.total_steps)?,
            step: o.step,
            moments,
        }),
        None if moments.is_empty() => None,
        None => return Err(Error::Format("moments stored without optimizer state".into())),
    };
    let state = ModelState { arch: meta.arch, params, stage: meta.stage, optimizer, step: meta.step };
    check_compatible(&state.params, &state.arch)?;
    Ok(Checkpoint { run: meta.run, state })
}

/// Fails with every name or shape that differs from what `arch` expects.
pub fn check_compatible(params: &ParamStore, arch: &Arch) -> Result<()> {
    let reference = crate::pretrain::init_params(arch, 0)?;
    let mut problems = Vec::new();
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => problems.push(format!("{name}: missing")),
            Some(p) if p.shape() != t.shape() => {
                problems.push(format!("{name}: have {:?}, need {:?}", p.shape(), t.shape()))
            }
            Some(_) => {}
        }
    }
    for name in params.names().filter(|n| !reference.contains(n)) {
        problems.push(format!("{name}: unexpected"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(problems))
    }
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a half-written checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires that it matches `arch` exactly.
pub fn load_for(path: &Path, arch: &Arch) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    check_compatible(&ckpt.state.params, arch)?;
    if &ckpt.state.arch != arch {
        return Err(Error::Mismatch(vec!["architecture description differs".into()]));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::tiny_config;

    fn sample() -> Checkpoint {
        let cfg = tiny_config(3);
        let arch = crate::pretrain::arch_for(&cfg, true);
        let mut state = ModelState::fresh(arch, 3).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), LrSchedule::new(1e-3, 1, 10).unwrap());
        let grads = state.params.iter().map(|(n, t)| (n.clone(), vec![0.5; t.numel()])).collect();
        opt.step(&mut state.params, &grads).unwrap();
        state.optimizer = Some(opt);
        state.step = 1;
        state.stage = Some(StageKind::SingleTime);
        let mut run = RunConfig::desk();
        run.seed = 3;
        Checkpoint { run, state }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = checkpoint_to_bytes(&sample());
        for pos in [PREFIX, PREFIX + 100, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Checksum(_))), "byte {pos}");
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = checkpoint_to_bytes(&sample());
        for cut in [PREFIX, bytes.len() / 3, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Checksum(_))));
        }
        assert!(matches!(checkpoint_from_bytes(&bytes[..5]), Err(Error::Format(_))));
    }

    #[test]
    fn other_version_is_refused() {
        let mut bytes = checkpoint_to_bytes(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn mismatched_arch_lists_problems() {
        let c = sample();
        let mut other = c.state.arch.clone();
        other.model.encoder.embed_dim = 16;
        other.model.decoder.dim = 16;
        match check_compatible(&c.state.params, &other) {
            Err(Error::Mismatch(list)) => assert!(list.iter().any(|p| p.starts_with("encoder.blocks.0"))),
            other => panic!("{other:?}"),
        }
    }
}
