//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "PCN1"
//! u32    format version (currently 1)
//! u32    config length, then that many bytes of UTF-8 `key = value` text
//! u64    completed epochs
//! 3 x    RNG stream state (sampler, augment, pairing): 32-byte seed + u128 word position
//! 6 x    f64 channel statistics (mean rgb, std rgb)
//! u32    tensor count, then per tensor:
//!        u32 name length + bytes, u8 dtype tag, u32 rank, rank x u64 extents,
//!        raw little-endian payload
//! u32    CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Tensors hold every model parameter by name plus a `velocity.<name>` twin.
//! A load verifies magic, version and checksum before touching any state, so
//! a truncated or corrupted file never yields a partial model.

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngState;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCN1";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    push_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    push_bytes(out, name.as_bytes());
    out.push(T::DTYPE.tag());
    push_u32(out, tensor.shape().len() as u32);
    for &e in tensor.shape() {
        push_u64(out, e as u64);
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
}

fn push_rng(out: &mut Vec<u8>, state: &RngState) {
    out.extend_from_slice(&state.seed);
    out.extend_from_slice(&state.word_pos.to_le_bytes());
}

/// Serializes the complete training state.
pub fn encode<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_bytes(&mut out, state.config.to_text().as_bytes());
    push_u64(&mut out, state.epoch as u64);
    push_rng(&mut out, &RngState::capture(&state.streams.sampler));
    push_rng(&mut out, &RngState::capture(&state.streams.augment));
    push_rng(&mut out, &RngState::capture(&state.streams.pairing));
    for m in state.stats.mean {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for s in state.stats.std {
        out.extend_from_slice(&s.to_le_bytes());
    }

    let params = state.model.parameters();
    push_u32(&mut out, (2 * params.len()) as u32);
    for (name, tensor) in &params {
        push_tensor(&mut out, name, tensor);
    }
    for ((name, _), velocity) in params.iter().zip(&state.velocity) {
        push_tensor(&mut out, &format!("velocity.{}", name), velocity);
    }

    let crc = crc32fast::hash(&out);
    push_u32(&mut out, crc);
    out
}

pub fn save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(
                "checkpoint ends unexpectedly mid-record".into(),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rng(&mut self) -> Result<RngState> {
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().unwrap());
        Ok(RngState { seed, word_pos })
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("checkpoint holds invalid UTF-8".into()))
    }
}

fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint file is too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch (stored {:08x}, computed {:08x}); file is truncated or corrupted",
            stored, computed
        )));
    }
    Ok(body)
}

/// Reads only the config text and epoch counter (checksum-verified); used to
/// pick the load precision before deserializing tensors.
pub fn peek(path: &Path) -> Result<(TrainConfig, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let body = verified_body(&bytes)?;
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let config = TrainConfig::from_text(&r.string()?)?;
    let epoch = r.u64()? as usize;
    Ok((config, epoch))
}

/// Loads a full training state; `num_classes` must match the dataset the
/// state will run against.
pub fn load<T: Scalar>(path: &Path, num_classes: usize) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let body = verified_body(&bytes)?;
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let config = TrainConfig::from_text(&r.string()?)?;
    if config.precision != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint precision is {}, loader expects {}",
            config.precision,
            T::DTYPE
        )));
    }
    let epoch = r.u64()? as usize;
    let sampler = r.rng()?;
    let augment = r.rng()?;
    let pairing = r.rng()?;
    let mut stats = crate::data::ChannelStats::identity();
    for c in 0..3 {
        stats.mean[c] = r.f64()?;
    }
    for c in 0..3 {
        stats.std[c] = r.f64()?;
    }

    let count = r.u32()? as usize;
    let mut table: std::collections::BTreeMap<String, Tensor<T>> = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.take(1)?[0];
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag)))?;
        if dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "tensor '{}' stored as {}, loader expects {}",
                name,
                dtype,
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * T::DTYPE.size())?;
        let data: Vec<T> = payload
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        table.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let mut model = Model::<T>::zeros(config.model_config(num_classes))?;
    let mut velocity = Vec::new();
    for (name, param) in model.parameters_mut() {
        let stored = table.remove(&name).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing tensor '{}'", name))
        })?;
        if stored.shape() != param.shape() {
            return Err(Error::Config(format!(
                "tensor '{}' has shape {:?} in the checkpoint but the model expects {:?} \
                 (class count mismatch?)",
                name,
                stored.shape(),
                param.shape()
            )));
        }
        *param = stored.with_grad();
        let vel_name = format!("velocity.{}", name);
        let vel = table
            .remove(&vel_name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{}'", vel_name)))?;
        velocity.push(vel);
    }
    if !table.is_empty() {
        let extra: Vec<String> = table.keys().cloned().collect();
        return Err(Error::Format(format!(
            "checkpoint holds unexpected tensors: {}",
            extra.join(", ")
        )));
    }

    Ok(TrainState {
        config,
        model,
        velocity,
        epoch,
        streams: super::Streams {
            sampler: sampler.restore(),
            augment: augment.restore(),
            pairing: pairing.restore(),
        },
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;
    use crate::training::{train, TrainConfig, TrainState};
    use tempfile::tempdir;

    fn small_state() -> (TrainState<f64>, crate::data::Dataset, crate::data::Dataset) {
        let ds = generate_synthetic(4, 6, (16, 16), 5).unwrap();
        let (train_set, test_set) = crate::data::split(&ds, 0.5, 5).unwrap();
        let mut config = TrainConfig::default();
        config.precision = crate::scalar::Dtype::F64;
        config.seed = 21;
        config.epochs = 2;
        config.classes_per_batch = 4;
        config.images_per_class = 2;
        config.input_hw = (16, 16);
        config.stage_channels = vec![4];
        config.iters_per_epoch = 1;
        let state = TrainState::new(config, &train_set).unwrap();
        (state, train_set, test_set)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (mut state, train_set, test_set) = small_state();
        train(&mut state, &train_set, &test_set, None).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save(&state, &path).unwrap();
        let loaded: TrainState<f64> = load(&path, 4).unwrap();

        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.config, state.config);
        assert_eq!(loaded.stats, state.stats);
        for ((an, a), (bn, b)) in state
            .model
            .parameters()
            .iter()
            .zip(loaded.model.parameters().iter())
        {
            assert_eq!(an, bn);
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in state.velocity.iter().zip(&loaded.velocity) {
            assert_eq!(a.data(), b.data());
        }
        // The serialized form of the reloaded state is identical too.
        assert_eq!(encode(&state), encode(&loaded));
    }

    #[test]
    fn truncation_is_detected_without_partial_state() {
        let (state, _, _) = small_state();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load::<f64>(&path, 4).err().expect("load must fail");
        assert!(
            err.to_string().contains("checksum") || err.to_string().contains("short"),
            "error was: {}",
            err
        );
    }

    #[test]
    fn corruption_is_detected() {
        let (state, _, _) = small_state();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load::<f64>(&path, 4).is_err());
    }

    #[test]
    fn wrong_class_count_is_a_config_error() {
        let (state, _, _) = small_state();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save(&state, &path).unwrap();
        let err = load::<f64>(&path, 7).err().expect("load must fail");
        assert!(matches!(err, Error::Config(_)), "error was: {}", err);
    }

    #[test]
    fn wrong_precision_is_a_config_error() {
        let (state, _, _) = small_state();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save(&state, &path).unwrap();
        assert!(load::<f32>(&path, 4).is_err());
    }

    #[test]
    fn resume_matches_straight_through() {
        // Train 2 epochs in one go vs. 1 epoch, checkpoint, resume 1 more.
        let (mut straight, train_set, test_set) = small_state();
        let rows_straight = train(&mut straight, &train_set, &test_set, None).unwrap();

        let (mut first, _, _) = small_state();
        first.config.epochs = 1;
        let rows_first = train(&mut first, &train_set, &test_set, None).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save(&first, &path).unwrap();

        let mut resumed: TrainState<f64> = load(&path, 4).unwrap();
        resumed.config.epochs = 2;
        let rows_resumed = train(&mut resumed, &train_set, &test_set, None).unwrap();

        assert_eq!(rows_first[0], rows_straight[0]);
        assert_eq!(rows_resumed[0], rows_straight[1]);
        for ((_, a), (_, b)) in straight
            .model
            .parameters()
            .iter()
            .zip(resumed.model.parameters().iter())
        {
            assert_eq!(a.data(), b.data());
        }
    }
}
