//! Binary checkpoints: little-endian, versioned, signature first.
//!
//! Layout: magic, version (u32), signature (n, D_O, E, |A|, N as u64, then
//! input channels, hidden width, domain name, shared-value flag and the
//! class, decoder and value-net instance lists), RMSProp hyperparameters,
//! the training config text, then named records `(name, rank, dims, reals)`.
//! RMSProp accumulators are records named `<param>#rms`.

use std::fs;
use std::path::Path;

use torpido_core::domain::DomainKind;
use torpido_core::networks::{Dims, ModelBundle, NetworkError, Signature};
use torpido_core::numerics::{RmsProp, Tensor};
use torpido_core::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TORPIDO\0";
pub const VERSION: u32 = 1;
const ACCUM_SUFFIX: &str = "#rms";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Signature(#[from] NetworkError),
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
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn list(&mut self, items: &[String]) {
        self.u32(items.len() as u32);
        for s in items {
            self.str(s);
        }
    }
    fn record(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("size {v} too large")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid utf-8 string".into()))
    }
    fn list(&mut self) -> Result<Vec<String>, CheckpointError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.str()).collect()
    }
    fn record(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("`{name}`: rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (self.buf.len() - self.pos) / 8)
            .ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Serializes a bundle with the config it was trained under.
pub fn encode_bundle(bundle: &ModelBundle, config: &TrainConfig) -> Vec<u8> {
    let sig = bundle.signature();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let d = sig.dims;
    for v in [d.num_vars, d.node_embed, d.embed, d.num_actions, d.num_classes] {
        w.u64(v as u64);
    }
    w.u64(d.input_channels as u64);
    w.u64(d.hidden as u64);
    w.str(sig.domain.name());
    w.u8(sig.share_value_encoder as u8);
    w.list(&sig.classes);
    w.list(&sig.decoders);
    w.list(&sig.values);
    w.f64(bundle.optimizer.learning_rate);
    w.f64(bundle.optimizer.decay);
    w.f64(bundle.optimizer.epsilon);
    w.str(&config.to_text());
    let entries: Vec<_> = bundle.entries().collect();
    w.u64(2 * entries.len() as u64);
    for (name, value, accum) in entries {
        w.record(name, value);
        w.record(&format!("{name}{ACCUM_SUFFIX}"), accum);
    }
    w.0
}

/// Inverse of [`encode_bundle`]; never returns a partially filled bundle.
pub fn decode_bundle(bytes: &[u8]) -> Result<(ModelBundle, TrainConfig), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let num_vars = r.usize()?;
    let node_embed = r.usize()?;
    let embed = r.usize()?;
    let num_actions = r.usize()?;
    let num_classes = r.usize()?;
    let input_channels = r.usize()?;
    let hidden = r.usize()?;
    let domain = DomainKind::from_name(&r.str()?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let share_value_encoder = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Corrupt(format!("flag byte {b}"))),
    };
    let sig = Signature {
        domain,
        dims: Dims {
            num_vars,
            input_channels,
            node_embed,
            embed,
            hidden,
            num_actions,
            num_classes,
        },
        share_value_encoder,
        classes: r.list()?,
        decoders: r.list()?,
        values: r.list()?,
    };
    if node_embed != torpido_core::networks::GCN_WIDTHS[1] {
        return Err(CheckpointError::Corrupt(format!("node embedding width {node_embed}")));
    }
    let optimizer = RmsProp {
        learning_rate: r.f64()?,
        decay: r.f64()?,
        epsilon: r.f64()?,
    };
    let config = TrainConfig::parse(&r.str()?).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let mut bundle = ModelBundle::from_signature(&sig, optimizer);
    let count = r.usize()?;
    if count != 2 * bundle.num_params() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} records, layout needs {}",
            2 * bundle.num_params()
        )));
    }
    let mut values = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        if values.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("record `{name}` repeated")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let names: Vec<String> = bundle.entries().map(|(n, _, _)| n.to_string()).collect();
    for name in names {
        let value = values
            .remove(&name)
            .ok_or_else(|| NetworkError::MissingParam(name.clone()))?;
        let accum = values
            .remove(&format!("{name}{ACCUM_SUFFIX}"))
            .ok_or_else(|| NetworkError::MissingParam(format!("{name}{ACCUM_SUFFIX}")))?;
        bundle.set_entry(&name, value, accum)?;
    }
    Ok((bundle, config))
}

pub fn save_bundle(bundle: &ModelBundle, config: &TrainConfig, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_bundle(bundle, config)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_bundle(path: &Path) -> Result<(ModelBundle, TrainConfig), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_bundle(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use torpido_core::domain::generate_instances;
    use torpido_core::training::new_bundle;

    fn bundle() -> (ModelBundle, TrainConfig) {
        let sources = generate_instances(DomainKind::SysAdmin, 4, 3, 1).unwrap();
        let cfg = TrainConfig::default();
        (new_bundle(&sources, &cfg).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (b, cfg) = bundle();
        let (back, cfg2) = decode_bundle(&encode_bundle(&b, &cfg)).unwrap();
        assert_eq!(back, b);
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn every_truncation_fails() {
        let (b, cfg) = bundle();
        let bytes = encode_bundle(&b, &cfg);
        for cut in (0..bytes.len()).step_by(97) {
            assert!(decode_bundle(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let (b, cfg) = bundle();
        let mut bytes = encode_bundle(&b, &cfg);
        bytes[8] = 9;
        assert!(matches!(decode_bundle(&bytes), Err(CheckpointError::Version { found: 9 })));
        bytes[0] = b'X';
        assert!(matches!(decode_bundle(&bytes), Err(CheckpointError::BadMagic)));
    }
}
