//! Binary file formats: checkpoints, keyfiles, trigger sets and dataset
//! caches.
//!
//! Every file starts with a four-byte magic and a little-endian `u32`
//! format version. Integers are little-endian `u32`/`u64`, floats are
//! little-endian IEEE-754 `f64`, strings are a `u32` byte length followed by
//! UTF-8, and a tensor is a `u32` rank, `u64` dimensions, then its row-major
//! `f64` payload. Optional blocks are preceded by a `u8` flag.
//!
//! Checkpoint (`FWCK`): architecture descriptor string, `u64` seed, `u32`
//! record count, then per parameter `u32` layer index, role name string and
//! tensor, in key order.
//!
//! Keyfile (`FWKY`): architecture descriptor string, `u64` client id,
//! `u64` seed, optional feature block, optional trigger block. The feature
//! block holds `u32` bit count, mode and loss names, `f64` margin, one byte
//! per bit (1 for +1, 0 for -1), `u32` selector length with `(u32 layer,
//! role name)` entries, then a `u8` extractor kind: 0 with `u64`
//! coordinates, or 1 with a dense tensor.
//!
//! Trigger block, also the body of a trigger file (`FWTS`): `u32` classes,
//! provenance (`u8` 0 for pattern, or 1 with `f64` eps, `f64` lr and `u64`
//! iterations), samples tensor, `u64` count of `u32` targets, optional
//! sources tensor.
//!
//! Dataset cache (`FWDS`): `u32` classes, inputs tensor, `u64` count of
//! `u32` labels.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::data::{Dataset, Provenance, TriggerSet};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams, ParamKey, Role, Tensor};
use crate::watermark::{EmbedMode, ExtractionKey, Extractor, FeatureKey, RegLoss, SignatureBits, WatermarkKey};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
pub const KEYFILE_MAGIC: &[u8; 4] = b"FWKY";
pub const TRIGGER_MAGIC: &[u8; 4] = b"FWTS";
pub const DATASET_MAGIC: &[u8; 4] = b"FWDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn header(magic: &[u8; 4]) -> Self {
        let mut e = Self(magic.to_vec());
        e.u32(FORMAT_VERSION as usize);
        e
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&u32::try_from(v).expect("value fits u32").to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn key(&mut self, k: &ParamKey) {
        self.u32(k.layer);
        self.str(k.role.name());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return Err(Error::format(format!("not a {what} file (bad magic)")));
        }
        let mut d = Self { buf, pos: 4, what };
        let version = d.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::format(format!("unsupported {what} format version {version}")));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("truncated {} file", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(format!("length overflow in {} file", self.what)))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(format!("bad flag byte {b} in {} file", self.what))),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(format!("invalid UTF-8 in {} file", self.what)))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::format(format!("tensor larger than the {} file", self.what)))?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
    }

    fn key(&mut self) -> Result<ParamKey> {
        let layer = self.u32()?;
        let name = self.str()?;
        let role = Role::from_name(&name).ok_or_else(|| Error::format(format!("unknown parameter role {name:?}")))?;
        Ok(ParamKey::new(layer, role))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("trailing bytes in {} file", self.what)));
        }
        Ok(())
    }
}

/// Trained model plus the architecture and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub seed: u64,
    pub params: ModelParams,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut e = Encoder::header(CHECKPOINT_MAGIC);
    e.str(&c.arch.descriptor());
    e.u64(c.seed);
    e.u32(c.params.len());
    for (k, t) in c.params.iter() {
        e.key(k);
        e.tensor(t);
    }
    e.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut d = Decoder::open(buf, CHECKPOINT_MAGIC, "checkpoint")?;
    let arch = Architecture::parse_descriptor(&d.str()?)?;
    let seed = d.u64()?;
    let n = d.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..n {
        let k = d.key()?;
        let t = d.tensor()?;
        params.insert(k, t);
    }
    d.finish()?;
    // Rejects parameter sets that do not fit the declared architecture.
    crate::nn::Network::with_params(arch.clone(), params.clone())
        .map_err(|e| Error::format(format!("checkpoint parameters do not match its architecture: {e}")))?;
    Ok(Checkpoint { arch, seed, params })
}

fn encode_triggers(e: &mut Encoder, t: &TriggerSet, classes: usize) {
    e.u32(classes);
    match t.provenance() {
        Provenance::Pattern => e.u8(0),
        Provenance::Pgd { eps, lr, iters } => {
            e.u8(1);
            e.f64(eps);
            e.f64(lr);
            e.u64(iters as u64);
        }
    }
    e.tensor(t.samples());
    e.u64(t.len() as u64);
    for &y in t.targets() {
        e.u32(y);
    }
    match t.sources() {
        Some(s) => {
            e.u8(1);
            e.tensor(s);
        }
        None => e.u8(0),
    }
}

fn decode_triggers(d: &mut Decoder) -> Result<TriggerSet> {
    let classes = d.u32()?;
    let provenance = match d.u8()? {
        0 => Provenance::Pattern,
        1 => Provenance::Pgd {
            eps: d.f64()?,
            lr: d.f64()?,
            iters: d.len()?,
        },
        b => return Err(Error::format(format!("unknown trigger provenance {b}"))),
    };
    let samples = d.tensor()?;
    let n = d.len()?;
    if n > samples.rows() {
        return Err(Error::format("more trigger targets than samples"));
    }
    let targets = (0..n).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let sources = if d.flag()? { Some(d.tensor()?) } else { None };
    TriggerSet::new(samples, targets, classes, provenance, sources).map_err(|e| Error::format(e.to_string()))
}

pub fn encode_trigger_file(t: &TriggerSet, classes: usize) -> Vec<u8> {
    let mut e = Encoder::header(TRIGGER_MAGIC);
    encode_triggers(&mut e, t, classes);
    e.0
}

pub fn decode_trigger_file(buf: &[u8]) -> Result<TriggerSet> {
    let mut d = Decoder::open(buf, TRIGGER_MAGIC, "trigger set")?;
    let t = decode_triggers(&mut d)?;
    d.finish()?;
    Ok(t)
}

/// A client's secret key plus the architecture it was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyFile {
    pub arch: Architecture,
    pub key: WatermarkKey,
}

pub fn encode_keyfile(k: &KeyFile) -> Vec<u8> {
    let mut e = Encoder::header(KEYFILE_MAGIC);
    e.str(&k.arch.descriptor());
    e.u64(k.key.client_id as u64);
    e.u64(k.key.seed);
    match &k.key.feature {
        None => e.u8(0),
        Some(f) => {
            e.u8(1);
            e.u32(f.n_bits());
            e.str(f.mode.name());
            e.str(f.loss.name());
            e.f64(f.margin);
            for b in f.bits.to_binary() {
                e.u8(b);
            }
            e.u32(f.extraction.selector.len());
            for key in &f.extraction.selector {
                e.key(key);
            }
            match &f.extraction.extractor {
                Extractor::Coordinates(c) => {
                    e.u8(0);
                    for &i in c {
                        e.u64(i as u64);
                    }
                }
                Extractor::Dense(m) => {
                    e.u8(1);
                    e.tensor(m);
                }
            }
        }
    }
    match &k.key.triggers {
        None => e.u8(0),
        Some(t) => {
            e.u8(1);
            encode_triggers(&mut e, t, k.arch.classes());
        }
    }
    e.0
}

pub fn decode_keyfile(buf: &[u8]) -> Result<KeyFile> {
    let mut d = Decoder::open(buf, KEYFILE_MAGIC, "keyfile")?;
    let arch = Architecture::parse_descriptor(&d.str()?)?;
    let client_id = d.len()?;
    let seed = d.u64()?;
    let feature = if d.flag()? {
        let n = d.u32()?;
        let mode = d.str()?;
        let mode = EmbedMode::from_name(&mode).ok_or_else(|| Error::format(format!("unknown embed mode {mode:?}")))?;
        let loss = d.str()?;
        let loss = RegLoss::from_name(&loss).ok_or_else(|| Error::format(format!("unknown loss {loss:?}")))?;
        let margin = d.f64()?;
        let bits = SignatureBits::from_binary(d.take(n)?).map_err(|e| Error::format(e.to_string()))?;
        let s = d.u32()?;
        let selector = (0..s).map(|_| d.key()).collect::<Result<Vec<_>>>()?;
        let extractor = match d.u8()? {
            0 => Extractor::Coordinates((0..n).map(|_| d.len()).collect::<Result<_>>()?),
            1 => Extractor::Dense(d.tensor()?),
            b => return Err(Error::format(format!("unknown extractor kind {b}"))),
        };
        let extraction = ExtractionKey::new(selector, extractor).map_err(|e| Error::format(e.to_string()))?;
        Some(FeatureKey::new(bits, extraction, mode, loss, margin).map_err(|e| Error::format(e.to_string()))?)
    } else {
        None
    };
    let triggers = if d.flag()? {
        Some(decode_triggers(&mut d)?)
    } else {
        None
    };
    d.finish()?;
    Ok(KeyFile {
        arch,
        key: WatermarkKey {
            client_id,
            seed,
            feature,
            triggers,
        },
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut e = Encoder::header(DATASET_MAGIC);
    e.u32(ds.classes());
    e.tensor(ds.inputs());
    e.u64(ds.len() as u64);
    for &y in ds.labels() {
        e.u32(y);
    }
    e.0
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut d = Decoder::open(buf, DATASET_MAGIC, "dataset")?;
    let classes = d.u32()?;
    let inputs = d.tensor()?;
    let n = d.len()?;
    if n > inputs.rows() {
        return Err(Error::format("more labels than samples"));
    }
    let labels = (0..n).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Dataset::new(inputs, labels, classes).map_err(|e| Error::format(e.to_string()))
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(c))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Writes a keyfile readable by the owner only (mode 0600 on Unix).
pub fn write_keyfile(path: &Path, k: &KeyFile) -> Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f: File = opts.open(path)?;
    #[cfg(unix)]
    {
        // An existing file keeps its old mode through open; tighten it.
        use std::os::unix::fs::PermissionsExt;
        f.set_permissions(fs::Permissions::from_mode(0o600))?;
    }
    f.write_all(&encode_keyfile(k))?;
    Ok(())
}

pub fn read_keyfile(path: &Path) -> Result<KeyFile> {
    decode_keyfile(&fs::read(path)?)
}

pub fn write_trigger_file(path: &Path, t: &TriggerSet, classes: usize) -> Result<()> {
    Ok(fs::write(path, encode_trigger_file(t, classes))?)
}

pub fn read_trigger_file(path: &Path) -> Result<TriggerSet> {
    decode_trigger_file(&fs::read(path)?)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_dataset(ds))?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
