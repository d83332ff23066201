//! `FBPT` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FBPT" | version u16 | architecture hash [32] | entry count u32
//! entry*: id length u16 | id utf-8 | kind u8 | encoding u8
//!         | rows u32 | cols u32 | payload length u64 | payload
//! CRC32 of every byte between the header and the checksum
//! ```
//!
//! `PACKED_BITS` payloads are the row-major 64-bit words of a [`BitMatrix`];
//! `FP32` payloads are `rows * cols` floats. The header is magic, version
//! and hash; the entry count opens the checksummed region.
//!
//! A training checkpoint stores every parameter as `FP32`. A frozen file
//! stores the binarized layers as sign bits plus per-channel `alpha`, the
//! remaining parameters as `FP32`, and the fitted values of every static
//! quantizer. Metadata travels as the entries `meta.flags` and
//! `meta.frozen`.

use std::path::Path;

use fbpt_core::binmodules::model::{BinFlags, Model};
use fbpt_core::bittensor::{BitMatrix, Encoding};
use fbpt_core::quantize::FineParams;
use fbpt_core::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FBPT";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 32;

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("not a weight file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("file is {0} bytes, too short for a header and checksum")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("architecture hash mismatch: file {file}, config {config}")]
    ArchMismatch { file: String, config: String },
    #[error("malformed entry table: {0}")]
    Malformed(String),
    #[error("checkpoint holds shadow weights only; a frozen file is required")]
    NotFrozen,
    #[error(transparent)]
    Model(#[from] fbpt_core::Error),
    #[error("{0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, WeightError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    PackedBits(BitMatrix),
    Fp32 { rows: usize, cols: usize, data: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub payload: Payload,
}

impl Entry {
    pub fn fp32(id: impl Into<String>, rows: usize, cols: usize, values: &[f64]) -> Self {
        Self {
            id: id.into(),
            payload: Payload::Fp32 {
                rows,
                cols,
                data: values.iter().map(|&v| v as f32).collect(),
            },
        }
    }

    fn tensor(id: impl Into<String>, t: &Tensor) -> Self {
        Self::fp32(id, t.rows(), t.cols(), t.data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub arch_hash: [u8; 32],
    pub entries: Vec<Entry>,
}

fn hex(h: &[u8]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| WeightError::Malformed(format!("entry runs past the end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

const KIND_BITS: u8 = 0;
const KIND_FP32: u8 = 1;

fn encoding_byte(e: Encoding) -> u8 {
    match e {
        Encoding::Signed => 0,
        Encoding::Unsigned => 1,
    }
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            match &e.payload {
                Payload::PackedBits(m) => {
                    out.extend_from_slice(&[KIND_BITS, encoding_byte(m.encoding())]);
                    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                    out.extend_from_slice(&(m.words().len() as u64 * 8).to_le_bytes());
                    for w in m.words() {
                        out.extend_from_slice(&w.to_le_bytes());
                    }
                }
                Payload::Fp32 { rows, cols, data } => {
                    out.extend_from_slice(&[KIND_FP32, 0]);
                    out.extend_from_slice(&(*rows as u32).to_le_bytes());
                    out.extend_from_slice(&(*cols as u32).to_le_bytes());
                    out.extend_from_slice(&(data.len() as u64 * 4).to_le_bytes());
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out[HEADER..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            let mut m = [0u8; 4];
            m[..buf.len().min(4)].copy_from_slice(&buf[..buf.len().min(4)]);
            return Err(WeightError::BadMagic(m));
        }
        if buf.len() < HEADER + 4 + 4 {
            return Err(WeightError::Truncated(buf.len()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(WeightError::Version(version));
        }
        let body = &buf[HEADER..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(WeightError::Checksum { stored, computed });
        }
        let arch_hash: [u8; 32] = buf[6..HEADER].try_into().expect("32 bytes");
        let mut r = Reader { buf: body, pos: 0 };
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(n)?)
                .map_err(|_| WeightError::Malformed("entry id is not utf-8".into()))?
                .to_string();
            let kind = r.u8()?;
            let enc = r.u8()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = r.u64()?;
            let len = usize::try_from(len).map_err(|_| WeightError::Malformed(format!("`{id}`: payload length {len}")))?;
            let bytes = r.take(len)?;
            let payload = match kind {
                KIND_BITS => {
                    let encoding = match enc {
                        0 => Encoding::Signed,
                        1 => Encoding::Unsigned,
                        e => return Err(WeightError::Malformed(format!("`{id}`: encoding byte {e}"))),
                    };
                    let words = bytes
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    if len % 8 != 0 {
                        return Err(WeightError::Malformed(format!("`{id}`: {len} payload bytes is not whole words")));
                    }
                    Payload::PackedBits(
                        BitMatrix::from_words(rows, cols, encoding, words)
                            .map_err(|e| WeightError::Malformed(format!("`{id}`: {e}")))?,
                    )
                }
                KIND_FP32 => {
                    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(len) {
                        return Err(WeightError::Malformed(format!("`{id}`: {rows} x {cols} floats in {len} bytes")));
                    }
                    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Payload::Fp32 { rows, cols, data }
                }
                k => return Err(WeightError::Malformed(format!("`{id}`: unknown kind {k}"))),
            };
            entries.push(Entry { id, payload });
        }
        if r.pos != body.len() {
            return Err(WeightError::Malformed(format!("{} trailing bytes after the entry table", body.len() - r.pos)));
        }
        Ok(Self { arch_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| WeightError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| WeightError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, id: &str) -> Option<&Payload> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.payload)
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.get("meta.frozen"), Some(Payload::Fp32 { data, .. }) if data == &[1.0])
    }

    /// Training checkpoint (`frozen == false`) or frozen inference file.
    pub fn from_model(model: &Model, frozen: bool) -> Self {
        let mut entries = vec![
            Entry::fp32("meta.flags", 1, 4, &model.flags.to_vec()),
            Entry::fp32("meta.frozen", 1, 1, &[if frozen { 1.0 } else { 0.0 }]),
        ];
        let packed = |name: &str| -> Option<String> {
            let layer = name.strip_suffix(".weight")?;
            let bin_w = model.flags.for_layer(model.group_of(layer)).0;
            (frozen && bin_w && model.binary.contains_key(layer)).then(|| layer.to_string())
        };
        for (name, t) in model.params.iter() {
            match packed(name) {
                Some(layer) => {
                    let l = &model.binary[&layer];
                    entries.push(Entry {
                        id: name.to_string(),
                        payload: Payload::PackedBits(l.weight_bits.clone()),
                    });
                    entries.push(Entry::fp32(format!("{layer}.alpha"), l.out_dim(), 1, &l.alpha.values));
                }
                None => entries.push(Entry::tensor(name, t)),
            }
        }
        for id in &model.calibrated {
            let s = &model.specs[id];
            entries.push(Entry::fp32(format!("{id}.static.shift"), 1, s.shift.len(), &s.shift));
            entries.push(Entry::fp32(format!("{id}.static.scale"), 1, s.scale.len(), &s.scale));
            if let Some(f) = &s.fine {
                for (part, rows) in [("points", &f.points), ("shifts", &f.shifts), ("scales", &f.scales)] {
                    let cols = rows.first().map_or(0, Vec::len);
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    entries.push(Entry::fp32(format!("{id}.fine.{part}"), rows.len(), cols, &flat));
                }
            }
        }
        Self {
            arch_hash: model.arch_hash(),
            entries,
        }
    }

    /// Restore into `model`, a freshly constructed model of the same
    /// architecture. Every parameter must be present exactly once.
    pub fn apply(&self, mut model: Model) -> Result<Model> {
        if self.arch_hash != model.arch_hash() {
            return Err(WeightError::ArchMismatch {
                file: hex(&self.arch_hash),
                config: hex(&model.arch_hash()),
            });
        }
        let bad = |m: String| WeightError::Malformed(m);
        let fp = |id: &str| -> Result<(usize, usize, Vec<f64>)> {
            match self.get(id) {
                Some(Payload::Fp32 { rows, cols, data }) => Ok((*rows, *cols, data.iter().map(|&v| f64::from(v)).collect())),
                Some(_) => Err(bad(format!("`{id}` should be FP32"))),
                None => Err(bad(format!("missing entry `{id}`"))),
            }
        };
        let (_, _, flags) = fp("meta.flags")?;
        model.flags = BinFlags::from_slice(&flags)?;
        let (_, _, frozen) = fp("meta.frozen")?;
        let frozen = frozen == [1.0];

        let mut seen = std::collections::BTreeSet::from(["meta.flags".to_string(), "meta.frozen".to_string()]);
        let mut packed = Vec::new();
        for id in 0..model.params.len() {
            let name = model.params.name(id).to_string();
            let want = model.params.value(id).shape();
            match self.get(&name) {
                Some(Payload::Fp32 { rows, cols, data }) => {
                    if (*rows, *cols) != want {
                        return Err(bad(format!("`{name}` is {rows} x {cols}, expected {} x {}", want.0, want.1)));
                    }
                    *model.params.value_mut(id) = Tensor::new(*rows, *cols, data.iter().map(|&v| f64::from(v)).collect());
                }
                Some(Payload::PackedBits(bits)) => {
                    let layer = name.strip_suffix(".weight").ok_or_else(|| bad(format!("`{name}` cannot be packed")))?;
                    if (bits.rows(), bits.cols()) != want || bits.encoding() != Encoding::Signed {
                        return Err(bad(format!("`{name}` packed shape or encoding does not match")));
                    }
                    let alpha_id = format!("{layer}.alpha");
                    let (r, c, alpha) = fp(&alpha_id)?;
                    if (r, c) != (want.0, 1) {
                        return Err(bad(format!("`{alpha_id}` is {r} x {c}, expected {} x 1", want.0)));
                    }
                    seen.insert(alpha_id);
                    packed.push((layer.to_string(), bits.clone(), alpha));
                }
                None => return Err(bad(format!("missing entry `{name}`"))),
            }
            seen.insert(name);
        }

        model.calibrated.clear();
        let static_ids: Vec<String> = self
            .entries
            .iter()
            .filter_map(|e| e.id.strip_suffix(".static.shift").map(str::to_string))
            .collect();
        for id in static_ids {
            let spec = model
                .specs
                .get_mut(&id)
                .ok_or_else(|| bad(format!("static values for unknown tensor `{id}`")))?;
            spec.shift = fp(&format!("{id}.static.shift"))?.2;
            spec.scale = fp(&format!("{id}.static.scale"))?.2;
            seen.insert(format!("{id}.static.shift"));
            seen.insert(format!("{id}.static.scale"));
            if self.get(&format!("{id}.fine.points")).is_some() {
                let mut parts = Vec::new();
                for part in ["points", "shifts", "scales"] {
                    let key = format!("{id}.fine.{part}");
                    let (rows, cols, flat) = fp(&key)?;
                    parts.push((0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect::<Vec<_>>());
                    seen.insert(key);
                }
                let scales = parts.pop().expect("three parts");
                let shifts = parts.pop().expect("three parts");
                let points = parts.pop().expect("three parts");
                spec.fine = Some(FineParams { points, shifts, scales });
            }
            model.calibrated.insert(id);
        }
        if let Some(extra) = self.entries.iter().find(|e| !seen.contains(&e.id)) {
            return Err(bad(format!("unexpected entry `{}`", extra.id)));
        }

        model.sync_packed()?;
        for (layer, bits, alpha) in packed {
            let l = model.binary.get_mut(&layer).ok_or_else(|| bad(format!("`{layer}` is not a binary layer")))?;
            let cols = bits.cols() as i64;
            l.row_sums = (0..bits.rows()).map(|r| 2 * bits.row_plane(r).popcount() as i64 - cols).collect();
            l.alpha.values = alpha;
            l.weight_bits = bits;
            let w = l.reconstruct_weight();
            model.params.insert(format!("{layer}.weight"), w);
        }
        model.frozen = frozen;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        assert!(matches!(WeightFile::from_bytes(b"NOPE0000"), Err(WeightError::BadMagic(_))));
        assert!(matches!(WeightFile::from_bytes(b"FBPT"), Err(WeightError::Truncated(4))));
        let f = WeightFile {
            arch_hash: [7; 32],
            entries: vec![Entry::fp32("a", 1, 2, &[1.0, -2.5])],
        };
        let mut b = f.to_bytes();
        assert_eq!(WeightFile::from_bytes(&b).unwrap(), f);
        b[4] = 9;
        assert_eq!(WeightFile::from_bytes(&b), Err(WeightError::Version(9)));
    }

    #[test]
    fn any_flipped_payload_byte_fails_checksum() {
        let f = WeightFile {
            arch_hash: [1; 32],
            entries: vec![
                Entry::fp32("x", 2, 1, &[0.5, 3.0]),
                Entry {
                    id: "b".into(),
                    payload: Payload::PackedBits(BitMatrix::from_fn(3, 70, Encoding::Signed, |r, c| (r + c) % 3 == 0)),
                },
            ],
        };
        let b = f.to_bytes();
        for i in HEADER..b.len() {
            let mut c = b.clone();
            c[i] ^= 0x10;
            assert!(matches!(WeightFile::from_bytes(&c), Err(WeightError::Checksum { .. })), "byte {i}");
        }
    }
}
