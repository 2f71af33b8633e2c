//! Versioned binary checkpoints for encoders and flows.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SEDKCKPT"            8 bytes
//! version u32
//! kind    u8                   1 = encoder, 2 = flow
//! sections, each: tag [u8; 4], length u64, payload
//! sha256 of everything above   32 bytes
//! ```
//!
//! The byte layout of each section is described in `docs/checkpoint-format.md`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::encoder::{EncoderConfig, EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::flow::CouplingFlow;

pub const MAGIC: &[u8; 8] = b"SEDKCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 1;

const KIND_ENCODER: u8 = 1;
const KIND_FLOW: u8 = 2;

/// Anything that can be stored in a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Encoder(EncoderModel),
    Flow(CouplingFlow),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Encoder(_) => "encoder",
            Artifact::Flow(_) => "flow",
        }
    }

    pub fn into_encoder(self) -> Result<EncoderModel> {
        match self {
            Artifact::Encoder(m) => Ok(m),
            other => Err(Error::invalid(format!("expected an encoder checkpoint, found a {}", other.kind()))),
        }
    }

    pub fn into_flow(self) -> Result<CouplingFlow> {
        match self {
            Artifact::Flow(f) => Ok(f),
            other => Err(Error::invalid(format!("expected a flow checkpoint, found a {}", other.kind()))),
        }
    }
}

impl From<EncoderModel> for Artifact {
    fn from(m: EncoderModel) -> Self {
        Artifact::Encoder(m)
    }
}

impl From<CouplingFlow> for Artifact {
    fn from(f: CouplingFlow) -> Self {
        Artifact::Flow(f)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

fn params_payload(params: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, params.len() as u32);
    for t in params {
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

/// Serializes an artifact. Equal artifacts always produce equal bytes.
pub fn to_bytes(artifact: &Artifact) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    match artifact {
        Artifact::Encoder(m) => {
            out.push(KIND_ENCODER);
            let c = m.config();
            let mut arch = Vec::new();
            for v in [c.layers, c.hidden, c.heads, c.ffn, c.max_len] {
                put_u64(&mut arch, v as u64);
            }
            put_section(&mut out, b"ARCH", &arch);
            let mut vocab = Vec::new();
            put_u32(&mut vocab, m.vocab().size() as u32);
            for tok in m.vocab().tokens() {
                put_u32(&mut vocab, tok.len() as u32);
                vocab.extend_from_slice(tok.as_bytes());
            }
            put_section(&mut out, b"VOCB", &vocab);
            put_section(&mut out, b"PARM", &params_payload(m.params()));
        }
        Artifact::Flow(f) => {
            out.push(KIND_FLOW);
            let mut meta = Vec::new();
            for v in [f.dim(), f.layers(), f.hidden()] {
                put_u64(&mut meta, v as u64);
            }
            put_section(&mut out, b"FLOW", &meta);
            put_section(&mut out, b"PARM", &params_payload(f.params()));
        }
    }
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("unexpected end of data at byte {}", self.pos)))?;
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CheckpointCorrupt("size overflows usize".into()))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let found = self.take(4)?;
        if found != tag {
            return Err(Error::CheckpointCorrupt(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.usize()?;
        Ok(Reader {
            buf: self.take(len)?,
            pos: 0,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_params(r: &mut Reader<'_>) -> Result<Vec<Tensor>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CheckpointCorrupt("tensor size overflows".into()))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::CheckpointCorrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        out.push(Tensor::new(shape, data).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

/// Parses checkpoint bytes. The checksum is verified before anything else is read.
pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::CheckpointChecksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointChecksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let kind = r.take(1)?[0];
    let artifact = match kind {
        KIND_ENCODER => {
            let mut arch = r.section(b"ARCH")?;
            let config = EncoderConfig {
                layers: arch.usize()?,
                hidden: arch.usize()?,
                heads: arch.usize()?,
                ffn: arch.usize()?,
                max_len: arch.usize()?,
            };
            arch.finish()?;
            let mut v = r.section(b"VOCB")?;
            let n = v.u32()? as usize;
            let mut tokens = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let len = v.u32()? as usize;
                let s = std::str::from_utf8(v.take(len)?)
                    .map_err(|_| Error::CheckpointCorrupt("vocabulary token is not UTF-8".into()))?;
                tokens.push(s.to_string());
            }
            v.finish()?;
            let vocab = Vocabulary::from_id_order(tokens).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
            let params = read_params(&mut r.section(b"PARM")?)?;
            Artifact::Encoder(
                EncoderModel::from_parts(config, vocab, params).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?,
            )
        }
        KIND_FLOW => {
            let mut meta = r.section(b"FLOW")?;
            let (dim, layers, hidden) = (meta.usize()?, meta.usize()?, meta.usize()?);
            meta.finish()?;
            let params = read_params(&mut r.section(b"PARM")?)?;
            Artifact::Flow(
                CouplingFlow::from_parts(dim, layers, hidden, params).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?,
            )
        }
        other => return Err(Error::CheckpointCorrupt(format!("unknown artifact kind {other}"))),
    };
    r.finish()?;
    Ok(artifact)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the checkpoint through a temporary file and returns the hash of its bytes.
pub fn save_checkpoint(artifact: &Artifact, path: &Path) -> Result<String> {
    let bytes = to_bytes(artifact);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    from_bytes(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

pub fn load_encoder(path: &Path) -> Result<EncoderModel> {
    load_checkpoint(path)?.into_encoder().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

pub fn load_flow(path: &Path) -> Result<CouplingFlow> {
    load_checkpoint(path)?.into_flow().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> EncoderModel {
        let vocab = Vocabulary::build(&["a small test corpus", "with two lines"], 1, None);
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn: 8,
            max_len: 6,
        };
        EncoderModel::init(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn encoder_round_trip_is_bit_exact() {
        let m = encoder();
        let bytes = to_bytes(&m.clone().into());
        let back = from_bytes(&bytes).unwrap().into_encoder().unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back.into()), bytes);
    }

    #[test]
    fn flow_round_trip() {
        let f = CouplingFlow::random(4, 2, 6, 1, 0.3).unwrap();
        let bytes = to_bytes(&f.clone().into());
        assert_eq!(from_bytes(&bytes).unwrap().into_flow().unwrap(), f);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = to_bytes(&encoder().into());
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::CheckpointChecksum)));
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = to_bytes(&encoder().into());
        bytes[40] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::CheckpointChecksum)));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = to_bytes(&encoder().into());
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, supported: 1 })
        ));
    }
}
