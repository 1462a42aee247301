//! The ELVT container: a fixed little-endian layout closed by a CRC32.
//!
//! ```text
//! "ELVT" | version u16 | image_base u64 | entry u64 | hostcall_base u64
//! | image_len u32 | image bytes
//! | table_len u32 | table entries i64
//! | code_len u32  | code (opcode u8, rd u8, rn u8, rm u8, imm u64)
//! | crc32 u32 over everything before it
//! ```

use std::sync::Arc;

use thiserror::Error;

use super::{Opcode, TargetInstruction};
use crate::translate::TranslatedImage;

pub const MAGIC: &[u8; 4] = b"ELVT";
pub const VERSION: u16 = 1;
const INSN_BYTES: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u16),
    #[error("container truncated")]
    TruncatedContainer,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

pub fn serialize(image: &TranslatedImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        40 + image.source_image.len() + 8 * image.table.len() + INSN_BYTES * image.target_code.len(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&image.image_base.to_le_bytes());
    out.extend_from_slice(&(image.entry as u64).to_le_bytes());
    out.extend_from_slice(&image.hostcall_base.to_le_bytes());
    out.extend_from_slice(&(image.source_image.len() as u32).to_le_bytes());
    out.extend_from_slice(&image.source_image);
    out.extend_from_slice(&(image.table.len() as u32).to_le_bytes());
    for entry in &image.table {
        out.extend_from_slice(&entry.to_le_bytes());
    }
    out.extend_from_slice(&(image.target_code.len() as u32).to_le_bytes());
    for insn in &image.target_code {
        out.extend_from_slice(&[insn.opcode as u8, insn.rd, insn.rn, insn.rm]);
        out.extend_from_slice(&insn.imm.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::TruncatedContainer)?;
        let slice = self.bytes.get(self.pos..end).ok_or(ContainerError::TruncatedContainer)?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, item: usize) -> Result<usize, ContainerError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item) > self.bytes.len().saturating_sub(self.pos) {
            return Err(ContainerError::TruncatedContainer);
        }
        Ok(n)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<TranslatedImage, ContainerError> {
    if bytes.len() < 4 {
        return Err(ContainerError::TruncatedContainer);
    }
    if &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    // the trailing checksum is not part of the payload
    let body_len = bytes.len().checked_sub(4).ok_or(ContainerError::TruncatedContainer)?;
    let mut r = Reader { bytes: &bytes[..body_len], pos: 4 };
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(ContainerError::VersionMismatch(version));
    }
    let image_base = r.u64()?;
    let entry = r.u64()?;
    let hostcall_base = r.u64()?;
    let n = r.len(1)?;
    let source_image: Arc<[u8]> = Arc::from(r.take(n)?);
    let n = r.len(8)?;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        table.push(r.u64()? as i64);
    }
    let n = r.len(INSN_BYTES)?;
    let mut target_code = Vec::with_capacity(n);
    for i in 0..n {
        let [op, rd, rn, rm] = r.array()?;
        let imm = r.u64()?;
        let opcode = Opcode::from_u8(op).ok_or_else(|| ContainerError::Malformed(format!("instruction {i}: opcode {op}")))?;
        let insn = TargetInstruction { opcode, rd, rn, rm, imm };
        if !insn.is_canonical() {
            return Err(ContainerError::Malformed(format!("instruction {i} not canonical")));
        }
        target_code.push(insn);
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(ContainerError::ChecksumMismatch { stored, computed });
    }
    if r.pos != body_len {
        return Err(ContainerError::Malformed(format!("{} trailing bytes", body_len - r.pos)));
    }
    if table.len() != source_image.len() {
        return Err(ContainerError::Malformed("table length differs from image length".into()));
    }
    let entry = usize::try_from(entry)
        .ok()
        .filter(|&e| e < source_image.len())
        .ok_or_else(|| ContainerError::Malformed(format!("entry {entry} outside image")))?;
    if let Some(bad) = table.iter().find(|&&t| t >= target_code.len() as i64) {
        return Err(ContainerError::Malformed(format!("table entry {bad} past end of code")));
    }
    Ok(TranslatedImage { target_code, table, source_image, image_base, entry, hostcall_base })
}
