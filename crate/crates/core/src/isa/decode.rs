//! Byte-level decoder for the supported subset.

use thiserror::Error;

use super::{AluOp, Cond, DecodedInstruction, MemRef, Mnemonic, Operand, Reg, Scale, Width};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InvalidReason {
    /// The opcode (or opcode extension, prefix, register form) is outside the subset.
    UnsupportedOpcode,
    /// The encoding runs past the end of the image.
    Truncated,
    /// The ModRM form is not legal for the opcode.
    Malformed,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq, Hash)]
#[error("invalid decode at offset {offset}: {reason:?}")]
pub struct InvalidDecode {
    pub offset: usize,
    pub reason: InvalidReason,
}

#[derive(Clone, Copy, Default)]
struct Rex(u8);

impl Rex {
    fn present(self) -> bool {
        self.0 != 0
    }
    fn w(self) -> bool {
        self.0 & 8 != 0
    }
    fn r(self) -> u8 {
        (self.0 >> 2) & 1
    }
    fn x(self) -> u8 {
        (self.0 >> 1) & 1
    }
    fn b(self) -> u8 {
        self.0 & 1
    }
}

/// ModRM operand pair: the `reg` field and the `r/m` operand.
struct ModRm {
    reg: u8,
    rm: RmOperand,
}

enum RmOperand {
    Reg(Reg),
    Mem(MemRef),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: InvalidReason) -> InvalidDecode {
        InvalidDecode { offset: self.start, reason }
    }

    fn u8(&mut self) -> Result<u8, InvalidDecode> {
        let b = *self.bytes.get(self.pos).ok_or(self.fail(InvalidReason::Truncated))?;
        self.pos += 1;
        Ok(b)
    }

    fn i8(&mut self) -> Result<i64, InvalidDecode> {
        Ok(self.u8()? as i8 as i64)
    }

    fn i32(&mut self) -> Result<i64, InvalidDecode> {
        let end = self.pos + 4;
        let raw = self.bytes.get(self.pos..end).ok_or(self.fail(InvalidReason::Truncated))?;
        self.pos = end;
        Ok(i32::from_le_bytes(raw.try_into().unwrap()) as i64)
    }

    fn i64(&mut self) -> Result<i64, InvalidDecode> {
        let end = self.pos + 8;
        let raw = self.bytes.get(self.pos..end).ok_or(self.fail(InvalidReason::Truncated))?;
        self.pos = end;
        Ok(i64::from_le_bytes(raw.try_into().unwrap()))
    }

    fn modrm(&mut self, rex: Rex) -> Result<ModRm, InvalidDecode> {
        let byte = self.u8()?;
        let mode = byte >> 6;
        let reg = ((byte >> 3) & 7) | (rex.r() << 3);
        let rm = byte & 7;
        if mode == 3 {
            return Ok(ModRm { reg, rm: RmOperand::Reg(Reg::from_index(rm | (rex.b() << 3))) });
        }
        let mut mem = MemRef { base: None, index: None, disp: 0, rip_relative: false };
        let mut disp32 = mode == 2;
        if rm == 4 {
            let sib = self.u8()?;
            let index = ((sib >> 3) & 7) | (rex.x() << 3);
            if index != 4 {
                mem.index = Some((Reg::from_index(index), Scale::from_log2(sib >> 6)));
            }
            let base = sib & 7;
            if base == 5 && mode == 0 {
                disp32 = true;
            } else {
                mem.base = Some(Reg::from_index(base | (rex.b() << 3)));
            }
        } else if rm == 5 && mode == 0 {
            mem.rip_relative = true;
            disp32 = true;
        } else {
            mem.base = Some(Reg::from_index(rm | (rex.b() << 3)));
        }
        if mode == 1 {
            mem.disp = self.i8()? as i32;
        } else if disp32 {
            mem.disp = self.i32()? as i32;
        }
        Ok(ModRm { reg, rm: RmOperand::Mem(mem) })
    }
}

/// Register operand for an 8-bit form. Without a REX prefix encodings 4..7
/// name AH..BH, which the subset does not model.
fn reg8(index: u8, rex: Rex) -> Option<Reg> {
    if !rex.present() && (4..8).contains(&index) {
        None
    } else {
        Some(Reg::from_index(index))
    }
}

fn rm_operand(rm: RmOperand, width: Width, rex: Rex) -> Option<Operand> {
    match rm {
        RmOperand::Mem(m) => Some(Operand::Mem(m)),
        RmOperand::Reg(r) if width == Width::W8 => reg8(r as u8, rex).map(Operand::Reg),
        RmOperand::Reg(r) => Some(Operand::Reg(r)),
    }
}

fn reg_operand(index: u8, width: Width, rex: Rex) -> Option<Operand> {
    if width == Width::W8 {
        reg8(index, rex).map(Operand::Reg)
    } else {
        Some(Operand::Reg(Reg::from_index(index)))
    }
}

/// Decodes the instruction starting at `offset`.
///
/// A pure function of the bytes: no state outside `image` is consulted.
pub fn decode(image: &[u8], offset: usize) -> Result<DecodedInstruction, InvalidDecode> {
    let mut cur = Cursor { bytes: image, start: offset, pos: offset };
    let unsupported = InvalidDecode { offset, reason: InvalidReason::UnsupportedOpcode };
    let malformed = InvalidDecode { offset, reason: InvalidReason::Malformed };

    let mut rex = Rex::default();
    let mut op = cur.u8()?;
    if (0x40..=0x4F).contains(&op) {
        rex = Rex(op);
        op = cur.u8()?;
        if (0x40..=0x4F).contains(&op) {
            return Err(unsupported);
        }
    }
    let full = if rex.w() { Width::W64 } else { Width::W32 };

    let (mnemonic, width, operands): (Mnemonic, Width, Vec<Operand>) = match op {
        // two-operand ALU forms: op r/m,r / op r,r/m at widths 8 and 32/64
        _ if op < 0x40 && (op & 7) < 4 && (op >> 3) != 2 && (op >> 3) != 3 => {
            let alu = AluOp::from_digit(op >> 3).ok_or(unsupported)?;
            let width = if op & 1 == 0 { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            let reg = reg_operand(m.reg, width, rex).ok_or(unsupported)?;
            let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
            let ops = if op & 2 == 0 { vec![rm, reg] } else { vec![reg, rm] };
            (Mnemonic::Alu(alu), width, ops)
        }
        0x50..=0x5F => {
            let reg = Reg::from_index((op & 7) | (rex.b() << 3));
            let m = if op < 0x58 { Mnemonic::Push } else { Mnemonic::Pop };
            (m, Width::W64, vec![Operand::Reg(reg)])
        }
        0x70..=0x7F => {
            let cond = Cond::from_code(op & 0xF).ok_or(unsupported)?;
            (Mnemonic::Jcc(cond), Width::W64, vec![Operand::Imm(cur.i8()?)])
        }
        0x0F => {
            let op2 = cur.u8()?;
            if !(0x80..=0x8F).contains(&op2) {
                return Err(unsupported);
            }
            let cond = Cond::from_code(op2 & 0xF).ok_or(unsupported)?;
            (Mnemonic::Jcc(cond), Width::W64, vec![Operand::Imm(cur.i32()?)])
        }
        0x80 | 0x81 | 0x83 => {
            let width = if op == 0x80 { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            let alu = AluOp::from_digit(m.reg & 7).ok_or(unsupported)?;
            let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
            let imm = match op {
                0x81 => cur.i32()?,
                _ => cur.i8()?,
            };
            (Mnemonic::Alu(alu), width, vec![rm, Operand::Imm(imm)])
        }
        0x84 | 0x85 => {
            let width = if op == 0x84 { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            let reg = reg_operand(m.reg, width, rex).ok_or(unsupported)?;
            let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
            (Mnemonic::Test, width, vec![rm, reg])
        }
        0x88..=0x8B => {
            let width = if op & 1 == 0 { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            let reg = reg_operand(m.reg, width, rex).ok_or(unsupported)?;
            let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
            let ops = if op & 2 == 0 { vec![rm, reg] } else { vec![reg, rm] };
            (Mnemonic::Mov, width, ops)
        }
        0x8D => {
            let m = cur.modrm(rex)?;
            let RmOperand::Mem(mem) = m.rm else { return Err(malformed) };
            (Mnemonic::Lea, full, vec![Operand::Reg(Reg::from_index(m.reg)), Operand::Mem(mem)])
        }
        0x90 => {
            if rex.b() != 0 {
                return Err(unsupported);
            }
            (Mnemonic::Nop, Width::W32, vec![])
        }
        0xB0..=0xB7 => {
            let reg = reg8((op & 7) | (rex.b() << 3), rex).ok_or(unsupported)?;
            let imm = cur.u8()? as i64;
            (Mnemonic::Mov, Width::W8, vec![Operand::Reg(reg), Operand::Imm(imm)])
        }
        0xB8..=0xBF => {
            let reg = Reg::from_index((op & 7) | (rex.b() << 3));
            let imm = if rex.w() { cur.i64()? } else { cur.i32()? as u32 as i64 };
            (Mnemonic::Mov, full, vec![Operand::Reg(reg), Operand::Imm(imm)])
        }
        0xC0 | 0xC1 | 0xD0 | 0xD1 => {
            let width = if op & 1 == 0 { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            if m.reg & 7 != 4 {
                return Err(unsupported);
            }
            let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
            let raw = if op >= 0xD0 { 1 } else { cur.u8()? };
            let count = raw & if width == Width::W64 { 0x3F } else { 0x1F };
            if count == 0 {
                // a zero count leaves the flags untouched, which would make
                // the written-flag set depend on the operand value
                return Err(unsupported);
            }
            (Mnemonic::Shl, width, vec![rm, Operand::Imm(count as i64)])
        }
        0xC3 => (Mnemonic::Ret, Width::W64, vec![]),
        0xC7 => {
            let m = cur.modrm(rex)?;
            if m.reg & 7 != 0 {
                return Err(malformed);
            }
            let rm = rm_operand(m.rm, full, rex).ok_or(unsupported)?;
            let imm = cur.i32()?;
            let imm = if full == Width::W32 { imm as u32 as i64 } else { imm };
            (Mnemonic::Mov, full, vec![rm, Operand::Imm(imm)])
        }
        0xCC => (Mnemonic::Int3, Width::W64, vec![]),
        0xE8 => (Mnemonic::Call, Width::W64, vec![Operand::Imm(cur.i32()?)]),
        0xE9 => (Mnemonic::Jmp, Width::W64, vec![Operand::Imm(cur.i32()?)]),
        0xEB => (Mnemonic::Jmp, Width::W64, vec![Operand::Imm(cur.i8()?)]),
        0xFE | 0xFF => {
            let width = if op == 0xFE { Width::W8 } else { full };
            let m = cur.modrm(rex)?;
            match (m.reg & 7, op) {
                (0 | 1, _) => {
                    let rm = rm_operand(m.rm, width, rex).ok_or(unsupported)?;
                    let mn = if m.reg & 7 == 0 { Mnemonic::Inc } else { Mnemonic::Dec };
                    (mn, width, vec![rm])
                }
                (2 | 4, 0xFF) => {
                    let RmOperand::Reg(r) = m.rm else { return Err(unsupported) };
                    let mn = if m.reg & 7 == 2 { Mnemonic::Call } else { Mnemonic::Jmp };
                    (mn, Width::W64, vec![Operand::Reg(r)])
                }
                (7, _) | (_, 0xFE) => return Err(malformed),
                _ => return Err(unsupported),
            }
        }
        _ => return Err(unsupported),
    };

    let length = (cur.pos - offset) as u8;
    debug_assert!((1..=15).contains(&length));
    Ok(DecodedInstruction::new(offset, length, mnemonic, width, operands))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_mov_and_ret() {
        let image = [0xB0, 0xC3];
        let mov = decode(&image, 0).unwrap();
        assert_eq!(mov.mnemonic, Mnemonic::Mov);
        assert_eq!(mov.width, Width::W8);
        assert_eq!(mov.operands, vec![Operand::Reg(Reg::Rax), Operand::Imm(0xC3)]);
        assert_eq!(mov.length, 2);
        let ret = decode(&image, 1).unwrap();
        assert_eq!(ret.mnemonic, Mnemonic::Ret);
        assert_eq!(ret.length, 1);
    }

    #[test]
    fn add_rcx_rdx() {
        let insn = decode(&[0x48, 0x01, 0xD1], 0).unwrap();
        assert_eq!(insn.mnemonic, Mnemonic::Alu(AluOp::Add));
        assert_eq!(insn.width, Width::W64);
        assert_eq!(insn.length, 3);
        assert_eq!(insn.operands, vec![Operand::Reg(Reg::Rcx), Operand::Reg(Reg::Rdx)]);
    }

    #[test]
    fn lone_ff_is_truncated() {
        let err = decode(&[0xFF], 0).unwrap_err();
        assert_eq!(err.reason, InvalidReason::Truncated);
    }

    #[test]
    fn sib_and_rip_forms() {
        // mov rax, [rbx + rcx*4 + 0x10]
        let insn = decode(&[0x48, 0x8B, 0x44, 0x8B, 0x10], 0).unwrap();
        assert_eq!(
            insn.operands[1],
            Operand::Mem(MemRef { base: Some(Reg::Rbx), index: Some((Reg::Rcx, Scale::S4)), disp: 0x10, rip_relative: false })
        );
        // lea rsi, [rip - 2]
        let insn = decode(&[0x48, 0x8D, 0x35, 0xFE, 0xFF, 0xFF, 0xFF], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Mem(MemRef::rip(-2)));
        // [r13] needs mod=01 with disp8 = 0; mod=00 rm=101 is RIP-relative even with REX.B
        let insn = decode(&[0x49, 0x8B, 0x45, 0x00], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Mem(MemRef::base_disp(Reg::R13, 0)));
        // SIB with no base and no index: absolute disp32
        let insn = decode(&[0x8B, 0x04, 0x25, 0x00, 0x10, 0x00, 0x00], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Mem(MemRef { base: None, index: None, disp: 0x1000, rip_relative: false }));
    }

    #[test]
    fn high_byte_registers_are_outside_the_subset() {
        // mov ah, 1
        assert_eq!(decode(&[0xB4, 0x01], 0).unwrap_err().reason, InvalidReason::UnsupportedOpcode);
        // with any REX the same encoding names SPL
        let insn = decode(&[0x40, 0xB4, 0x01], 0).unwrap();
        assert_eq!(insn.operands[0], Operand::Reg(Reg::Rsp));
    }

    #[test]
    fn lea_register_form_is_malformed() {
        assert_eq!(decode(&[0x48, 0x8D, 0xC0], 0).unwrap_err().reason, InvalidReason::Malformed);
    }

    #[test]
    fn shift_by_zero_is_rejected() {
        assert_eq!(decode(&[0xC1, 0xE0, 0x20], 0).unwrap_err().reason, InvalidReason::UnsupportedOpcode);
        let insn = decode(&[0x48, 0xC1, 0xE0, 0x20], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Imm(32));
    }

    #[test]
    fn legacy_prefixes_and_double_rex_are_unsupported() {
        for bytes in [&[0x66, 0x90][..], &[0xF3, 0xC3], &[0x48, 0x48, 0x01, 0xD1]] {
            assert_eq!(decode(bytes, 0).unwrap_err().reason, InvalidReason::UnsupportedOpcode);
        }
    }

    #[test]
    fn mov_imm_extension_rules() {
        // mov eax, 0xFFFFFFFF zero-extends
        let insn = decode(&[0xB8, 0xFF, 0xFF, 0xFF, 0xFF], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Imm(0xFFFF_FFFF));
        // mov rax, -1 via C7 sign-extends
        let insn = decode(&[0x48, 0xC7, 0xC0, 0xFF, 0xFF, 0xFF, 0xFF], 0).unwrap();
        assert_eq!(insn.operands[1], Operand::Imm(-1));
        // movabs
        let insn = decode(&[0x48, 0xB8, 1, 2, 3, 4, 5, 6, 7, 8], 0).unwrap();
        assert_eq!(insn.length, 10);
        assert_eq!(insn.operands[1], Operand::Imm(0x0807060504030201));
    }

    #[test]
    fn indirect_branches_need_register_form() {
        let jmp = decode(&[0xFF, 0xE6], 0).unwrap();
        assert!(jmp.is_indirect());
        assert_eq!(jmp.operands[0], Operand::Reg(Reg::Rsi));
        assert_eq!(decode(&[0xFF, 0x26], 0).unwrap_err().reason, InvalidReason::UnsupportedOpcode);
    }
}
