//! The supported x86-64 subset: instruction model, decoder, assembler,
//! flag semantics and the reference interpreter.

pub mod asm;
pub mod decode;
pub mod flags;
pub mod interp;
pub mod memory;

use std::fmt;

pub use decode::{decode, InvalidDecode, InvalidReason};
pub use flags::{compute_flags, FlagKind, FlagMask, FlagUpdate};

/// General-purpose registers in hardware encoding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    pub fn from_index(index: u8) -> Reg {
        Reg::ALL[(index & 15) as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Upper-case 64-bit name, used in tile names (`RCX`).
    pub fn name(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "RAX", "RCX", "RDX", "RBX", "RSP", "RBP", "RSI", "RDI", "R8", "R9", "R10", "R11",
            "R12", "R13", "R14", "R15",
        ];
        NAMES[self.index()]
    }

    /// Lower-case assembler name of the register viewed at `width`.
    pub fn asm_name(self, width: Width) -> &'static str {
        const Q: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ];
        const D: [&str; 16] = [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d",
            "r12d", "r13d", "r14d", "r15d",
        ];
        const B: [&str; 16] = [
            "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b",
            "r12b", "r13b", "r14b", "r15b",
        ];
        match width {
            Width::W64 => Q[self.index()],
            Width::W32 => D[self.index()],
            Width::W8 => B[self.index()],
        }
    }

    /// Parses an assembler register name into the register and its view width.
    pub fn parse(name: &str) -> Option<(Reg, Width)> {
        let lower = name.to_ascii_lowercase();
        for width in [Width::W64, Width::W32, Width::W8] {
            for reg in Reg::ALL {
                if reg.asm_name(width) == lower {
                    return Some((reg, width));
                }
            }
        }
        None
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operand width of an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Width {
    W8,
    W32,
    W64,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::W8, Width::W32, Width::W64];

    pub fn bits(self) -> u32 {
        match self {
            Width::W8 => 8,
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W64 => u64::MAX,
            w => (1u64 << w.bits()) - 1,
        }
    }

    /// Writes `value` into `old` following the partial-register rules:
    /// 32-bit writes zero-extend, 8-bit writes keep bits 8..63.
    pub fn merge(self, old: u64, value: u64) -> u64 {
        match self {
            Width::W64 => value,
            Width::W32 => value & 0xFFFF_FFFF,
            Width::W8 => (old & !0xFF) | (value & 0xFF),
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Index scale factor of a memory operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    S1,
    S2,
    S4,
    S8,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::S1, Scale::S2, Scale::S4, Scale::S8];

    pub fn factor(self) -> u64 {
        1 << self.log2()
    }

    pub fn log2(self) -> u32 {
        match self {
            Scale::S1 => 0,
            Scale::S2 => 1,
            Scale::S4 => 2,
            Scale::S8 => 3,
        }
    }

    pub fn from_log2(bits: u8) -> Scale {
        Scale::ALL[(bits & 3) as usize]
    }

    pub fn from_factor(factor: u64) -> Option<Scale> {
        Scale::ALL.into_iter().find(|s| s.factor() == factor)
    }
}

/// A memory operand `[base + index*scale + disp]` or `[rip + disp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<Reg>,
    pub index: Option<(Reg, Scale)>,
    pub disp: i32,
    pub rip_relative: bool,
}

impl MemRef {
    pub fn base_disp(base: Reg, disp: i32) -> MemRef {
        MemRef { base: Some(base), index: None, disp, rip_relative: false }
    }

    pub fn rip(disp: i32) -> MemRef {
        MemRef { base: None, index: None, disp, rip_relative: true }
    }

    /// Effective address given register values and the address of the next
    /// instruction (used for RIP-relative operands).
    pub fn effective_address(&self, gpr: &[u64; 16], next_rip: u64) -> u64 {
        if self.rip_relative {
            return next_rip.wrapping_add(self.disp as i64 as u64);
        }
        let mut addr = self.disp as i64 as u64;
        if let Some(base) = self.base {
            addr = addr.wrapping_add(gpr[base.index()]);
        }
        if let Some((index, scale)) = self.index {
            addr = addr.wrapping_add(gpr[index.index()] << scale.log2());
        }
        addr
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if self.rip_relative {
            f.write_str("rip")?;
            first = false;
        }
        if let Some(base) = self.base {
            f.write_str(base.asm_name(Width::W64))?;
            first = false;
        }
        if let Some((index, scale)) = self.index {
            if !first {
                f.write_str(" + ")?;
            }
            write!(f, "{}*{}", index.asm_name(Width::W64), scale.factor())?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp as i64)?;
        } else if self.disp > 0 {
            write!(f, " + {:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, " - {:#x}", -(self.disp as i64))?;
        }
        f.write_str("]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    /// Immediate value, already sign- or zero-extended per the encoding.
    /// For direct branches this holds the displacement.
    Imm(i64),
    Mem(MemRef),
}

impl Operand {
    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }

    pub fn imm(&self) -> Option<i64> {
        match self {
            Operand::Imm(v) => Some(*v),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<&MemRef> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

/// Branch conditions in the subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cond {
    /// CF = 1
    B,
    /// CF = 0
    Ae,
    /// ZF = 1
    Z,
    /// ZF = 0
    Nz,
    /// SF != OF
    L,
    /// SF = OF
    Ge,
    /// ZF = 1 or SF != OF
    Le,
    /// ZF = 0 and SF = OF
    G,
}

impl Cond {
    pub const ALL: [Cond; 8] = [Cond::B, Cond::Ae, Cond::Z, Cond::Nz, Cond::L, Cond::Ge, Cond::Le, Cond::G];

    /// Low nibble of the `7x` / `0F 8x` opcode.
    pub fn code(self) -> u8 {
        match self {
            Cond::B => 0x2,
            Cond::Ae => 0x3,
            Cond::Z => 0x4,
            Cond::Nz => 0x5,
            Cond::L => 0xC,
            Cond::Ge => 0xD,
            Cond::Le => 0xE,
            Cond::G => 0xF,
        }
    }

    pub fn from_code(code: u8) -> Option<Cond> {
        Cond::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn flags_read(self) -> FlagMask {
        match self {
            Cond::B | Cond::Ae => FlagMask::CF,
            Cond::Z | Cond::Nz => FlagMask::ZF,
            Cond::L | Cond::Ge => FlagMask::SF | FlagMask::OF,
            Cond::Le | Cond::G => FlagMask::ZF | FlagMask::SF | FlagMask::OF,
        }
    }

    pub fn holds(self, flags: FlagMask) -> bool {
        let cf = flags.contains(FlagMask::CF);
        let zf = flags.contains(FlagMask::ZF);
        let lt = flags.contains(FlagMask::SF) != flags.contains(FlagMask::OF);
        match self {
            Cond::B => cf,
            Cond::Ae => !cf,
            Cond::Z => zf,
            Cond::Nz => !zf,
            Cond::L => lt,
            Cond::Ge => !lt,
            Cond::Le => zf || lt,
            Cond::G => !zf && !lt,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::B => "b",
            Cond::Ae => "ae",
            Cond::Z => "z",
            Cond::Nz => "nz",
            Cond::L => "l",
            Cond::Ge => "ge",
            Cond::Le => "le",
            Cond::G => "g",
        }
    }
}

/// Two-operand arithmetic/logic operations that share one encoding scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AluOp {
    Add,
    Or,
    And,
    Sub,
    Xor,
    Cmp,
}

impl AluOp {
    pub const ALL: [AluOp; 6] = [AluOp::Add, AluOp::Or, AluOp::And, AluOp::Sub, AluOp::Xor, AluOp::Cmp];

    /// The `/digit` of the group-80/81/83 encodings and bits 3..5 of the
    /// two-operand opcodes.
    pub fn digit(self) -> u8 {
        match self {
            AluOp::Add => 0,
            AluOp::Or => 1,
            AluOp::And => 4,
            AluOp::Sub => 5,
            AluOp::Xor => 6,
            AluOp::Cmp => 7,
        }
    }

    pub fn from_digit(digit: u8) -> Option<AluOp> {
        AluOp::ALL.into_iter().find(|op| op.digit() == digit)
    }

    pub fn name(self) -> &'static str {
        match self {
            AluOp::Add => "ADD",
            AluOp::Or => "OR",
            AluOp::And => "AND",
            AluOp::Sub => "SUB",
            AluOp::Xor => "XOR",
            AluOp::Cmp => "CMP",
        }
    }

    pub fn flag_kind(self) -> FlagKind {
        match self {
            AluOp::Add => FlagKind::Add,
            AluOp::Sub | AluOp::Cmp => FlagKind::Sub,
            AluOp::And | AluOp::Or | AluOp::Xor => FlagKind::Logic,
        }
    }

    /// Result of the operation at full 64-bit precision; callers mask.
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub | AluOp::Cmp => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
        }
    }
}

/// Operation kind of a decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mnemonic {
    Mov,
    Lea,
    Alu(AluOp),
    Test,
    Inc,
    Dec,
    Shl,
    Push,
    Pop,
    /// Direct (`Imm` displacement) or indirect (`Reg`) call.
    Call,
    Ret,
    /// Direct (`Imm` displacement) or indirect (`Reg`) jump.
    Jmp,
    Jcc(Cond),
    Nop,
    Int3,
}

impl Mnemonic {
    pub fn name(self) -> String {
        match self {
            Mnemonic::Mov => "mov".into(),
            Mnemonic::Lea => "lea".into(),
            Mnemonic::Alu(op) => op.name().to_ascii_lowercase(),
            Mnemonic::Test => "test".into(),
            Mnemonic::Inc => "inc".into(),
            Mnemonic::Dec => "dec".into(),
            Mnemonic::Shl => "shl".into(),
            Mnemonic::Push => "push".into(),
            Mnemonic::Pop => "pop".into(),
            Mnemonic::Call => "call".into(),
            Mnemonic::Ret => "ret".into(),
            Mnemonic::Jmp => "jmp".into(),
            Mnemonic::Jcc(c) => format!("j{}", c.suffix()),
            Mnemonic::Nop => "nop".into(),
            Mnemonic::Int3 => "int3".into(),
        }
    }

    /// Flags written by this mnemonic. A fixed function of the mnemonic;
    /// width does not change the set in this subset.
    pub fn flags_written(self) -> FlagMask {
        match self {
            Mnemonic::Alu(_) | Mnemonic::Test | Mnemonic::Shl => FlagMask::all(),
            Mnemonic::Inc | Mnemonic::Dec => FlagMask::all() - FlagMask::CF,
            _ => FlagMask::empty(),
        }
    }

    pub fn flags_read(self) -> FlagMask {
        match self {
            Mnemonic::Jcc(c) => c.flags_read(),
            _ => FlagMask::empty(),
        }
    }
}

/// One instruction decoded at a byte offset of an image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecodedInstruction {
    pub offset: usize,
    pub length: u8,
    pub mnemonic: Mnemonic,
    pub width: Width,
    pub operands: Vec<Operand>,
    pub flags_written: FlagMask,
    pub flags_read: FlagMask,
}

impl DecodedInstruction {
    pub fn new(offset: usize, length: u8, mnemonic: Mnemonic, width: Width, operands: Vec<Operand>) -> Self {
        DecodedInstruction {
            offset,
            length,
            mnemonic,
            width,
            operands,
            flags_written: mnemonic.flags_written(),
            flags_read: mnemonic.flags_read(),
        }
    }

    pub fn end(&self) -> usize {
        self.offset + self.length as usize
    }

    /// Target offset of a direct branch or call (may lie outside the image,
    /// including below zero).
    pub fn direct_target(&self) -> Option<i64> {
        match self.mnemonic {
            Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc(_) => {
                self.operands[0].imm().map(|disp| self.end() as i64 + disp)
            }
            _ => None,
        }
    }

    pub fn is_indirect(&self) -> bool {
        matches!(self.mnemonic, Mnemonic::Call | Mnemonic::Jmp) && self.operands[0].reg().is_some()
    }

    /// Whether execution may continue at `end()` without a control transfer
    /// (calls return there, but through the lookup table).
    pub fn falls_through(&self) -> bool {
        !matches!(self.mnemonic, Mnemonic::Jmp | Mnemonic::Ret | Mnemonic::Int3)
    }

    pub fn is_control_flow(&self) -> bool {
        matches!(
            self.mnemonic,
            Mnemonic::Call | Mnemonic::Ret | Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Int3
        )
    }

    /// Whether executing the instruction touches data memory (and may fault).
    pub fn accesses_memory(&self) -> bool {
        match self.mnemonic {
            Mnemonic::Lea => false,
            Mnemonic::Push | Mnemonic::Pop | Mnemonic::Call | Mnemonic::Ret => true,
            _ => self.operands.iter().any(|op| matches!(op, Operand::Mem(_))),
        }
    }

    pub fn memory_operand(&self) -> Option<&MemRef> {
        self.operands.iter().find_map(Operand::mem)
    }
}

impl fmt::Display for DecodedInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic.name())?;
        let width = match self.mnemonic {
            Mnemonic::Push | Mnemonic::Pop | Mnemonic::Call | Mnemonic::Jmp => Width::W64,
            _ => self.width,
        };
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            match op {
                Operand::Reg(r) => f.write_str(r.asm_name(width))?,
                Operand::Imm(v) => match self.direct_target() {
                    Some(t) => write!(f, "{t:#x}")?,
                    None if *v < 0 => write!(f, "-{:#x}", v.unsigned_abs())?,
                    None => write!(f, "{v:#x}")?,
                },
                Operand::Mem(m) => {
                    if self.operands.iter().all(|o| o.reg().is_none()) {
                        let ptr = match self.width {
                            Width::W8 => "byte",
                            Width::W32 => "dword",
                            Width::W64 => "qword",
                        };
                        write!(f, "{ptr} ptr ")?;
                    }
                    write!(f, "{m}")?
                }
            }
        }
        Ok(())
    }
}
