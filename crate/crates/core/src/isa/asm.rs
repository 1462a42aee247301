//! A small assembler for the subset, used to author test programs.
//!
//! Syntax is Intel-flavoured: one instruction per line, `label:`
//! definitions, `.byte 0xNN, ...` for raw bytes and `;` comments.
//! Memory operands are written `[base + index*scale + disp]` or
//! `[rip + label]`; operands without a register need a `byte ptr` /
//! `dword ptr` / `qword ptr` size. `jmp`/`jcc` pick the short form when the
//! displacement fits unless written `jmp near label`; `jmp short label`
//! insists on the short form.

use std::collections::BTreeMap;

use thiserror::Error;

use super::memory::IMAGE_BASE;
use super::{AluOp, Cond, DecodedInstruction, MemRef, Mnemonic, Operand, Reg, Scale, Width};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("branch displacement overflow")]
    DisplacementOverflow,
    #[error("invalid operands: {0}")]
    BadOperands(String),
    #[error("syntax error: {0}")]
    Syntax(String),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

/// Output of [`assemble`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assembly {
    pub image: Vec<u8>,
    pub symbols: BTreeMap<String, usize>,
    /// Every emitted instruction (not `.byte` data), in image order.
    pub instructions: Vec<DecodedInstruction>,
}

impl Assembly {
    pub fn symbol(&self, name: &str) -> Option<usize> {
        self.symbols.get(name).copied()
    }

    pub fn instruction_starts(&self) -> Vec<usize> {
        self.instructions.iter().map(|i| i.offset).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Imm {
    Value(i64),
    /// Absolute load address of a label.
    Label(String),
}

#[derive(Clone, Debug, PartialEq)]
struct MemSyntax {
    base: Option<Reg>,
    index: Option<(Reg, Scale)>,
    disp: i64,
    rip: bool,
    rip_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
enum AsmOperand {
    Reg(Reg, Width),
    Imm(Imm),
    Mem(MemSyntax, Option<Width>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BranchForm {
    Auto,
    Short,
    Near,
}

#[derive(Clone, Debug)]
enum Stmt {
    Bytes(Vec<u8>),
    Insn { mnemonic: Mnemonic, operands: Vec<AsmOperand> },
    /// Direct branch or call to a label.
    Branch { mnemonic: Mnemonic, label: String, form: BranchForm },
}

struct Line {
    number: usize,
    stmt: Stmt,
    /// Whether a relaxable branch currently uses its long form.
    long: bool,
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn parse_number(text: &str) -> Option<i64> {
    let t = text.trim();
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, t),
    };
    let value = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else {
        t.replace('_', "").parse::<u64>().ok()?
    };
    Some(if neg { (value as i64).wrapping_neg() } else { value as i64 })
}

fn is_label(text: &str) -> bool {
    let mut chars = text.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_mem(inner: &str, line: usize) -> Result<MemSyntax, AsmError> {
    let mut mem = MemSyntax { base: None, index: None, disp: 0, rip: false, rip_label: None };
    // split into signed terms
    let mut terms = Vec::new();
    let mut current = String::new();
    let mut sign = 1i64;
    for c in inner.chars() {
        if c == '+' || c == '-' {
            if !current.trim().is_empty() {
                terms.push((sign, current.trim().to_string()));
            }
            current.clear();
            sign = if c == '-' { -1 } else { 1 };
        } else {
            current.push(c);
        }
    }
    if !current.trim().is_empty() {
        terms.push((sign, current.trim().to_string()));
    }
    let bad = |what: &str| err(line, AsmErrorKind::BadOperands(format!("{what} in `[{inner}]`")));
    for (sign, term) in terms {
        if let Some((r, s)) = term.split_once('*') {
            let (reg, w) = Reg::parse(r.trim()).ok_or_else(|| bad("bad index register"))?;
            let factor = parse_number(s).ok_or_else(|| bad("bad scale"))?;
            let scale = Scale::from_factor(factor as u64).ok_or_else(|| bad("bad scale"))?;
            if w != Width::W64 || sign < 0 || mem.index.is_some() || reg == Reg::Rsp {
                return Err(bad("bad index"));
            }
            mem.index = Some((reg, scale));
        } else if term.eq_ignore_ascii_case("rip") {
            mem.rip = true;
        } else if let Some((reg, w)) = Reg::parse(&term) {
            if w != Width::W64 || sign < 0 {
                return Err(bad("bad register"));
            }
            if mem.base.is_none() {
                mem.base = Some(reg);
            } else if mem.index.is_none() && reg != Reg::Rsp {
                mem.index = Some((reg, Scale::S1));
            } else {
                return Err(bad("too many registers"));
            }
        } else if let Some(n) = parse_number(&term) {
            mem.disp = mem.disp.wrapping_add(sign * n);
        } else if is_label(&term) && sign > 0 && mem.rip_label.is_none() {
            mem.rip_label = Some(term);
        } else {
            return Err(bad("bad term"));
        }
    }
    if mem.rip_label.is_some() && !mem.rip {
        return Err(bad("labels are only allowed RIP-relative"));
    }
    if mem.rip && (mem.base.is_some() || mem.index.is_some()) {
        return Err(bad("RIP-relative operands take no registers"));
    }
    Ok(mem)
}

fn parse_operand(text: &str, line: usize) -> Result<AsmOperand, AsmError> {
    let t = text.trim();
    let lower = t.to_ascii_lowercase();
    for (prefix, width) in [("byte ptr", Width::W8), ("dword ptr", Width::W32), ("qword ptr", Width::W64)] {
        if lower.starts_with(prefix) {
            let rest = t[prefix.len()..].trim();
            if let Some(inner) = rest.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                return Ok(AsmOperand::Mem(parse_mem(inner, line)?, Some(width)));
            }
            return Err(err(line, AsmErrorKind::Syntax(format!("expected memory operand after `{prefix}`"))));
        }
    }
    if let Some(inner) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        return Ok(AsmOperand::Mem(parse_mem(inner, line)?, None));
    }
    if let Some((reg, width)) = Reg::parse(t) {
        return Ok(AsmOperand::Reg(reg, width));
    }
    if let Some(n) = parse_number(t) {
        return Ok(AsmOperand::Imm(Imm::Value(n)));
    }
    if is_label(t) {
        return Ok(AsmOperand::Imm(Imm::Label(t.to_string())));
    }
    Err(err(line, AsmErrorKind::Syntax(format!("cannot parse operand `{t}`"))))
}

fn parse_mnemonic(name: &str) -> Option<Mnemonic> {
    Some(match name {
        "mov" => Mnemonic::Mov,
        "lea" => Mnemonic::Lea,
        "add" => Mnemonic::Alu(AluOp::Add),
        "sub" => Mnemonic::Alu(AluOp::Sub),
        "and" => Mnemonic::Alu(AluOp::And),
        "or" => Mnemonic::Alu(AluOp::Or),
        "xor" => Mnemonic::Alu(AluOp::Xor),
        "cmp" => Mnemonic::Alu(AluOp::Cmp),
        "test" => Mnemonic::Test,
        "inc" => Mnemonic::Inc,
        "dec" => Mnemonic::Dec,
        "shl" | "sal" => Mnemonic::Shl,
        "push" => Mnemonic::Push,
        "pop" => Mnemonic::Pop,
        "call" => Mnemonic::Call,
        "ret" => Mnemonic::Ret,
        "jmp" => Mnemonic::Jmp,
        "nop" => Mnemonic::Nop,
        "int3" => Mnemonic::Int3,
        "je" => Mnemonic::Jcc(Cond::Z),
        "jne" => Mnemonic::Jcc(Cond::Nz),
        "jc" | "jnae" => Mnemonic::Jcc(Cond::B),
        "jnc" | "jnb" => Mnemonic::Jcc(Cond::Ae),
        "jnge" => Mnemonic::Jcc(Cond::L),
        "jnl" => Mnemonic::Jcc(Cond::Ge),
        "jng" => Mnemonic::Jcc(Cond::Le),
        "jnle" => Mnemonic::Jcc(Cond::G),
        other => {
            let suffix = other.strip_prefix('j')?;
            Mnemonic::Jcc(Cond::ALL.into_iter().find(|c| c.suffix() == suffix)?)
        }
    })
}

fn parse_line(text: &str, number: usize, labels: &mut Vec<String>) -> Result<Option<Stmt>, AsmError> {
    let mut t = text.split(';').next().unwrap_or("").trim();
    // leading labels
    while let Some(colon) = t.find(':') {
        let name = t[..colon].trim();
        if !is_label(name) {
            break;
        }
        labels.push(name.to_string());
        t = t[colon + 1..].trim();
    }
    if t.is_empty() {
        return Ok(None);
    }
    let (head, rest) = match t.find(char::is_whitespace) {
        Some(i) => (&t[..i], t[i..].trim()),
        None => (t, ""),
    };
    let head = head.to_ascii_lowercase();
    if head == ".byte" {
        let mut bytes = Vec::new();
        for item in rest.split(',') {
            let v = parse_number(item)
                .filter(|v| (-128..=255).contains(v))
                .ok_or_else(|| err(number, AsmErrorKind::Syntax(format!("bad byte `{}`", item.trim()))))?;
            bytes.push(v as u8);
        }
        return Ok(Some(Stmt::Bytes(bytes)));
    }
    let mnemonic = parse_mnemonic(&head).ok_or_else(|| err(number, AsmErrorKind::UnknownMnemonic(head.clone())))?;
    let mut form = BranchForm::Auto;
    let mut rest = rest;
    for (kw, f) in [("short ", BranchForm::Short), ("near ", BranchForm::Near)] {
        if rest.to_ascii_lowercase().starts_with(kw) {
            form = f;
            rest = rest[kw.len()..].trim();
        }
    }
    let operands = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(|o| parse_operand(o, number)).collect::<Result<Vec<_>, _>>()?
    };
    if let (Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc(_), [AsmOperand::Imm(Imm::Label(label))]) =
        (mnemonic, operands.as_slice())
    {
        return Ok(Some(Stmt::Branch { mnemonic, label: label.clone(), form }));
    }
    Ok(Some(Stmt::Insn { mnemonic, operands }))
}

/// Byte encoder for one instruction.
struct Encoder {
    bytes: Vec<u8>,
    /// Byte position of a RIP-relative disp32 awaiting fixup.
    rip_disp_at: Option<usize>,
}

struct RexBits {
    w: bool,
    r: u8,
    x: u8,
    b: u8,
    force: bool,
}

impl RexBits {
    fn new(w: bool) -> RexBits {
        RexBits { w, r: 0, x: 0, b: 0, force: false }
    }

    fn byte(&self) -> Option<u8> {
        let v = 0x40 | (self.w as u8) << 3 | self.r << 2 | self.x << 1 | self.b;
        (v != 0x40 || self.force).then_some(v)
    }
}

/// Needs a REX prefix to name the low byte of SPL/BPL/SIL/DIL.
fn needs_rex8(reg: Reg, width: Width) -> bool {
    width == Width::W8 && (4..8).contains(&reg.index())
}

enum RmSpec<'a> {
    Reg(Reg),
    Mem(&'a MemRef),
}

impl Encoder {
    fn new() -> Encoder {
        Encoder { bytes: Vec::new(), rip_disp_at: None }
    }

    /// Emits `[rex] opcode... modrm [sib] [disp]`.
    fn modrm(&mut self, mut rex: RexBits, opcode: &[u8], reg_field: u8, rm: RmSpec) {
        rex.r = (reg_field >> 3) & 1;
        let reg3 = reg_field & 7;
        let mut tail = Vec::new();
        let modrm;
        match rm {
            RmSpec::Reg(r) => {
                rex.b = (r.index() as u8 >> 3) & 1;
                modrm = 0xC0 | reg3 << 3 | (r.index() as u8 & 7);
            }
            RmSpec::Mem(m) => {
                let disp = m.disp;
                if m.rip_relative {
                    modrm = reg3 << 3 | 5;
                    tail.extend(disp.to_le_bytes());
                } else if m.base.is_none() {
                    let (index, ss) = match m.index {
                        Some((i, s)) => (i.index() as u8, s.log2() as u8),
                        None => (4, 0),
                    };
                    rex.x = (index >> 3) & 1;
                    modrm = reg3 << 3 | 4;
                    tail.push(ss << 6 | (index & 7) << 3 | 5);
                    tail.extend(disp.to_le_bytes());
                } else {
                    let base = m.base.unwrap().index() as u8;
                    rex.b = (base >> 3) & 1;
                    let mode = if disp == 0 && base & 7 != 5 {
                        0
                    } else if i8::try_from(disp).is_ok() {
                        1
                    } else {
                        2
                    };
                    let needs_sib = m.index.is_some() || base & 7 == 4;
                    if needs_sib {
                        let (index, ss) = match m.index {
                            Some((i, s)) => (i.index() as u8, s.log2() as u8),
                            None => (4, 0),
                        };
                        rex.x = (index >> 3) & 1;
                        modrm = mode << 6 | reg3 << 3 | 4;
                        tail.push(ss << 6 | (index & 7) << 3 | (base & 7));
                    } else {
                        modrm = mode << 6 | reg3 << 3 | (base & 7);
                    }
                    match mode {
                        1 => tail.push(disp as i8 as u8),
                        2 => tail.extend(disp.to_le_bytes()),
                        _ => {}
                    }
                }
            }
        }
        self.bytes.extend(rex.byte());
        self.bytes.extend_from_slice(opcode);
        self.bytes.push(modrm);
        if let RmSpec::Mem(m) = rm {
            if m.rip_relative {
                self.rip_disp_at = Some(self.bytes.len());
            }
        }
        self.bytes.extend(tail);
    }
}

fn fits_i8(v: i64) -> bool {
    i8::try_from(v).is_ok()
}

fn fits_i32(v: i64) -> bool {
    i32::try_from(v).is_ok()
}

/// Resolved operand for encoding; `rip_target` is the absolute offset a
/// RIP-relative operand refers to.
struct Resolved {
    operands: Vec<Operand>,
    width: Width,
    rip_target: Option<i64>,
}

fn bad(line: usize, msg: impl Into<String>) -> AsmError {
    err(line, AsmErrorKind::BadOperands(msg.into()))
}

fn resolve_imm(imm: &Imm, symbols: &BTreeMap<String, usize>, line: usize) -> Result<i64, AsmError> {
    match imm {
        Imm::Value(v) => Ok(*v),
        Imm::Label(name) => symbols
            .get(name)
            .map(|&off| (IMAGE_BASE + off as u64) as i64)
            .ok_or_else(|| err(line, AsmErrorKind::UnresolvedLabel(name.clone()))),
    }
}

/// Resolves labels and infers the operand width of a non-branch instruction.
fn resolve(
    mnemonic: Mnemonic,
    operands: &[AsmOperand],
    symbols: Option<&BTreeMap<String, usize>>,
    line: usize,
) -> Result<Resolved, AsmError> {
    let mut width = None;
    let mut rip_target = None;
    let mut out = Vec::new();
    for op in operands {
        match op {
            AsmOperand::Reg(r, w) => {
                if width.is_some_and(|prev| prev != *w) {
                    return Err(bad(line, "operand width mismatch"));
                }
                width.get_or_insert(*w);
                out.push(Operand::Reg(*r));
            }
            AsmOperand::Imm(imm) => {
                let v = match (symbols, imm) {
                    (Some(s), _) => resolve_imm(imm, s, line)?,
                    (None, Imm::Value(v)) => *v,
                    // any label address has the same encoded size
                    (None, Imm::Label(_)) => IMAGE_BASE as i64,
                };
                out.push(Operand::Imm(v));
            }
            AsmOperand::Mem(m, size) => {
                if let Some(s) = size {
                    if width.is_some_and(|prev| prev != *s) {
                        return Err(bad(line, "operand width mismatch"));
                    }
                    width.get_or_insert(*s);
                }
                if let Some(label) = &m.rip_label {
                    let target = match symbols {
                        Some(s) => *s
                            .get(label)
                            .ok_or_else(|| err(line, AsmErrorKind::UnresolvedLabel(label.clone())))?
                            as i64,
                        None => 0,
                    };
                    rip_target = Some(target + m.disp);
                } else if m.rip {
                    // plain [rip + n] is relative to the next instruction
                    rip_target = None;
                }
                if !fits_i32(m.disp) {
                    return Err(bad(line, "displacement does not fit in 32 bits"));
                }
                out.push(Operand::Mem(MemRef {
                    base: m.base,
                    index: m.index,
                    disp: m.disp as i32,
                    rip_relative: m.rip,
                }));
            }
        }
    }
    let width = match mnemonic {
        Mnemonic::Push | Mnemonic::Pop | Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Ret | Mnemonic::Jcc(_) | Mnemonic::Int3 => {
            Width::W64
        }
        Mnemonic::Nop => Width::W32,
        _ => width.ok_or_else(|| bad(line, "operand size unknown; add a `ptr` size"))?,
    };
    Ok(Resolved { operands: out, width, rip_target })
}

/// Encodes a non-branch instruction. Returns the bytes and the canonical
/// operand list as the decoder would report it.
fn encode_insn(
    mnemonic: Mnemonic,
    resolved: &Resolved,
    offset: usize,
    line: usize,
) -> Result<(Vec<u8>, Vec<Operand>), AsmError> {
    let width = resolved.width;
    let ops = &resolved.operands;
    let w64 = width == Width::W64;
    let mut enc = Encoder::new();
    let mut canon = ops.clone();

    let force8 = |rex: &mut RexBits| {
        for op in ops {
            if let Operand::Reg(r) = op {
                if needs_rex8(*r, width) {
                    rex.force = true;
                }
            }
        }
    };

    match (mnemonic, ops.as_slice()) {
        (Mnemonic::Alu(alu), [dst, src]) => {
            let wbit = (width != Width::W8) as u8;
            let mut rex = RexBits::new(w64);
            force8(&mut rex);
            match (dst, src) {
                (Operand::Reg(_) | Operand::Mem(_), Operand::Reg(s)) => {
                    let rm = match dst {
                        Operand::Reg(d) => RmSpec::Reg(*d),
                        Operand::Mem(m) => RmSpec::Mem(m),
                        _ => unreachable!(),
                    };
                    enc.modrm(rex, &[alu.digit() << 3 | wbit], s.index() as u8, rm);
                }
                (Operand::Reg(d), Operand::Mem(m)) => {
                    enc.modrm(rex, &[alu.digit() << 3 | 2 | wbit], d.index() as u8, RmSpec::Mem(m));
                }
                (Operand::Reg(_) | Operand::Mem(_), Operand::Imm(v)) => {
                    let rm = match dst {
                        Operand::Reg(d) => RmSpec::Reg(*d),
                        Operand::Mem(m) => RmSpec::Mem(m),
                        _ => unreachable!(),
                    };
                    let v = normalize_signed_imm(*v, width).ok_or_else(|| bad(line, "immediate out of range"))?;
                    canon[1] = Operand::Imm(v);
                    if width == Width::W8 {
                        enc.modrm(rex, &[0x80], alu.digit(), rm);
                        enc.bytes.push(v as u8);
                    } else if fits_i8(v) {
                        enc.modrm(rex, &[0x83], alu.digit(), rm);
                        enc.bytes.push(v as u8);
                    } else {
                        enc.modrm(rex, &[0x81], alu.digit(), rm);
                        enc.bytes.extend((v as i32).to_le_bytes());
                    }
                }
                _ => return Err(bad(line, "unsupported operand combination")),
            }
        }
        (Mnemonic::Test, [dst, Operand::Reg(s)]) if !matches!(dst, Operand::Imm(_)) => {
            let mut rex = RexBits::new(w64);
            force8(&mut rex);
            let rm = match dst {
                Operand::Reg(d) => RmSpec::Reg(*d),
                Operand::Mem(m) => RmSpec::Mem(m),
                _ => unreachable!(),
            };
            let op = if width == Width::W8 { 0x84 } else { 0x85 };
            enc.modrm(rex, &[op], s.index() as u8, rm);
        }
        (Mnemonic::Mov, [dst, src]) => {
            let wbit = (width != Width::W8) as u8;
            let mut rex = RexBits::new(w64);
            force8(&mut rex);
            match (dst, src) {
                (Operand::Reg(_) | Operand::Mem(_), Operand::Reg(s)) => {
                    let rm = match dst {
                        Operand::Reg(d) => RmSpec::Reg(*d),
                        Operand::Mem(m) => RmSpec::Mem(m),
                        _ => unreachable!(),
                    };
                    enc.modrm(rex, &[0x88 | wbit], s.index() as u8, rm);
                }
                (Operand::Reg(d), Operand::Mem(m)) => {
                    enc.modrm(rex, &[0x8A | wbit], d.index() as u8, RmSpec::Mem(m));
                }
                (Operand::Reg(d), Operand::Imm(v)) => {
                    rex.b = (d.index() as u8 >> 3) & 1;
                    match width {
                        Width::W8 => {
                            let v = normalize_unsigned_imm(*v, Width::W8).ok_or_else(|| bad(line, "immediate out of range"))?;
                            canon[1] = Operand::Imm(v);
                            enc.bytes.extend(rex.byte());
                            enc.bytes.extend([0xB0 | (d.index() as u8 & 7), v as u8]);
                        }
                        Width::W32 => {
                            let v = normalize_unsigned_imm(*v, Width::W32).ok_or_else(|| bad(line, "immediate out of range"))?;
                            canon[1] = Operand::Imm(v);
                            enc.bytes.extend(rex.byte());
                            enc.bytes.push(0xB8 | (d.index() as u8 & 7));
                            enc.bytes.extend((v as u32).to_le_bytes());
                        }
                        Width::W64 => {
                            if fits_i32(*v) {
                                enc.modrm(RexBits::new(true), &[0xC7], 0, RmSpec::Reg(*d));
                                enc.bytes.extend((*v as i32).to_le_bytes());
                            } else {
                                enc.bytes.extend(rex.byte());
                                enc.bytes.push(0xB8 | (d.index() as u8 & 7));
                                enc.bytes.extend(v.to_le_bytes());
                            }
                        }
                    }
                }
                (Operand::Mem(m), Operand::Imm(v)) if width != Width::W8 => {
                    let v = if width == Width::W32 {
                        normalize_unsigned_imm(*v, Width::W32).ok_or_else(|| bad(line, "immediate out of range"))?
                    } else if fits_i32(*v) {
                        *v
                    } else {
                        return Err(bad(line, "immediate out of range"));
                    };
                    canon[1] = Operand::Imm(v);
                    enc.modrm(rex, &[0xC7], 0, RmSpec::Mem(m));
                    enc.bytes.extend((v as u32).to_le_bytes());
                }
                _ => return Err(bad(line, "unsupported operand combination")),
            }
        }
        (Mnemonic::Lea, [Operand::Reg(d), Operand::Mem(m)]) if width != Width::W8 => {
            enc.modrm(RexBits::new(w64), &[0x8D], d.index() as u8, RmSpec::Mem(m));
        }
        (Mnemonic::Inc | Mnemonic::Dec, [dst]) if !matches!(dst, Operand::Imm(_)) => {
            let mut rex = RexBits::new(w64);
            force8(&mut rex);
            let rm = match dst {
                Operand::Reg(d) => RmSpec::Reg(*d),
                Operand::Mem(m) => RmSpec::Mem(m),
                _ => unreachable!(),
            };
            let op = if width == Width::W8 { 0xFE } else { 0xFF };
            enc.modrm(rex, &[op], (mnemonic == Mnemonic::Dec) as u8, rm);
        }
        (Mnemonic::Shl, [dst, Operand::Imm(count)]) if !matches!(dst, Operand::Imm(_)) => {
            let max = if width == Width::W64 { 63 } else { 31 };
            if !(1..=max).contains(count) {
                return Err(bad(line, "shift count out of range"));
            }
            let mut rex = RexBits::new(w64);
            force8(&mut rex);
            let rm = match dst {
                Operand::Reg(d) => RmSpec::Reg(*d),
                Operand::Mem(m) => RmSpec::Mem(m),
                _ => unreachable!(),
            };
            let wbit = (width != Width::W8) as u8;
            if *count == 1 {
                enc.modrm(rex, &[0xD0 | wbit], 4, rm);
            } else {
                enc.modrm(rex, &[0xC0 | wbit], 4, rm);
                enc.bytes.push(*count as u8);
            }
        }
        (Mnemonic::Push | Mnemonic::Pop, [Operand::Reg(r)]) => {
            let mut rex = RexBits::new(false);
            rex.b = (r.index() as u8 >> 3) & 1;
            enc.bytes.extend(rex.byte());
            let base = if mnemonic == Mnemonic::Push { 0x50 } else { 0x58 };
            enc.bytes.push(base | (r.index() as u8 & 7));
        }
        (Mnemonic::Call | Mnemonic::Jmp, [Operand::Reg(r)]) => {
            let digit = if mnemonic == Mnemonic::Call { 2 } else { 4 };
            enc.modrm(RexBits::new(false), &[0xFF], digit, RmSpec::Reg(*r));
        }
        (Mnemonic::Ret, []) => enc.bytes.push(0xC3),
        (Mnemonic::Nop, []) => enc.bytes.push(0x90),
        (Mnemonic::Int3, []) => enc.bytes.push(0xCC),
        _ => return Err(bad(line, format!("unsupported form of `{}`", mnemonic.name()))),
    }

    if let Some(at) = enc.rip_disp_at {
        let end = (offset + enc.bytes.len()) as i64;
        let disp = match resolved.rip_target {
            Some(target) => target - end,
            None => ops.iter().find_map(|o| o.mem()).unwrap().disp as i64,
        };
        let disp = i32::try_from(disp).map_err(|_| bad(line, "RIP displacement overflow"))?;
        enc.bytes[at..at + 4].copy_from_slice(&disp.to_le_bytes());
        for op in canon.iter_mut() {
            if let Operand::Mem(m) = op {
                m.disp = disp;
            }
        }
    }
    Ok((enc.bytes, canon))
}

/// Immediate as the decoder reports it for sign-extended encodings.
fn normalize_signed_imm(v: i64, width: Width) -> Option<i64> {
    match width {
        Width::W8 => (-128..=255).contains(&v).then_some(v as u8 as i8 as i64),
        Width::W32 => (i32::MIN as i64..=u32::MAX as i64).contains(&v).then_some(v as u32 as i32 as i64),
        Width::W64 => fits_i32(v).then_some(v),
    }
}

/// Immediate as the decoder reports it for zero-extended encodings.
fn normalize_unsigned_imm(v: i64, width: Width) -> Option<i64> {
    let bits = width.bits();
    let min = -(1i64 << (bits - 1));
    let max = (1i64 << bits) - 1;
    (min..=max).contains(&v).then_some(v & width.mask() as i64)
}

fn branch_size(mnemonic: Mnemonic, long: bool) -> usize {
    match (mnemonic, long) {
        (Mnemonic::Call, _) => 5,
        (Mnemonic::Jmp, false) | (Mnemonic::Jcc(_), false) => 2,
        (Mnemonic::Jmp, true) => 5,
        (Mnemonic::Jcc(_), true) => 6,
        _ => unreachable!(),
    }
}

fn encode_branch(mnemonic: Mnemonic, long: bool, disp: i64) -> Vec<u8> {
    match (mnemonic, long) {
        (Mnemonic::Call, _) => [&[0xE8][..], &(disp as i32).to_le_bytes()].concat(),
        (Mnemonic::Jmp, false) => vec![0xEB, disp as i8 as u8],
        (Mnemonic::Jmp, true) => [&[0xE9][..], &(disp as i32).to_le_bytes()].concat(),
        (Mnemonic::Jcc(c), false) => vec![0x70 | c.code(), disp as i8 as u8],
        (Mnemonic::Jcc(c), true) => [&[0x0F, 0x80 | c.code()][..], &(disp as i32).to_le_bytes()].concat(),
        _ => unreachable!(),
    }
}

/// Assembles a program listing into a flat image.
pub fn assemble(source: &str) -> Result<Assembly, AsmError> {
    let mut lines: Vec<Line> = Vec::new();
    // labels bound to the index of the statement that follows them
    let mut label_at: Vec<(String, usize, usize)> = Vec::new();
    for (i, text) in source.lines().enumerate() {
        let number = i + 1;
        let mut labels = Vec::new();
        let stmt = parse_line(text, number, &mut labels)?;
        for l in labels {
            label_at.push((l, lines.len(), number));
        }
        if let Some(stmt) = stmt {
            let long = matches!(&stmt, Stmt::Branch { form: BranchForm::Near, .. } | Stmt::Branch { mnemonic: Mnemonic::Call, .. });
            lines.push(Line { number, stmt, long });
        }
    }

    // non-branch sizes do not depend on layout
    let mut sizes = Vec::with_capacity(lines.len());
    for line in &lines {
        sizes.push(match &line.stmt {
            Stmt::Bytes(b) => b.len(),
            Stmt::Insn { mnemonic, operands, .. } => {
                let resolved = resolve(*mnemonic, operands, None, line.number)?;
                encode_insn(*mnemonic, &resolved, 0, line.number)?.0.len()
            }
            Stmt::Branch { mnemonic, .. } => branch_size(*mnemonic, line.long),
        });
    }

    let layout = |lines: &[Line], sizes: &[usize]| -> Result<(Vec<usize>, BTreeMap<String, usize>), AsmError> {
        let mut offsets = Vec::with_capacity(lines.len() + 1);
        let mut off = 0;
        for s in sizes {
            offsets.push(off);
            off += s;
        }
        offsets.push(off);
        let mut symbols = BTreeMap::new();
        for (name, idx, number) in &label_at {
            if symbols.insert(name.clone(), offsets[*idx]).is_some() {
                return Err(err(*number, AsmErrorKind::DuplicateLabel(name.clone())));
            }
        }
        Ok((offsets, symbols))
    };

    // relax short branches until every displacement fits
    let (offsets, symbols) = loop {
        let (offsets, symbols) = layout(&lines, &sizes)?;
        let mut changed = false;
        for (i, line) in lines.iter_mut().enumerate() {
            if let Stmt::Branch { mnemonic, label, form } = &line.stmt {
                if line.long {
                    continue;
                }
                let target = *symbols
                    .get(label)
                    .ok_or_else(|| err(line.number, AsmErrorKind::UnresolvedLabel(label.clone())))?;
                let disp = target as i64 - (offsets[i] + sizes[i]) as i64;
                if !fits_i8(disp) {
                    if *form == BranchForm::Short {
                        return Err(err(line.number, AsmErrorKind::DisplacementOverflow));
                    }
                    line.long = true;
                    sizes[i] = branch_size(*mnemonic, true);
                    changed = true;
                }
            }
        }
        if !changed {
            break (offsets, symbols);
        }
    };

    let mut image = Vec::with_capacity(offsets[lines.len()]);
    let mut instructions = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let offset = offsets[i];
        match &line.stmt {
            Stmt::Bytes(b) => image.extend_from_slice(b),
            Stmt::Insn { mnemonic, operands, .. } => {
                let resolved = resolve(*mnemonic, operands, Some(&symbols), line.number)?;
                let (bytes, canon) = encode_insn(*mnemonic, &resolved, offset, line.number)?;
                debug_assert_eq!(bytes.len(), sizes[i]);
                instructions.push(DecodedInstruction::new(offset, bytes.len() as u8, *mnemonic, resolved.width, canon));
                image.extend(bytes);
            }
            Stmt::Branch { mnemonic, label, .. } => {
                let target = symbols[label];
                let size = sizes[i];
                let disp = target as i64 - (offset + size) as i64;
                if !fits_i32(disp) {
                    return Err(err(line.number, AsmErrorKind::DisplacementOverflow));
                }
                instructions.push(DecodedInstruction::new(offset, size as u8, *mnemonic, Width::W64, vec![Operand::Imm(disp)]));
                image.extend(encode_branch(*mnemonic, line.long, disp));
            }
        }
    }
    Ok(Assembly { image, symbols, instructions })
}

#[cfg(test)]
mod tests {
    use super::super::decode;
    use super::*;

    #[test]
    fn single_instructions() {
        assert_eq!(assemble("ret").unwrap().image, vec![0xC3]);
        assert_eq!(assemble("mov al, 0xC3").unwrap().image, vec![0xB0, 0xC3]);
        assert_eq!(assemble("add rcx, rdx").unwrap().image, vec![0x48, 0x01, 0xD1]);
        assert_eq!(assemble("xor eax, eax").unwrap().image, vec![0x31, 0xC0]);
        assert_eq!(assemble("test rdi, rdi").unwrap().image, vec![0x48, 0x85, 0xFF]);
        assert_eq!(assemble("jmp rsi").unwrap().image, vec![0xFF, 0xE6]);
        assert_eq!(assemble("mov sil, 1").unwrap().image, vec![0x40, 0xB6, 0x01]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = assemble("nop\nfrobnicate rax").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, AsmErrorKind::UnknownMnemonic(_)));
        let e = assemble("jmp nowhere").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::UnresolvedLabel(_)));
        let body = "nop\n".repeat(200);
        let e = assemble(&format!("jmp short far\n{body}far:")).unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::DisplacementOverflow);
    }

    #[test]
    fn branches_relax_to_long_form() {
        let body = "nop\n".repeat(200);
        let a = assemble(&format!("jz far\n{body}far: ret")).unwrap();
        assert_eq!(&a.image[..2], &[0x0F, 0x84]);
        assert_eq!(a.symbol("far"), Some(206));
        let a = assemble("jz near_ \nnear_: ret").unwrap();
        assert_eq!(a.image, vec![0x74, 0x00, 0xC3]);
    }

    #[test]
    fn round_trips_through_decoder() {
        let src = "
            start:
              mov rax, [rbx + rcx*4 + 0x10]
              mov qword ptr [rsp - 8], -5
              mov dword ptr [rsp], 0xFFFFFFFF
              add byte ptr [rbp + 3], 0x80
              lea rsi, [rip + start]
              sub r9d, 300
              cmp r12, [r13]
              inc dword ptr [rsp + r10*8]
              shl r15b, 7
              mov rax, 0x123456789
              mov r11, 0x3FF000
              push r12
              pop rsp
              call r11
              jl start
              .byte 0xB0
              ret
        ";
        let a = assemble(src).unwrap();
        for insn in &a.instructions {
            assert_eq!(&decode(&a.image, insn.offset).unwrap(), insn, "at offset {}", insn.offset);
        }
    }
}
