//! Tile templates, their per-operand specialization and the tile bank.

mod codegen;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::OnceLock;

use thiserror::Error;

use crate::isa::interp::TrapReason;
use crate::isa::{AluOp, DecodedInstruction, FlagMask, Mnemonic, Operand, Reg, Scale, Width};
use crate::regmap::{default_register_map, RegisterMap};
use crate::vm::{Opcode, TargetInstruction};

use codegen::{Arg, Emitter};

/// ALU operations that have an arithmetic tile (CMP only has a flag tile).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TileAluOp {
    Add,
    Or,
    And,
    Sub,
    Xor,
}

impl TileAluOp {
    pub const ALL: [TileAluOp; 5] = [TileAluOp::Add, TileAluOp::Or, TileAluOp::And, TileAluOp::Sub, TileAluOp::Xor];

    fn opcode(self) -> Opcode {
        match self {
            TileAluOp::Add => Opcode::Add,
            TileAluOp::Or => Opcode::Or,
            TileAluOp::And => Opcode::And,
            TileAluOp::Sub => Opcode::Sub,
            TileAluOp::Xor => Opcode::Xor,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TileAluOp::Add => "ADD",
            TileAluOp::Or => "OR",
            TileAluOp::And => "AND",
            TileAluOp::Sub => "SUB",
            TileAluOp::Xor => "XOR",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            TileAluOp::Add => "+",
            TileAluOp::Or => "|",
            TileAluOp::And => "&",
            TileAluOp::Sub => "-",
            TileAluOp::Xor => "^",
        }
    }

    fn from_alu(op: AluOp) -> Option<TileAluOp> {
        Some(match op {
            AluOp::Add => TileAluOp::Add,
            AluOp::Or => TileAluOp::Or,
            AluOp::And => TileAluOp::And,
            AluOp::Sub => TileAluOp::Sub,
            AluOp::Xor => TileAluOp::Xor,
            AluOp::Cmp => return None,
        })
    }
}

/// Flag computation selected by a flag tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlagOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Inc,
    Dec,
    Shl(u8),
}

impl FlagOp {
    fn from_alu(op: AluOp) -> FlagOp {
        match op {
            AluOp::Add => FlagOp::Add,
            AluOp::Sub | AluOp::Cmp => FlagOp::Sub,
            AluOp::And => FlagOp::And,
            AluOp::Or => FlagOp::Or,
            AluOp::Xor => FlagOp::Xor,
        }
    }

    fn is_binary(self) -> bool {
        matches!(self, FlagOp::Add | FlagOp::Sub | FlagOp::And | FlagOp::Or | FlagOp::Xor)
    }

    fn name(self) -> String {
        match self {
            FlagOp::Add => "ADD".into(),
            FlagOp::Sub => "SUB".into(),
            FlagOp::And => "AND".into(),
            FlagOp::Or => "OR".into(),
            FlagOp::Xor => "XOR".into(),
            FlagOp::Inc => "INC".into(),
            FlagOp::Dec => "DEC".into(),
            FlagOp::Shl(_) => "SHL".into(),
        }
    }
}

/// Register structure of an effective-address computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AddrShape {
    Rip,
    Absolute,
    Base,
    Index(Scale),
    BaseIndex(Scale),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Alu(TileAluOp),
    Mov,
    Load,
    Store,
    Lea,
    Inc,
    Dec,
    Shl(u8),
    Push,
    Pop,
    Addr(AddrShape),
    Flags(FlagOp),
    Trap(TrapReason),
}

/// A tile template: a family at one width, with positional register
/// parameters R1..R3 and possibly an immediate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileTemplate {
    pub family: Family,
    pub width: Width,
}

/// Concrete operand bound to a template parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TileOperand {
    Reg(Reg),
    /// Tile scratch register S0..S5.
    Scratch(u8),
    /// The immediate hole, filled at lowering time.
    Imm,
}

impl fmt::Display for TileOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TileOperand::Reg(r) => f.write_str(r.name()),
            TileOperand::Scratch(k) => write!(f, "S{k}"),
            TileOperand::Imm => f.write_str("IMM"),
        }
    }
}

const S1: TileOperand = TileOperand::Scratch(1);
const S2: TileOperand = TileOperand::Scratch(2);

fn width_tag(width: Width) -> u32 {
    width.bits()
}

impl TileTemplate {
    pub fn new(family: Family, width: Width) -> Self {
        TileTemplate { family, width }
    }

    /// Number of positional operands.
    pub fn arity(&self) -> usize {
        match self.family {
            Family::Alu(_) => 3,
            Family::Mov | Family::Inc | Family::Dec | Family::Shl(_) => 2,
            Family::Load | Family::Store | Family::Lea | Family::Push | Family::Pop | Family::Addr(AddrShape::Base) => 1,
            Family::Addr(AddrShape::Index(_)) => 1,
            Family::Addr(AddrShape::BaseIndex(_)) => 2,
            Family::Addr(_) | Family::Trap(_) => 0,
            Family::Flags(op) if op.is_binary() => 2,
            Family::Flags(_) => 1,
        }
    }

    /// Name pattern over positional parameters, e.g. `ADD{W}_R1_R1_R2`.
    pub fn pattern(&self) -> String {
        let w = width_tag(self.width);
        match self.family {
            Family::Alu(op) => format!("{}{w}_R1_R2_R3", op.name()),
            Family::Mov => format!("MOV{w}_R1_R2"),
            Family::Load => format!("LOAD{w}_R1"),
            Family::Store => format!("STORE{w}_R1"),
            Family::Lea => format!("LEA{w}_R1"),
            Family::Inc => format!("INC{w}_R1_R2"),
            Family::Dec => format!("DEC{w}_R1_R2"),
            Family::Shl(c) => format!("SHL{w}_R1_R2_{c}"),
            Family::Push => "PUSH_R1".into(),
            Family::Pop => "POP_R1".into(),
            Family::Addr(AddrShape::Rip) => "ADDR_RIP".into(),
            Family::Addr(AddrShape::Absolute) => "ADDR_ABS".into(),
            Family::Addr(AddrShape::Base) => "ADDR_R1".into(),
            Family::Addr(AddrShape::Index(s)) => format!("ADDR_R1x{}", s.factor()),
            Family::Addr(AddrShape::BaseIndex(s)) => format!("ADDR_R1_R2x{}", s.factor()),
            Family::Flags(FlagOp::Shl(c)) => format!("FLAGS_SHL{w}_R1_{c}"),
            Family::Flags(op) if op.is_binary() => format!("FLAGS_{}{w}_R1_R2", op.name()),
            Family::Flags(op) => format!("FLAGS_{}{w}_R1", op.name()),
            Family::Trap(reason) => format!("TRAP_{reason:?}").to_ascii_uppercase(),
        }
    }

    /// Specialized name for concrete operands.
    pub fn name(&self, operands: &[TileOperand]) -> String {
        let w = width_tag(self.width);
        let ops: Vec<String> = operands.iter().map(|o| o.to_string()).collect();
        let j = |ops: &[String]| ops.join("_");
        match self.family {
            Family::Alu(op) => format!("{}{w}_{}", op.name(), j(&ops)),
            Family::Mov => format!("MOV{w}_{}", j(&ops)),
            Family::Load => format!("LOAD{w}_{}", j(&ops)),
            Family::Store => format!("STORE{w}_{}", j(&ops)),
            Family::Lea => format!("LEA{w}_{}", j(&ops)),
            Family::Inc => format!("INC{w}_{}", j(&ops)),
            Family::Dec => format!("DEC{w}_{}", j(&ops)),
            Family::Shl(c) => format!("SHL{w}_{}_{c}", j(&ops)),
            Family::Push => format!("PUSH_{}", j(&ops)),
            Family::Pop => format!("POP_{}", j(&ops)),
            Family::Addr(AddrShape::Rip) => "ADDR_RIP".into(),
            Family::Addr(AddrShape::Absolute) => "ADDR_ABS".into(),
            Family::Addr(AddrShape::Base) => format!("ADDR_{}", ops[0]),
            Family::Addr(AddrShape::Index(s)) => format!("ADDR_{}x{}", ops[0], s.factor()),
            Family::Addr(AddrShape::BaseIndex(s)) => format!("ADDR_{}_{}x{}", ops[0], ops[1], s.factor()),
            Family::Flags(FlagOp::Shl(c)) => format!("FLAGS_SHL{w}_{}_{c}", j(&ops)),
            Family::Flags(op) => format!("FLAGS_{}{w}_{}", op.name(), j(&ops)),
            Family::Trap(_) => self.pattern(),
        }
    }

    /// Semantics over the positional parameters, for listings.
    pub fn semantics(&self) -> String {
        let mask = match self.width {
            Width::W8 => "MASK8",
            Width::W32 => "MASK32",
            Width::W64 => "MASK64",
        };
        let write = |expr: String| match self.width {
            Width::W8 => format!("R1 := (R1 & ~MASK8) | (({expr}) & MASK8)"),
            Width::W32 => format!("R1 := ({expr}) & MASK32"),
            Width::W64 => format!("R1 := {expr}"),
        };
        match self.family {
            Family::Alu(op) => write(format!("R2 {} R3", op.symbol())),
            Family::Mov => write("R2".into()),
            Family::Load => write(format!("mem[S0] & {mask}")),
            Family::Store => format!("mem[S0] := R1 & {mask}"),
            Family::Lea => write("S0".into()),
            Family::Inc => write("R2 + 1".into()),
            Family::Dec => write("R2 - 1".into()),
            Family::Shl(c) => write(format!("R2 << {c}")),
            Family::Push => "mem[RSP - 8] := R1; RSP := RSP - 8".into(),
            Family::Pop => "R1 := mem[RSP]; RSP := RSP + 8 (unless R1 = RSP)".into(),
            Family::Addr(AddrShape::Rip) => "S0 := next_rip + disp".into(),
            Family::Addr(AddrShape::Absolute) => "S0 := disp".into(),
            Family::Addr(AddrShape::Base) => "S0 := R1 + disp".into(),
            Family::Addr(AddrShape::Index(s)) => format!("S0 := R1 * {} + disp", s.factor()),
            Family::Addr(AddrShape::BaseIndex(s)) => format!("S0 := R1 + R2 * {} + disp", s.factor()),
            Family::Flags(op) => format!("F := flags_{}{}(R1, R2)", op.name().to_ascii_lowercase(), self.width.bits()),
            Family::Trap(reason) => format!("trap {reason:?}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TileError {
    #[error("{template} takes {expected} operands, got {got}")]
    ArityMismatch { template: String, expected: usize, got: usize },
    #[error("operand {operand} not admissible for {template}")]
    Unmapped { template: String, operand: TileOperand },
    #[error("no tile for `{0}`")]
    UnsupportedInstruction(String),
}

/// A specialized tile.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Tile {
    pub name: String,
    pub template: TileTemplate,
    pub operands: Vec<TileOperand>,
    pub code: Vec<TargetInstruction>,
    /// Index of the instruction whose `imm` is the immediate hole.
    pub hole: Option<usize>,
    /// Target registers read before being written.
    pub reads: Vec<u8>,
    /// Target registers written.
    pub writes: Vec<u8>,
    /// Source registers the tile may modify.
    pub dests: Vec<Reg>,
}

impl Tile {
    /// The tile code with the hole filled by `value`.
    pub fn instantiate(&self, value: Option<u64>) -> Vec<TargetInstruction> {
        let mut code = self.code.clone();
        if let (Some(i), Some(v)) = (self.hole, value) {
            code[i].imm = v;
        }
        code
    }

    pub fn listing(&self, map: &RegisterMap) -> String {
        let mut out = format!("{}:\n", self.name);
        for (i, insn) in self.code.iter().enumerate() {
            let mark = if Some(i) == self.hole { "  ; hole" } else { "" };
            let _ = writeln!(out, "    {}{mark}", insn.display_with(map));
        }
        out
    }
}

fn check_operand(template: &TileTemplate, op: TileOperand, allowed: &[fn(TileOperand) -> bool]) -> Result<(), TileError> {
    if allowed.iter().any(|f| f(op)) {
        Ok(())
    } else {
        Err(TileError::Unmapped { template: template.pattern(), operand: op })
    }
}

fn is_reg(op: TileOperand) -> bool {
    matches!(op, TileOperand::Reg(_))
}

fn is_imm(op: TileOperand) -> bool {
    op == TileOperand::Imm
}

fn is_s1(op: TileOperand) -> bool {
    op == S1
}

fn is_s2(op: TileOperand) -> bool {
    op == S2
}

/// Instantiates `template` for concrete operands under `map`.
pub fn specialize(template: &TileTemplate, operands: &[TileOperand], map: &RegisterMap) -> Result<Tile, TileError> {
    if operands.len() != template.arity() {
        return Err(TileError::ArityMismatch {
            template: template.pattern(),
            expected: template.arity(),
            got: operands.len(),
        });
    }
    let t = template;
    let check = |i: usize, allowed: &[fn(TileOperand) -> bool]| check_operand(t, operands[i], allowed);
    // register-destination forms have R1 = R2; scratch forms read S1 and write S2
    let same_or_scratch = |d: TileOperand, a: TileOperand| -> Result<(), TileError> {
        if (is_reg(d) && d == a) || (is_s2(d) && is_s1(a)) {
            Ok(())
        } else {
            Err(TileError::Unmapped { template: t.pattern(), operand: d })
        }
    };
    match t.family {
        Family::Alu(_) => {
            same_or_scratch(operands[0], operands[1])?;
            if is_reg(operands[0]) {
                check(2, &[is_reg, is_imm, is_s1])?;
            } else {
                check(2, &[is_reg, is_imm])?;
            }
        }
        Family::Mov => {
            check(0, &[is_reg])?;
            check(1, &[is_reg, is_imm])?;
        }
        Family::Load => check(0, &[is_reg, is_s1])?,
        Family::Store => check(0, &[is_reg, is_imm, is_s2])?,
        Family::Lea => {
            check(0, &[is_reg])?;
            if t.width == Width::W8 {
                return Err(TileError::Unmapped { template: t.pattern(), operand: operands[0] });
            }
        }
        Family::Inc | Family::Dec | Family::Shl(_) => same_or_scratch(operands[0], operands[1])?,
        Family::Push | Family::Pop => check(0, &[is_reg])?,
        Family::Addr(shape) => {
            for i in 0..operands.len() {
                check(i, &[is_reg])?;
            }
            let index = match shape {
                AddrShape::Index(_) => operands.first(),
                AddrShape::BaseIndex(_) => operands.get(1),
                _ => None,
            };
            if let Some(&op) = index.filter(|&&op| op == TileOperand::Reg(Reg::Rsp)) {
                return Err(TileError::Unmapped { template: t.pattern(), operand: op });
            }
        }
        Family::Flags(op) => {
            check(0, &[is_reg, is_s1])?;
            if op.is_binary() {
                check(1, &[is_reg, is_imm, is_s1])?;
                if is_s1(operands[0]) && is_s1(operands[1]) {
                    return Err(TileError::Unmapped { template: t.pattern(), operand: S1 });
                }
            }
        }
        Family::Trap(_) => {}
    }
    if let Family::Shl(c) | Family::Flags(FlagOp::Shl(c)) = t.family {
        let max = if t.width == Width::W64 { 63 } else { 31 };
        if c == 0 || c > max {
            return Err(TileError::UnsupportedInstruction(t.name(operands)));
        }
    }

    let mut args: Vec<Arg> = operands
        .iter()
        .map(|op| match *op {
            TileOperand::Reg(r) => Arg::R(map.target(r)),
            TileOperand::Scratch(k) => Arg::R(map.scratch(k as usize)),
            TileOperand::Imm => Arg::Imm,
        })
        .collect();
    if matches!(t.family, Family::Push | Family::Pop) {
        args.push(Arg::R(map.target(Reg::Rsp)));
    }
    let mut e = Emitter::new(map);
    codegen::emit(&mut e, &t.family, t.width, &args);

    let mut dests = Vec::new();
    let mut add_dest = |op: TileOperand| {
        if let TileOperand::Reg(r) = op {
            if !dests.contains(&r) {
                dests.push(r);
            }
        }
    };
    match t.family {
        Family::Alu(_) | Family::Mov | Family::Load | Family::Lea | Family::Inc | Family::Dec | Family::Shl(_) => {
            add_dest(operands[0])
        }
        Family::Pop => {
            add_dest(operands[0]);
            add_dest(TileOperand::Reg(Reg::Rsp));
        }
        Family::Push => add_dest(TileOperand::Reg(Reg::Rsp)),
        _ => {}
    }

    let (mut reads, mut writes) = (Vec::new(), Vec::new());
    for insn in &e.code {
        for r in insn.reads() {
            if !writes.contains(&r) && !reads.contains(&r) {
                reads.push(r);
            }
        }
        if let Some(w) = insn.writes() {
            if !writes.contains(&w) {
                writes.push(w);
            }
        }
    }
    reads.sort_unstable();
    writes.sort_unstable();
    Ok(Tile {
        name: t.name(operands),
        template: *t,
        operands: operands.to_vec(),
        code: e.code,
        hole: e.hole,
        reads,
        writes,
        dests,
    })
}

/// Every (template, operands) combination the decoder can produce, in a
/// fixed order.
pub fn admissible_combinations() -> Vec<(TileTemplate, Vec<TileOperand>)> {
    let regs: Vec<TileOperand> = Reg::ALL.iter().map(|&r| TileOperand::Reg(r)).collect();
    let mut out = Vec::new();
    let mut add = |family: Family, width: Width, ops: Vec<TileOperand>| out.push((TileTemplate::new(family, width), ops));

    for width in Width::ALL {
        for op in TileAluOp::ALL {
            for &d in &regs {
                for &b in regs.iter().chain([&TileOperand::Imm, &S1]) {
                    add(Family::Alu(op), width, vec![d, d, b]);
                }
            }
            for &b in regs.iter().chain([&TileOperand::Imm]) {
                add(Family::Alu(op), width, vec![S2, S1, b]);
            }
        }
        for &d in &regs {
            for &s in regs.iter().chain([&TileOperand::Imm]) {
                add(Family::Mov, width, vec![d, s]);
            }
        }
        for &d in regs.iter().chain([&S1]) {
            add(Family::Load, width, vec![d]);
        }
        for &s in regs.iter().chain([&S2]) {
            add(Family::Store, width, vec![s]);
        }
        // there is no 8-bit store-immediate encoding in the subset
        if width != Width::W8 {
            add(Family::Store, width, vec![TileOperand::Imm]);
        }
        if width != Width::W8 {
            for &d in &regs {
                add(Family::Lea, width, vec![d]);
            }
        }
        let max_count = if width == Width::W64 { 63 } else { 31 };
        for (d, a) in regs.iter().map(|&r| (r, r)).chain([(S2, S1)]) {
            add(Family::Inc, width, vec![d, a]);
            add(Family::Dec, width, vec![d, a]);
            for c in 1..=max_count {
                add(Family::Shl(c), width, vec![d, a]);
            }
        }
        for op in [FlagOp::Add, FlagOp::Sub, FlagOp::And, FlagOp::Or, FlagOp::Xor] {
            for &a in regs.iter().chain([&S1]) {
                for &b in regs.iter().chain([&TileOperand::Imm, &S1]) {
                    if a == S1 && b == S1 {
                        continue;
                    }
                    add(Family::Flags(op), width, vec![a, b]);
                }
            }
        }
        for &a in regs.iter().chain([&S1]) {
            add(Family::Flags(FlagOp::Inc), width, vec![a]);
            add(Family::Flags(FlagOp::Dec), width, vec![a]);
            for c in 1..=max_count {
                add(Family::Flags(FlagOp::Shl(c)), width, vec![a]);
            }
        }
    }
    for &r in &regs {
        add(Family::Push, Width::W64, vec![r]);
        add(Family::Pop, Width::W64, vec![r]);
    }
    add(Family::Addr(AddrShape::Rip), Width::W64, vec![]);
    add(Family::Addr(AddrShape::Absolute), Width::W64, vec![]);
    let index_regs: Vec<TileOperand> = regs.iter().copied().filter(|&r| r != TileOperand::Reg(Reg::Rsp)).collect();
    for &b in &regs {
        add(Family::Addr(AddrShape::Base), Width::W64, vec![b]);
    }
    for scale in Scale::ALL {
        for &i in &index_regs {
            add(Family::Addr(AddrShape::Index(scale)), Width::W64, vec![i]);
            for &b in &regs {
                add(Family::Addr(AddrShape::BaseIndex(scale)), Width::W64, vec![b, i]);
            }
        }
    }
    for reason in [TrapReason::InvalidDecode, TrapReason::Breakpoint, TrapReason::UntranslatedTarget] {
        add(Family::Trap(reason), Width::W64, vec![]);
    }
    out
}

/// The immutable map from specialized tile name to tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileBank {
    map: RegisterMap,
    tiles: BTreeMap<String, Tile>,
}

pub fn build_tile_bank(map: &RegisterMap) -> TileBank {
    let tiles = admissible_combinations()
        .into_iter()
        .map(|(template, ops)| {
            let tile = specialize(&template, &ops, map).expect("admissible combination");
            (tile.name.clone(), tile)
        })
        .collect();
    TileBank { map: map.clone(), tiles }
}

impl TileBank {
    /// The bank for the default register map, built on first use.
    pub fn global() -> &'static TileBank {
        static BANK: OnceLock<TileBank> = OnceLock::new();
        BANK.get_or_init(|| build_tile_bank(&default_register_map()))
    }

    pub fn get(&self, name: &str) -> Option<&Tile> {
        self.tiles.get(name)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> impl Iterator<Item = &Tile> {
        self.tiles.values()
    }

    pub fn register_map(&self) -> &RegisterMap {
        &self.map
    }

    /// Every tile with its listing, in name order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for tile in self.tiles.values() {
            out.push_str(&tile.listing(&self.map));
        }
        out
    }

    fn fetch(&self, template: TileTemplate, ops: &[TileOperand]) -> Result<&Tile, TileError> {
        let name = template.name(ops);
        self.tiles.get(&name).ok_or(TileError::UnsupportedInstruction(name))
    }
}

/// Value for a tile's immediate hole.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoleValue {
    Value(u64),
    /// An absolute address: image base plus this offset.
    ImageOffset(i64),
}

/// One tile selected for an instruction.
#[derive(Clone, Copy, Debug)]
pub struct TileUse<'b> {
    pub tile: &'b Tile,
    pub hole: Option<HoleValue>,
}

/// Tiles implementing a non-control instruction, in emission order:
/// address computation, load, flag and arithmetic tiles, store.
///
/// The flag tile is kept only when `live` intersects the written flags.
/// For register destinations it runs before the arithmetic tile (its
/// inputs are still intact); for memory destinations it runs after the
/// store, so a faulting store leaves the flags untouched.
pub fn lookup_tiles<'b>(bank: &'b TileBank, insn: &DecodedInstruction, live: FlagMask) -> Result<Vec<TileUse<'b>>, TileError> {
    let w = insn.width;
    let ops = &insn.operands;
    let unsupported = || TileError::UnsupportedInstruction(insn.to_string());
    let mut out: Vec<TileUse<'b>> = Vec::new();
    let mut push = |template: TileTemplate, tops: &[TileOperand], hole: Option<HoleValue>| -> Result<(), TileError> {
        out.push(TileUse { tile: bank.fetch(template, tops)?, hole });
        Ok(())
    };
    let t = |family: Family| TileTemplate::new(family, w);
    let imm_hole = |v: i64| Some(HoleValue::Value(v as u64 & w.mask()));
    let src = |op: &Operand| -> Option<(TileOperand, Option<HoleValue>)> {
        match op {
            Operand::Reg(r) => Some((TileOperand::Reg(*r), None)),
            Operand::Imm(v) => Some((TileOperand::Imm, imm_hole(*v))),
            Operand::Mem(_) => None,
        }
    };
    let keep_flags = live.intersects(insn.flags_written);

    if let Some(m) = insn.memory_operand() {
        let (shape, regs): (AddrShape, Vec<TileOperand>) = match (m.rip_relative, m.base, m.index) {
            (true, ..) => (AddrShape::Rip, vec![]),
            (false, None, None) => (AddrShape::Absolute, vec![]),
            (false, Some(b), None) => (AddrShape::Base, vec![TileOperand::Reg(b)]),
            (false, None, Some((i, s))) => (AddrShape::Index(s), vec![TileOperand::Reg(i)]),
            (false, Some(b), Some((i, s))) => (AddrShape::BaseIndex(s), vec![TileOperand::Reg(b), TileOperand::Reg(i)]),
        };
        let hole = match shape {
            AddrShape::Rip => HoleValue::ImageOffset(insn.end() as i64 + m.disp as i64),
            _ => HoleValue::Value(m.disp as i64 as u64),
        };
        push(TileTemplate::new(Family::Addr(shape), Width::W64), &regs, Some(hole))?;
    }

    // flag tile over (a, b); `None` operand means unary
    let flag_tile = |op: FlagOp, a: TileOperand, b: Option<(TileOperand, Option<HoleValue>)>| {
        let mut tops = vec![a];
        let mut hole = None;
        if let Some((b, h)) = b {
            tops.push(b);
            hole = h;
        }
        (t(Family::Flags(op)), tops, hole)
    };

    match insn.mnemonic {
        Mnemonic::Nop => {}
        Mnemonic::Mov => match (&ops[0], &ops[1]) {
            (Operand::Reg(d), Operand::Mem(_)) => push(t(Family::Load), &[TileOperand::Reg(*d)], None)?,
            (Operand::Mem(_), s) => {
                let (s, h) = src(s).ok_or_else(unsupported)?;
                push(t(Family::Store), &[s], h)?;
            }
            (Operand::Reg(d), s) => {
                let (s, h) = src(s).ok_or_else(unsupported)?;
                push(t(Family::Mov), &[TileOperand::Reg(*d), s], h)?;
            }
            _ => return Err(unsupported()),
        },
        Mnemonic::Lea => {
            let d = ops[0].reg().ok_or_else(unsupported)?;
            push(t(Family::Lea), &[TileOperand::Reg(d)], None)?;
        }
        Mnemonic::Alu(_) | Mnemonic::Test => {
            let (fop, arith) = match insn.mnemonic {
                Mnemonic::Alu(op) => (FlagOp::from_alu(op), TileAluOp::from_alu(op)),
                _ => (FlagOp::And, None),
            };
            match (&ops[0], &ops[1]) {
                (Operand::Mem(_), b) => {
                    let b = src(b).ok_or_else(unsupported)?;
                    push(t(Family::Load), &[S1], None)?;
                    if let Some(aop) = arith {
                        push(t(Family::Alu(aop)), &[S2, S1, b.0], b.1)?;
                        push(t(Family::Store), &[S2], None)?;
                    }
                    if keep_flags {
                        let (ft, fops, h) = flag_tile(fop, S1, Some(b));
                        push(ft, &fops, h)?;
                    }
                }
                (Operand::Reg(a), b) => {
                    let a = TileOperand::Reg(*a);
                    let b = match b {
                        Operand::Mem(_) => {
                            push(t(Family::Load), &[S1], None)?;
                            (S1, None)
                        }
                        other => src(other).ok_or_else(unsupported)?,
                    };
                    if keep_flags {
                        let (ft, fops, h) = flag_tile(fop, a, Some(b));
                        push(ft, &fops, h)?;
                    }
                    if let Some(aop) = arith {
                        push(t(Family::Alu(aop)), &[a, a, b.0], b.1)?;
                    }
                }
                _ => return Err(unsupported()),
            }
        }
        Mnemonic::Inc | Mnemonic::Dec | Mnemonic::Shl => {
            let (family, fop) = match insn.mnemonic {
                Mnemonic::Inc => (Family::Inc, FlagOp::Inc),
                Mnemonic::Dec => (Family::Dec, FlagOp::Dec),
                _ => {
                    let c = ops[1].imm().ok_or_else(unsupported)? as u8;
                    (Family::Shl(c), FlagOp::Shl(c))
                }
            };
            match &ops[0] {
                Operand::Mem(_) => {
                    push(t(Family::Load), &[S1], None)?;
                    push(t(family), &[S2, S1], None)?;
                    push(t(Family::Store), &[S2], None)?;
                    if keep_flags {
                        push(t(Family::Flags(fop)), &[S1], None)?;
                    }
                }
                Operand::Reg(r) => {
                    let r = TileOperand::Reg(*r);
                    if keep_flags {
                        push(t(Family::Flags(fop)), &[r], None)?;
                    }
                    push(t(family), &[r, r], None)?;
                }
                Operand::Imm(_) => return Err(unsupported()),
            }
        }
        Mnemonic::Push | Mnemonic::Pop => {
            let r = ops[0].reg().ok_or_else(unsupported)?;
            let family = if insn.mnemonic == Mnemonic::Push { Family::Push } else { Family::Pop };
            push(TileTemplate::new(family, Width::W64), &[TileOperand::Reg(r)], None)?;
        }
        _ => return Err(unsupported()),
    }
    Ok(out)
}

/// Concatenates the selected tiles, filling holes; image-relative holes
/// are resolved against `image_base`.
pub fn emit_tiles(uses: &[TileUse<'_>], image_base: u64) -> Vec<TargetInstruction> {
    let mut code = Vec::new();
    for u in uses {
        let value = u.hole.map(|h| match h {
            HoleValue::Value(v) => v,
            HoleValue::ImageOffset(o) => image_base.wrapping_add(o as u64),
        });
        code.extend(u.tile.instantiate(value));
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::decode;

    #[test]
    fn listing4_name_and_registers() {
        let map = default_register_map();
        let t = TileTemplate::new(Family::Alu(TileAluOp::Add), Width::W8);
        let tile = specialize(&t, &[TileOperand::Reg(Reg::Rcx), TileOperand::Reg(Reg::Rcx), TileOperand::Reg(Reg::Rdx)], &map).unwrap();
        assert_eq!(tile.name, "ADD8_RCX_RCX_RDX");
        assert!(tile.reads.contains(&3) && tile.reads.contains(&2));
        assert!(tile.writes.contains(&3) && !tile.writes.contains(&2));
        assert!(tile.writes.iter().all(|&w| w == 3 || map.is_scratch(w)));
    }

    #[test]
    fn arity_and_operand_errors() {
        let map = default_register_map();
        let t = TileTemplate::new(Family::Alu(TileAluOp::Add), Width::W64);
        assert!(matches!(specialize(&t, &[TileOperand::Imm], &map), Err(TileError::ArityMismatch { .. })));
        let bad = [TileOperand::Reg(Reg::Rax), TileOperand::Reg(Reg::Rbx), TileOperand::Imm];
        assert!(matches!(specialize(&t, &bad, &map), Err(TileError::Unmapped { .. })));
    }

    #[test]
    fn bank_has_256_add64_register_tiles() {
        let bank = TileBank::global();
        let n = bank
            .tiles()
            .filter(|t| {
                t.template == TileTemplate::new(Family::Alu(TileAluOp::Add), Width::W64)
                    && t.operands.iter().all(|o| matches!(o, TileOperand::Reg(_)))
            })
            .count();
        assert_eq!(n, 256);
        assert!(bank.get("ADD64_RCX_RCX_RDX").is_some());
        assert!(bank.get("ADD64_RCX_RDX_RDX").is_none());
    }

    #[test]
    fn flag_tile_only_when_live() {
        let bank = TileBank::global();
        let insn = decode(&[0x48, 0x01, 0xD1], 0).unwrap();
        let names = |live| lookup_tiles(bank, &insn, live).unwrap().iter().map(|u| u.tile.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(FlagMask::empty()), ["ADD64_RCX_RCX_RDX"]);
        assert_eq!(names(FlagMask::ZF), ["FLAGS_ADD64_RCX_RDX", "ADD64_RCX_RCX_RDX"]);
    }

    #[test]
    fn memory_source_gets_address_and_load() {
        let bank = TileBank::global();
        // mov rax, [rbx + rcx*4 + 0x10]
        let insn = decode(&[0x48, 0x8B, 0x44, 0x8B, 0x10], 0).unwrap();
        let uses = lookup_tiles(bank, &insn, FlagMask::all()).unwrap();
        let names: Vec<_> = uses.iter().map(|u| u.tile.name.as_str()).collect();
        assert_eq!(names, ["ADDR_RBX_RCXx4", "LOAD64_RAX"]);
        assert_eq!(uses[0].hole, Some(HoleValue::Value(0x10)));
    }
}
