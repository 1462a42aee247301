//! The T64 target: instruction set, interpreter and container format.

pub mod container;

use std::fmt;
use std::sync::Arc;

use crate::isa::interp::{ExecutionResult, MachineState, RunStatus, StepOutcome, TrapReason};
use crate::isa::memory::{HostCall, Memory};
use crate::isa::{FlagMask, Reg};
use crate::regmap::{default_register_map, RegisterMap, TARGET_REGS};
use crate::translate::TranslatedImage;

pub use container::{deserialize, serialize, ContainerError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Ldi = 0,
    Movr,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Not,
    Shl,
    Shr,
    Addi,
    Load1,
    Load4,
    Load8,
    Store1,
    Store4,
    Store8,
    B,
    Bnez,
    Beqz,
    Xlate,
    Br,
    Host,
    Trap,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 25] = [
        Opcode::Ldi,
        Opcode::Movr,
        Opcode::Add,
        Opcode::Sub,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Not,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Addi,
        Opcode::Load1,
        Opcode::Load4,
        Opcode::Load8,
        Opcode::Store1,
        Opcode::Store4,
        Opcode::Store8,
        Opcode::B,
        Opcode::Bnez,
        Opcode::Beqz,
        Opcode::Xlate,
        Opcode::Br,
        Opcode::Host,
        Opcode::Trap,
        Opcode::Halt,
    ];

    pub fn from_u8(byte: u8) -> Option<Opcode> {
        Opcode::ALL.get(byte as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Ldi => "ldi",
            Opcode::Movr => "movr",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Not => "not",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Addi => "addi",
            Opcode::Load1 => "load1",
            Opcode::Load4 => "load4",
            Opcode::Load8 => "load8",
            Opcode::Store1 => "store1",
            Opcode::Store4 => "store4",
            Opcode::Store8 => "store8",
            Opcode::B => "b",
            Opcode::Bnez => "bnez",
            Opcode::Beqz => "beqz",
            Opcode::Xlate => "xlate",
            Opcode::Br => "br",
            Opcode::Host => "host",
            Opcode::Trap => "trap",
            Opcode::Halt => "halt",
        }
    }

    /// Which of (rd, rn, rm, imm) the opcode uses.
    pub fn fields(self) -> (bool, bool, bool, bool) {
        use Opcode::*;
        match self {
            Ldi => (true, false, false, true),
            Movr | Not | Xlate => (true, true, false, false),
            Add | Sub | And | Or | Xor => (true, true, true, false),
            Shl | Shr | Addi | Load1 | Load4 | Load8 => (true, true, false, true),
            Store1 | Store4 | Store8 => (false, true, true, true),
            B | Host | Trap => (false, false, false, true),
            Bnez | Beqz => (false, true, false, true),
            Br | Halt => (false, true, false, false),
        }
    }

    pub fn is_branch(self) -> bool {
        matches!(self, Opcode::B | Opcode::Bnez | Opcode::Beqz)
    }
}

/// One T64 instruction. Fields an opcode does not use are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TargetInstruction {
    pub opcode: Opcode,
    pub rd: u8,
    pub rn: u8,
    pub rm: u8,
    pub imm: u64,
}

impl TargetInstruction {
    fn new(opcode: Opcode, rd: u8, rn: u8, rm: u8, imm: u64) -> Self {
        TargetInstruction { opcode, rd, rn, rm, imm }
    }

    pub fn ldi(rd: u8, imm: u64) -> Self {
        Self::new(Opcode::Ldi, rd, 0, 0, imm)
    }

    pub fn movr(rd: u8, rn: u8) -> Self {
        Self::new(Opcode::Movr, rd, rn, 0, 0)
    }

    /// Three-register ALU operation (`add`, `sub`, `and`, `or`, `xor`).
    pub fn alu(opcode: Opcode, rd: u8, rn: u8, rm: u8) -> Self {
        debug_assert!(matches!(opcode, Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor));
        Self::new(opcode, rd, rn, rm, 0)
    }

    pub fn not(rd: u8, rn: u8) -> Self {
        Self::new(Opcode::Not, rd, rn, 0, 0)
    }

    pub fn shl(rd: u8, rn: u8, amount: u32) -> Self {
        Self::new(Opcode::Shl, rd, rn, 0, (amount & 63) as u64)
    }

    pub fn shr(rd: u8, rn: u8, amount: u32) -> Self {
        Self::new(Opcode::Shr, rd, rn, 0, (amount & 63) as u64)
    }

    pub fn addi(rd: u8, rn: u8, imm: i64) -> Self {
        Self::new(Opcode::Addi, rd, rn, 0, imm as u64)
    }

    /// `rd := mem[rn + offset]`, zero-extended from `size` bytes.
    pub fn load(size: usize, rd: u8, rn: u8, offset: i64) -> Self {
        let op = match size {
            1 => Opcode::Load1,
            4 => Opcode::Load4,
            _ => Opcode::Load8,
        };
        Self::new(op, rd, rn, 0, offset as u64)
    }

    /// `mem[rn + offset] := rm`, truncated to `size` bytes.
    pub fn store(size: usize, rn: u8, offset: i64, rm: u8) -> Self {
        let op = match size {
            1 => Opcode::Store1,
            4 => Opcode::Store4,
            _ => Opcode::Store8,
        };
        Self::new(op, 0, rn, rm, offset as u64)
    }

    pub fn b(target: u64) -> Self {
        Self::new(Opcode::B, 0, 0, 0, target)
    }

    pub fn bnez(rn: u8, target: u64) -> Self {
        Self::new(Opcode::Bnez, 0, rn, 0, target)
    }

    pub fn beqz(rn: u8, target: u64) -> Self {
        Self::new(Opcode::Beqz, 0, rn, 0, target)
    }

    pub fn xlate(rd: u8, rn: u8) -> Self {
        Self::new(Opcode::Xlate, rd, rn, 0, 0)
    }

    pub fn br(rn: u8) -> Self {
        Self::new(Opcode::Br, 0, rn, 0, 0)
    }

    pub fn host(call: HostCall) -> Self {
        Self::new(Opcode::Host, 0, 0, 0, call.number())
    }

    pub fn trap(reason: TrapReason) -> Self {
        Self::new(Opcode::Trap, 0, 0, 0, reason.code())
    }

    pub fn halt(rn: u8) -> Self {
        Self::new(Opcode::Halt, 0, rn, 0, 0)
    }

    /// Whether unused fields are zero and register fields in range.
    pub fn is_canonical(&self) -> bool {
        let (d, n, m, i) = self.opcode.fields();
        let reg_ok = |used: bool, r: u8| if used { (r as usize) < TARGET_REGS } else { r == 0 };
        reg_ok(d, self.rd)
            && reg_ok(n, self.rn)
            && reg_ok(m, self.rm)
            && (i || self.imm == 0)
            && (!matches!(self.opcode, Opcode::Shl | Opcode::Shr) || self.imm < 64)
    }

    /// Target registers read.
    pub fn reads(&self) -> Vec<u8> {
        let (_, n, m, _) = self.opcode.fields();
        let mut regs = Vec::new();
        if n {
            regs.push(self.rn);
        }
        if m {
            regs.push(self.rm);
        }
        regs
    }

    /// Target register written, if any.
    pub fn writes(&self) -> Option<u8> {
        let (d, ..) = self.opcode.fields();
        d.then_some(self.rd)
    }

    /// Renders the instruction with register names from `map`.
    pub fn display_with(&self, map: &RegisterMap) -> String {
        use Opcode::*;
        let r = |t: u8| map.name(t).to_ascii_lowercase();
        let imm = self.imm as i64;
        let op = self.opcode.name();
        match self.opcode {
            Ldi => format!("{op} {}, {:#x}", r(self.rd), self.imm),
            Movr | Not | Xlate => format!("{op} {}, {}", r(self.rd), r(self.rn)),
            Add | Sub | And | Or | Xor => format!("{op} {}, {}, {}", r(self.rd), r(self.rn), r(self.rm)),
            Shl | Shr => format!("{op} {}, {}, {}", r(self.rd), r(self.rn), self.imm),
            Addi => format!("{op} {}, {}, {imm}", r(self.rd), r(self.rn)),
            Load1 | Load4 | Load8 => format!("{op} {}, [{}{imm:+}]", r(self.rd), r(self.rn)),
            Store1 | Store4 | Store8 => format!("{op} [{}{imm:+}], {}", r(self.rn), r(self.rm)),
            B => format!("{op} @{}", self.imm),
            Bnez | Beqz => format!("{op} {}, @{}", r(self.rn), self.imm),
            Br | Halt => format!("{op} {}", r(self.rn)),
            Host | Trap => format!("{op} {}", self.imm),
        }
    }
}

impl fmt::Display for TargetInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_with(&default_register_map()))
    }
}

/// Execution state of the target machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetState {
    pub regs: [u64; TARGET_REGS],
    pub pc: usize,
    pub mem: Memory,
    pub output: Vec<u8>,
    pub hostcall_base: u64,
}

impl TargetState {
    /// The target state corresponding to `source`, with `pc` at the landing
    /// pad of the source's current offset.
    ///
    /// Returns `None` when the source `rip` has no landing pad.
    pub fn from_source(source: &MachineState, image: &TranslatedImage, map: &RegisterMap) -> Option<TargetState> {
        let offset = source.offset()?;
        let pc = usize::try_from(*image.table.get(offset)?).ok()?;
        let mut regs = [0; TARGET_REGS];
        for reg in Reg::ALL {
            regs[map.target(reg) as usize] = source.reg(reg);
        }
        regs[map.flags_reg() as usize] = source.flags.packed();
        Some(TargetState {
            regs,
            pc,
            mem: source.mem.clone(),
            output: source.output.clone(),
            hostcall_base: image.hostcall_base,
        })
    }

    pub fn gpr(&self, map: &RegisterMap) -> [u64; 16] {
        let mut gpr = [0; 16];
        for reg in Reg::ALL {
            gpr[reg.index()] = self.regs[map.target(reg) as usize];
        }
        gpr
    }

    pub fn flags(&self, map: &RegisterMap) -> FlagMask {
        FlagMask::from_packed(self.regs[map.flags_reg() as usize])
    }

    /// Result in source terms, through the inverse register map.
    pub fn result(&self, map: &RegisterMap, status: RunStatus, steps: u64) -> ExecutionResult {
        ExecutionResult {
            gpr: self.gpr(map),
            flags: self.flags(map),
            output: self.output.clone(),
            status,
            steps,
            stack: self.mem.stack().to_vec(),
        }
    }
}

/// Executes the instruction at `state.pc`.
///
/// `host_arg` is the target register read by `HOST` (the mapped RDI).
/// A trapping instruction leaves the state unchanged.
pub fn exec_step(state: &mut TargetState, code: &[TargetInstruction], table: &[i64], host_arg: u8) -> StepOutcome {
    let Some(insn) = code.get(state.pc) else {
        return StepOutcome::Trapped(TrapReason::UntranslatedTarget);
    };
    let regs = &mut state.regs;
    let rn = regs[insn.rn as usize];
    let rm = regs[insn.rm as usize];
    let mut next = state.pc + 1;
    let mut set = |value: u64| regs[insn.rd as usize] = value;
    match insn.opcode {
        Opcode::Ldi => set(insn.imm),
        Opcode::Movr => set(rn),
        Opcode::Add => set(rn.wrapping_add(rm)),
        Opcode::Sub => set(rn.wrapping_sub(rm)),
        Opcode::And => set(rn & rm),
        Opcode::Or => set(rn | rm),
        Opcode::Xor => set(rn ^ rm),
        Opcode::Not => set(!rn),
        Opcode::Shl => set(rn << (insn.imm & 63)),
        Opcode::Shr => set(rn >> (insn.imm & 63)),
        Opcode::Addi => set(rn.wrapping_add(insn.imm)),
        Opcode::Load1 | Opcode::Load4 | Opcode::Load8 => {
            let size = match insn.opcode {
                Opcode::Load1 => 1,
                Opcode::Load4 => 4,
                _ => 8,
            };
            match state.mem.read(rn.wrapping_add(insn.imm), size) {
                Ok(value) => set(value),
                Err(fault) => return StepOutcome::Trapped(fault.into()),
            }
        }
        Opcode::Store1 | Opcode::Store4 | Opcode::Store8 => {
            let size = match insn.opcode {
                Opcode::Store1 => 1,
                Opcode::Store4 => 4,
                _ => 8,
            };
            if let Err(fault) = state.mem.write(rn.wrapping_add(insn.imm), size, rm) {
                return StepOutcome::Trapped(fault.into());
            }
        }
        Opcode::B => next = insn.imm as usize,
        Opcode::Bnez => {
            if rn != 0 {
                next = insn.imm as usize;
            }
        }
        Opcode::Beqz => {
            if rn == 0 {
                next = insn.imm as usize;
            }
        }
        Opcode::Xlate => {
            let base = state.mem.image_base();
            let entry = rn.checked_sub(base).and_then(|o| table.get(usize::try_from(o).ok()?));
            match entry {
                Some(&index) if index >= 0 => set(index as u64),
                _ => return StepOutcome::Trapped(TrapReason::UntranslatedTarget),
            }
        }
        Opcode::Br => next = rn as usize,
        Opcode::Host => {
            let Some(call) = HostCall::from_number(insn.imm) else {
                return StepOutcome::Trapped(TrapReason::UntranslatedTarget);
            };
            let arg = regs[host_arg as usize];
            if call == HostCall::Exit {
                return StepOutcome::Halted(arg);
            }
            call.write_output(arg, &mut state.output);
            state.pc = next;
            return StepOutcome::Host(call);
        }
        Opcode::Trap => {
            return StepOutcome::Trapped(TrapReason::from_code(insn.imm).unwrap_or(TrapReason::InvalidDecode));
        }
        Opcode::Halt => return StepOutcome::Halted(rn),
    }
    state.pc = next;
    StepOutcome::Continue
}

/// Runs `state` until it halts, traps or `fuel` target instructions have run.
pub fn run_state(state: &mut TargetState, image: &TranslatedImage, map: &RegisterMap, fuel: u64) -> ExecutionResult {
    let host_arg = map.target(Reg::Rdi);
    let mut steps = 0;
    while steps < fuel {
        steps += 1;
        match exec_step(state, &image.target_code, &image.table, host_arg) {
            StepOutcome::Continue | StepOutcome::Host(_) => {}
            StepOutcome::Halted(code) => return state.result(map, RunStatus::Halted(code), steps),
            StepOutcome::Trapped(reason) => return state.result(map, RunStatus::Trapped(reason), steps),
        }
    }
    state.result(map, RunStatus::FuelExhausted, steps)
}

/// The source machine state a translated run starts from: the same state
/// the interpreter would start from at `entry`.
pub fn initial_source_state(image: &TranslatedImage, entry: usize, inputs: &[(Reg, u64)]) -> MachineState {
    let mut state = MachineState::new(Arc::clone(&image.source_image), entry);
    state.hostcall_base = image.hostcall_base;
    for &(reg, value) in inputs {
        state.set_reg(reg, value);
    }
    state
}

/// Runs a translated image from its entry point with the given register
/// inputs, under the same initial conditions as `run_source`.
pub fn run_translated(image: &TranslatedImage, inputs: &[(Reg, u64)], fuel: u64) -> ExecutionResult {
    let map = default_register_map();
    let source = initial_source_state(image, image.entry, inputs);
    match TargetState::from_source(&source, image, &map) {
        Some(mut state) => run_state(&mut state, image, &map, fuel),
        None => source.result(RunStatus::Trapped(TrapReason::UntranslatedTarget), 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::memory::{HOSTCALL_BASE, IMAGE_BASE};

    fn image_with(code: Vec<TargetInstruction>, table: Vec<i64>) -> TranslatedImage {
        TranslatedImage {
            target_code: code,
            table,
            source_image: Arc::from(vec![0x90u8; 4]),
            image_base: IMAGE_BASE,
            entry: 0,
            hostcall_base: HOSTCALL_BASE,
        }
    }

    fn state(image: &TranslatedImage) -> TargetState {
        let src = initial_source_state(image, 0, &[]);
        TargetState::from_source(&src, image, &default_register_map()).unwrap()
    }

    #[test]
    fn xlate_reads_the_table() {
        let image = image_with(vec![TargetInstruction::xlate(15, 16)], vec![7, -1, 3, 3]);
        let mut s = state(&image);
        s.pc = 0;
        s.regs[16] = IMAGE_BASE;
        assert_eq!(exec_step(&mut s, &image.target_code, &image.table, 0), StepOutcome::Continue);
        assert_eq!(s.regs[15], 7);
    }

    #[test]
    fn xlate_rejects_out_of_image_and_sentinel() {
        let image = image_with(vec![TargetInstruction::xlate(15, 16)], vec![0, -1, 0, 0]);
        for addr in [IMAGE_BASE - 8, IMAGE_BASE + 1, IMAGE_BASE + 4] {
            let mut s = state(&image);
            s.regs[16] = addr;
            let before = s.clone();
            let out = exec_step(&mut s, &image.target_code, &image.table, 0);
            assert_eq!(out, StepOutcome::Trapped(TrapReason::UntranslatedTarget));
            assert_eq!(s, before);
        }
    }

    #[test]
    fn loads_zero_extend_and_stores_truncate() {
        let code = vec![
            TargetInstruction::ldi(1, 0x1122_3344_5566_7788),
            TargetInstruction::ldi(2, 0x7F_FF00),
            TargetInstruction::store(4, 2, 0, 1),
            TargetInstruction::load(8, 3, 2, 0),
            TargetInstruction::load(1, 4, 2, 1),
        ];
        let image = image_with(code, vec![0; 4]);
        let mut s = state(&image);
        for _ in 0..5 {
            assert_eq!(exec_step(&mut s, &image.target_code, &image.table, 0), StepOutcome::Continue);
        }
        assert_eq!(s.regs[3], 0x5566_7788);
        assert_eq!(s.regs[4], 0x77);
    }

    #[test]
    fn host_exit_reads_mapped_rdi() {
        let image = image_with(vec![TargetInstruction::host(HostCall::Exit)], vec![0; 4]);
        let result = run_translated(&image, &[(Reg::Rdi, 42)], 10);
        assert_eq!(result.status, RunStatus::Halted(42));
    }

    #[test]
    fn canonical_form() {
        assert!(TargetInstruction::ldi(3, 9).is_canonical());
        let mut bad = TargetInstruction::b(4);
        bad.rd = 1;
        assert!(!bad.is_canonical());
        let mut shift = TargetInstruction::shl(1, 1, 3);
        shift.imm = 64;
        assert!(!shift.is_canonical());
    }
}
