//! Reference interpreter for the source subset. This is the correctness
//! oracle that translated execution is compared against.

use std::fmt;
use std::sync::Arc;

use super::flags::{compute_flags, FlagKind, FlagMask};
use super::memory::{HostCall, MemFault, Memory, HOSTCALL_BASE, IMAGE_BASE, INITIAL_RSP};
use super::{decode, AluOp, DecodedInstruction, Mnemonic, Operand, Reg, Width};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrapReason {
    /// Control reached an offset whose bytes do not decode.
    InvalidDecode,
    /// INT3.
    Breakpoint,
    /// Control transfer to an address outside the image that is not a hostcall slot.
    UntranslatedTarget,
    WriteToImage,
    BadMemory,
}

impl TrapReason {
    /// Code carried by the target `TRAP` instruction.
    pub fn code(self) -> u64 {
        match self {
            TrapReason::InvalidDecode => 1,
            TrapReason::Breakpoint => 2,
            TrapReason::UntranslatedTarget => 3,
            TrapReason::WriteToImage => 4,
            TrapReason::BadMemory => 5,
        }
    }

    pub fn from_code(code: u64) -> Option<TrapReason> {
        [
            TrapReason::InvalidDecode,
            TrapReason::Breakpoint,
            TrapReason::UntranslatedTarget,
            TrapReason::WriteToImage,
            TrapReason::BadMemory,
        ]
        .into_iter()
        .find(|t| t.code() == code)
    }
}

impl From<MemFault> for TrapReason {
    fn from(fault: MemFault) -> Self {
        match fault {
            MemFault::WriteToImage => TrapReason::WriteToImage,
            MemFault::OutOfRange => TrapReason::BadMemory,
        }
    }
}

/// Outcome of a single interpreter step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// A write hostcall ran and control returned to the popped address.
    Host(HostCall),
    Halted(u64),
    Trapped(TrapReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Halted(u64),
    Trapped(TrapReason),
    FuelExhausted,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Halted(code) => write!(f, "halted({code:#x})"),
            RunStatus::Trapped(reason) => write!(f, "trapped({reason:?})"),
            RunStatus::FuelExhausted => f.write_str("fuel-exhausted"),
        }
    }
}

/// Observable end state of a run, comparable across the interpreter and
/// the target VM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionResult {
    pub gpr: [u64; 16],
    pub flags: FlagMask,
    pub output: Vec<u8>,
    pub status: RunStatus,
    /// Instructions executed; source instructions for the interpreter,
    /// target instructions for the VM. Not part of the comparison.
    pub steps: u64,
    /// The writable (stack) memory region.
    pub stack: Vec<u8>,
}

impl ExecutionResult {
    pub fn rax(&self) -> u64 {
        self.gpr[Reg::Rax.index()]
    }

    /// First observable difference from `other`, ignoring step counts.
    pub fn divergence(&self, other: &ExecutionResult) -> Option<String> {
        if self.status != other.status {
            return Some(format!("status {} vs {}", self.status, other.status));
        }
        for reg in Reg::ALL {
            let (a, b) = (self.gpr[reg.index()], other.gpr[reg.index()]);
            if a != b {
                return Some(format!("{reg} {a:#x} vs {b:#x}"));
            }
        }
        if self.flags != other.flags {
            return Some(format!("flags [{}] vs [{}]", self.flags.names(), other.flags.names()));
        }
        if self.output != other.output {
            return Some(format!("output {:?} vs {:?}", String::from_utf8_lossy(&self.output), String::from_utf8_lossy(&other.output)));
        }
        if let Some(i) = self.stack.iter().zip(&other.stack).position(|(a, b)| a != b) {
            return Some(format!(
                "stack byte {:#x}: {:#x} vs {:#x}",
                super::memory::STACK_BASE + i as u64,
                self.stack[i],
                other.stack[i]
            ));
        }
        None
    }
}

/// Architectural state of the emulated source machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub gpr: [u64; 16],
    pub flags: FlagMask,
    pub rip: u64,
    pub mem: Memory,
    pub output: Vec<u8>,
    pub hostcall_base: u64,
}

impl MachineState {
    /// Fresh state at `entry`: registers and flags zero, RSP at the initial
    /// stack top holding the exit slot as return address.
    pub fn new(image: Arc<[u8]>, entry: usize) -> MachineState {
        let mut mem = Memory::new(image, IMAGE_BASE);
        mem.write(INITIAL_RSP, 8, HostCall::Exit.slot_address(HOSTCALL_BASE)).expect("stack is mapped");
        let mut gpr = [0; 16];
        gpr[Reg::Rsp.index()] = INITIAL_RSP;
        MachineState {
            gpr,
            flags: FlagMask::empty(),
            rip: IMAGE_BASE + entry as u64,
            mem,
            output: Vec::new(),
            hostcall_base: HOSTCALL_BASE,
        }
    }

    pub fn reg(&self, reg: Reg) -> u64 {
        self.gpr[reg.index()]
    }

    pub fn set_reg(&mut self, reg: Reg, value: u64) {
        self.gpr[reg.index()] = value;
    }

    pub fn image_base(&self) -> u64 {
        self.mem.image_base()
    }

    /// Image offset of `rip`, when it points into the image.
    pub fn offset(&self) -> Option<usize> {
        self.mem.in_image(self.rip).then(|| (self.rip - self.image_base()) as usize)
    }

    pub fn result(&self, status: RunStatus, steps: u64) -> ExecutionResult {
        ExecutionResult {
            gpr: self.gpr,
            flags: self.flags,
            output: self.output.clone(),
            status,
            steps,
            stack: self.mem.stack().to_vec(),
        }
    }

    fn read_operand(&self, op: &Operand, width: Width, next_rip: u64) -> Result<u64, TrapReason> {
        Ok(match op {
            Operand::Reg(r) => self.reg(*r) & width.mask(),
            Operand::Imm(v) => *v as u64 & width.mask(),
            Operand::Mem(m) => self.mem.read(m.effective_address(&self.gpr, next_rip), width.bytes())?,
        })
    }

    fn push(&mut self, value: u64) -> Result<(), TrapReason> {
        let sp = self.reg(Reg::Rsp).wrapping_sub(8);
        self.mem.write(sp, 8, value)?;
        self.set_reg(Reg::Rsp, sp);
        Ok(())
    }

    fn pop(&mut self) -> Result<u64, TrapReason> {
        let sp = self.reg(Reg::Rsp);
        let value = self.mem.read(sp, 8)?;
        self.set_reg(Reg::Rsp, sp.wrapping_add(8));
        Ok(value)
    }
}

/// Destination write performed after all reads succeeded.
enum Writeback {
    None,
    Reg(Reg, u64),
    Mem(u64, u64),
}

/// Executes one instruction (or one hostcall) at `state.rip`.
///
/// A trapping instruction leaves the state as it was before the step.
pub fn step(state: &mut MachineState) -> StepOutcome {
    if let Some(host) = HostCall::at_address(state.rip, state.hostcall_base) {
        let arg = state.reg(Reg::Rdi);
        if host == HostCall::Exit {
            return StepOutcome::Halted(arg);
        }
        host.write_output(arg, &mut state.output);
        return match state.pop() {
            Ok(ret) => {
                state.rip = ret;
                StepOutcome::Host(host)
            }
            Err(trap) => StepOutcome::Trapped(trap),
        };
    }
    let Some(offset) = state.offset() else {
        return StepOutcome::Trapped(TrapReason::UntranslatedTarget);
    };
    let insn = match decode(state.mem.image(), offset) {
        Ok(insn) => insn,
        Err(_) => return StepOutcome::Trapped(TrapReason::InvalidDecode),
    };
    match execute(state, &insn) {
        Ok(()) => StepOutcome::Continue,
        Err(trap) => StepOutcome::Trapped(trap),
    }
}

fn execute(state: &mut MachineState, insn: &DecodedInstruction) -> Result<(), TrapReason> {
    let next = state.rip + insn.length as u64;
    let width = insn.width;
    let ops = &insn.operands;
    let base = state.image_base();
    let mut flags = None;
    let mut rip = next;

    let writeback = |op: &Operand, value: u64, state: &MachineState| -> Writeback {
        match op {
            Operand::Reg(r) => Writeback::Reg(*r, width.merge(state.reg(*r), value)),
            Operand::Mem(m) => Writeback::Mem(m.effective_address(&state.gpr, next), value),
            Operand::Imm(_) => unreachable!("immediate destination"),
        }
    };

    let wb = match insn.mnemonic {
        Mnemonic::Mov => {
            let value = state.read_operand(&ops[1], width, next)?;
            writeback(&ops[0], value, state)
        }
        Mnemonic::Lea => {
            let addr = ops[1].mem().unwrap().effective_address(&state.gpr, next);
            writeback(&ops[0], addr & width.mask(), state)
        }
        Mnemonic::Alu(op) => {
            let a = state.read_operand(&ops[0], width, next)?;
            let b = state.read_operand(&ops[1], width, next)?;
            let (result, carry) = match op {
                AluOp::Add => {
                    let full = a as u128 + b as u128;
                    (full as u64 & width.mask(), (full >> width.bits()) & 1 != 0)
                }
                AluOp::Sub | AluOp::Cmp => (a.wrapping_sub(b) & width.mask(), a < b),
                _ => (op.apply(a, b), false),
            };
            flags = Some(compute_flags(op.flag_kind(), width, a, b, result, carry));
            if op == AluOp::Cmp {
                Writeback::None
            } else {
                writeback(&ops[0], result, state)
            }
        }
        Mnemonic::Test => {
            let a = state.read_operand(&ops[0], width, next)?;
            let b = state.read_operand(&ops[1], width, next)?;
            flags = Some(compute_flags(FlagKind::Logic, width, a, b, a & b, false));
            Writeback::None
        }
        Mnemonic::Inc | Mnemonic::Dec => {
            let a = state.read_operand(&ops[0], width, next)?;
            let (kind, result) = if insn.mnemonic == Mnemonic::Inc {
                (FlagKind::Inc, a.wrapping_add(1))
            } else {
                (FlagKind::Dec, a.wrapping_sub(1))
            };
            let result = result & width.mask();
            flags = Some(compute_flags(kind, width, a, 1, result, false));
            writeback(&ops[0], result, state)
        }
        Mnemonic::Shl => {
            let a = state.read_operand(&ops[0], width, next)?;
            let count = ops[1].imm().unwrap() as u32;
            let wide = (a as u128) << count;
            let result = wide as u64 & width.mask();
            let carry = (wide >> width.bits()) & 1 != 0;
            flags = Some(compute_flags(FlagKind::Shl { count }, width, a, count as u64, result, carry));
            writeback(&ops[0], result, state)
        }
        Mnemonic::Push => {
            let value = state.reg(ops[0].reg().unwrap());
            state.push(value)?;
            Writeback::None
        }
        Mnemonic::Pop => {
            let value = state.pop()?;
            Writeback::Reg(ops[0].reg().unwrap(), value)
        }
        Mnemonic::Call => {
            let target = match &ops[0] {
                Operand::Reg(r) => state.reg(*r),
                op => base.wrapping_add(insn.end() as u64).wrapping_add(op.imm().unwrap() as u64),
            };
            state.push(next)?;
            rip = target;
            Writeback::None
        }
        Mnemonic::Ret => {
            rip = state.pop()?;
            Writeback::None
        }
        Mnemonic::Jmp => {
            rip = match &ops[0] {
                Operand::Reg(r) => state.reg(*r),
                op => next.wrapping_add(op.imm().unwrap() as u64),
            };
            Writeback::None
        }
        Mnemonic::Jcc(cond) => {
            if cond.holds(state.flags) {
                rip = next.wrapping_add(ops[0].imm().unwrap() as u64);
            }
            Writeback::None
        }
        Mnemonic::Nop => Writeback::None,
        Mnemonic::Int3 => return Err(TrapReason::Breakpoint),
    };

    match wb {
        Writeback::None => {}
        Writeback::Reg(r, v) => state.set_reg(r, v),
        Writeback::Mem(addr, v) => state.mem.write(addr, width.bytes(), v)?,
    }
    if let Some(update) = flags {
        state.flags = update.apply(state.flags);
    }
    state.rip = rip;
    Ok(())
}

/// Steps `state` until it halts, traps or `fuel` steps have run.
pub fn run(state: &mut MachineState, fuel: u64) -> ExecutionResult {
    let mut steps = 0;
    while steps < fuel {
        steps += 1;
        match step(state) {
            StepOutcome::Continue | StepOutcome::Host(_) => {}
            StepOutcome::Halted(code) => return state.result(RunStatus::Halted(code), steps),
            StepOutcome::Trapped(reason) => return state.result(RunStatus::Trapped(reason), steps),
        }
    }
    state.result(RunStatus::FuelExhausted, steps)
}

/// Runs `image` from `entry` with the given register inputs.
pub fn run_source(image: &[u8], entry: usize, inputs: &[(Reg, u64)], fuel: u64) -> ExecutionResult {
    let mut state = MachineState::new(Arc::from(image), entry);
    for &(reg, value) in inputs {
        state.set_reg(reg, value);
    }
    run(&mut state, fuel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_for(bytes: &[u8]) -> MachineState {
        MachineState::new(Arc::from(bytes), 0)
    }

    #[test]
    fn xor_eax_zero_extends() {
        let mut s = state_for(&[0x31, 0xC0]);
        s.set_reg(Reg::Rax, 0xFFFF_FFFF_1234_5678);
        assert_eq!(step(&mut s), StepOutcome::Continue);
        assert_eq!(s.reg(Reg::Rax), 0);
        assert!(s.flags.contains(FlagMask::ZF));
    }

    #[test]
    fn mov_al_keeps_upper_bits() {
        let mut s = state_for(&[0xB0, 0xC3]);
        s.set_reg(Reg::Rax, 0x1122_3344_5566_7700);
        step(&mut s);
        assert_eq!(s.reg(Reg::Rax), 0x1122_3344_5566_77C3);
    }

    #[test]
    fn call_pushes_return_address() {
        // nop x7; call +0 (lands on the next instruction at offset 12)
        let mut bytes = vec![0x90; 7];
        bytes.extend([0xE8, 0, 0, 0, 0, 0x90]);
        let mut s = state_for(&bytes);
        s.rip = IMAGE_BASE + 7;
        step(&mut s);
        let top = s.mem.read(s.reg(Reg::Rsp), 8).unwrap();
        assert_eq!(top, IMAGE_BASE + 7 + 5);
        assert_eq!(s.rip, IMAGE_BASE + 12);
    }

    #[test]
    fn trapping_store_leaves_state_untouched() {
        // add [rip - 6], eax: a store into the image
        let mut s = state_for(&[0x01, 0x05, 0xFA, 0xFF, 0xFF, 0xFF]);
        s.set_reg(Reg::Rax, 1);
        let before = s.clone();
        assert_eq!(step(&mut s), StepOutcome::Trapped(TrapReason::WriteToImage));
        assert_eq!(s, before);
    }

    #[test]
    fn ret_to_initial_frame_exits() {
        // ret
        let r = run_source(&[0xC3], 0, &[(Reg::Rdi, 42)], 10);
        assert_eq!(r.status, RunStatus::Halted(42));
        assert_eq!(r.steps, 2);
    }

    #[test]
    fn falling_off_the_image_traps() {
        let r = run_source(&[0x90], 0, &[], 10);
        assert_eq!(r.status, RunStatus::Trapped(TrapReason::UntranslatedTarget));
    }

    #[test]
    fn fuel_exhaustion_is_reported() {
        // jmp $
        let r = run_source(&[0xEB, 0xFE], 0, &[], 100);
        assert_eq!(r.status, RunStatus::FuelExhausted);
        assert_eq!(r.steps, 100);
    }
}
