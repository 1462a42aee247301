//! Target instruction synthesis for each tile family.

use crate::isa::Width;
use crate::regmap::RegisterMap;
use crate::vm::{Opcode, TargetInstruction as I};

use super::{AddrShape, Family, FlagOp, TileAluOp};

/// A resolved tile operand: a target register or the immediate hole.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Arg {
    R(u8),
    Imm,
}

pub(crate) struct Emitter<'m> {
    map: &'m RegisterMap,
    pub code: Vec<I>,
    pub hole: Option<usize>,
}

impl<'m> Emitter<'m> {
    pub fn new(map: &'m RegisterMap) -> Self {
        Emitter { map, code: Vec::new(), hole: None }
    }

    fn s(&self, k: usize) -> u8 {
        self.map.scratch(k)
    }

    fn f(&self) -> u8 {
        self.map.flags_reg()
    }

    fn push(&mut self, insn: I) {
        self.code.push(insn);
    }

    /// Emits an instruction whose `imm` is filled in at lowering time.
    fn push_hole(&mut self, insn: I) {
        debug_assert!(self.hole.is_none(), "one hole per tile");
        self.hole = Some(self.code.len());
        self.code.push(insn);
    }

    /// Register holding operand `b`, materializing the immediate into
    /// scratch `k` if needed.
    fn operand(&mut self, b: Arg, k: usize) -> u8 {
        match b {
            Arg::R(r) => r,
            Arg::Imm => {
                let t = self.s(k);
                self.push_hole(I::ldi(t, 0));
                t
            }
        }
    }

    /// Replaces the low byte of `dst` with the low byte of `t`, whose
    /// upper bits must already be clear.
    fn merge_low8(&mut self, dst: u8, t: u8) {
        self.push(I::shr(dst, dst, 8));
        self.push(I::shl(dst, dst, 8));
        self.push(I::alu(Opcode::Or, dst, dst, t));
    }

    /// Runs `compute(into)` and writes the result to `dst` following the
    /// partial-register rules of `width`.
    fn write_result(&mut self, width: Width, dst: u8, compute: impl FnOnce(&mut Self, u8)) {
        match width {
            Width::W64 => compute(self, dst),
            Width::W32 => {
                compute(self, dst);
                self.push(I::shl(dst, dst, 32));
                self.push(I::shr(dst, dst, 32));
            }
            Width::W8 => {
                let t = self.s(3);
                compute(self, t);
                self.push(I::shl(t, t, 56));
                self.push(I::shr(t, t, 56));
                self.merge_low8(dst, t);
            }
        }
    }

    fn alu_into(&mut self, op: TileAluOp, into: u8, a: u8, b: Arg) {
        match (op, b) {
            (TileAluOp::Add, Arg::Imm) => self.push_hole(I::addi(into, a, 0)),
            _ => {
                let b = self.operand(b, 4);
                self.push(I::alu(op.opcode(), into, a, b));
            }
        }
    }

    /// Copies bit `k` of `x` to bit `pos` of the flags register. The first
    /// call after a full flag write initializes the register instead of
    /// OR-ing into it.
    fn flag_bit(&mut self, x: u8, k: u32, pos: u32, tmp: u8, first: &mut bool) {
        let f = self.f();
        let dst = if *first { f } else { tmp };
        self.push(I::shl(dst, x, 63 - k));
        self.push(I::shr(dst, dst, 63));
        if pos > 0 {
            self.push(I::shl(dst, dst, pos));
        }
        if *first {
            *first = false;
        } else {
            self.push(I::alu(Opcode::Or, f, f, tmp));
        }
    }

    fn flags(&mut self, op: FlagOp, width: Width, a: u8, b: Option<Arg>) {
        let (r, t0, t1) = (self.s(2), self.s(3), self.s(4));
        let f = self.f();
        let bits = width.bits();
        let msb = bits - 1;
        let b = b.map(|b| self.operand(b, 5));
        let b_reg = || b.expect("binary flag op");

        match op {
            FlagOp::Add => self.push(I::alu(Opcode::Add, r, a, b_reg())),
            FlagOp::Sub => self.push(I::alu(Opcode::Sub, r, a, b_reg())),
            FlagOp::And => self.push(I::alu(Opcode::And, r, a, b_reg())),
            FlagOp::Or => self.push(I::alu(Opcode::Or, r, a, b_reg())),
            FlagOp::Xor => self.push(I::alu(Opcode::Xor, r, a, b_reg())),
            FlagOp::Inc => self.push(I::addi(r, a, 1)),
            FlagOp::Dec => self.push(I::addi(r, a, -1)),
            FlagOp::Shl(c) => self.push(I::shl(r, a, c as u32)),
        }

        let mut first = true;
        if matches!(op, FlagOp::Inc | FlagOp::Dec) {
            // keep CF, clear the rest
            self.push(I::shl(f, f, 63));
            self.push(I::shr(f, f, 63));
            first = false;
        }

        // ZF: bit 63 of ~z & (z - 1) is set iff z == 0
        self.push(I::shl(t0, r, 64 - bits));
        self.push(I::addi(t1, t0, -1));
        self.push(I::not(t0, t0));
        self.push(I::alu(Opcode::And, t0, t0, t1));
        self.flag_bit(t0, 63, 6, t1, &mut first);

        // SF
        self.flag_bit(r, msb, 7, t0, &mut first);

        // PF: fold the low byte to one parity bit
        self.push(I::shr(t0, r, 4));
        self.push(I::alu(Opcode::Xor, t0, t0, r));
        self.push(I::shr(t1, t0, 2));
        self.push(I::alu(Opcode::Xor, t0, t0, t1));
        self.push(I::shr(t1, t0, 1));
        self.push(I::alu(Opcode::Xor, t0, t0, t1));
        self.push(I::not(t0, t0));
        self.flag_bit(t0, 0, 2, t1, &mut first);

        match op {
            FlagOp::Add => {
                let b = b_reg();
                // carry out of bit msb: (a & b) | ((a | b) & ~r)
                self.push(I::alu(Opcode::Or, t0, a, b));
                self.push(I::not(t1, r));
                self.push(I::alu(Opcode::And, t0, t0, t1));
                self.push(I::alu(Opcode::And, t1, a, b));
                self.push(I::alu(Opcode::Or, t0, t0, t1));
                self.flag_bit(t0, msb, 0, t1, &mut first);
                // OF: (a ^ r) & (b ^ r)
                self.push(I::alu(Opcode::Xor, t0, a, r));
                self.push(I::alu(Opcode::Xor, t1, b, r));
                self.push(I::alu(Opcode::And, t0, t0, t1));
                self.flag_bit(t0, msb, 11, t1, &mut first);
                self.af(a, Some(b), &mut first);
            }
            FlagOp::Sub => {
                let b = b_reg();
                // borrow out of bit msb: (~a & b) | ((~a | b) & r)
                self.push(I::not(t0, a));
                self.push(I::alu(Opcode::Or, t1, t0, b));
                self.push(I::alu(Opcode::And, t1, t1, r));
                self.push(I::alu(Opcode::And, t0, t0, b));
                self.push(I::alu(Opcode::Or, t0, t0, t1));
                self.flag_bit(t0, msb, 0, t1, &mut first);
                // OF: (a ^ b) & (a ^ r)
                self.push(I::alu(Opcode::Xor, t0, a, b));
                self.push(I::alu(Opcode::Xor, t1, a, r));
                self.push(I::alu(Opcode::And, t0, t0, t1));
                self.flag_bit(t0, msb, 11, t1, &mut first);
                self.af(a, Some(b), &mut first);
            }
            FlagOp::Inc => {
                self.push(I::not(t0, a));
                self.push(I::alu(Opcode::And, t0, t0, r));
                self.flag_bit(t0, msb, 11, t1, &mut first);
                self.af(a, None, &mut first);
            }
            FlagOp::Dec => {
                self.push(I::not(t0, r));
                self.push(I::alu(Opcode::And, t0, t0, a));
                self.flag_bit(t0, msb, 11, t1, &mut first);
                self.af(a, None, &mut first);
            }
            FlagOp::Shl(c) => {
                let c = c as u32;
                if c <= bits {
                    self.flag_bit(a, bits - c, 0, t0, &mut first);
                }
                if c == 1 {
                    self.push(I::alu(Opcode::Xor, t0, r, a));
                    self.flag_bit(t0, msb, 11, t1, &mut first);
                }
            }
            FlagOp::And | FlagOp::Or | FlagOp::Xor => {}
        }
    }

    /// AF: bit 4 of a ^ b ^ r (b = 1 for INC/DEC, which has bit 4 clear).
    fn af(&mut self, a: u8, b: Option<u8>, first: &mut bool) {
        let (r, t0, t1) = (self.s(2), self.s(3), self.s(4));
        self.push(I::alu(Opcode::Xor, t0, a, r));
        if let Some(b) = b {
            self.push(I::alu(Opcode::Xor, t0, t0, b));
        }
        self.flag_bit(t0, 4, 4, t1, first);
    }
}

/// Emits the code for one tile family over resolved operands.
pub(crate) fn emit(e: &mut Emitter<'_>, family: &Family, width: Width, args: &[Arg]) {
    let reg = |i: usize| match args[i] {
        Arg::R(r) => r,
        Arg::Imm => unreachable!("register operand expected"),
    };
    let s0 = e.s(0);
    match family {
        Family::Alu(op) => {
            let (d, a, b) = (reg(0), reg(1), args[2]);
            if e.map.is_scratch(d) {
                e.alu_into(*op, d, a, b);
            } else {
                e.write_result(width, d, |e, into| e.alu_into(*op, into, a, b));
            }
        }
        Family::Mov => {
            let d = reg(0);
            match (args[1], width) {
                (Arg::Imm, Width::W8) => {
                    let t = e.s(3);
                    e.push_hole(I::ldi(t, 0));
                    e.merge_low8(d, t);
                }
                (Arg::Imm, _) => e.push_hole(I::ldi(d, 0)),
                (Arg::R(s), _) => e.write_result(width, d, |e, into| e.push(I::movr(into, s))),
            }
        }
        Family::Load => {
            let d = reg(0);
            match width {
                Width::W8 if !e.map.is_scratch(d) => {
                    let t = e.s(3);
                    e.push(I::load(1, t, s0, 0));
                    e.merge_low8(d, t);
                }
                _ => e.push(I::load(width.bytes(), d, s0, 0)),
            }
        }
        Family::Store => {
            let src = match args[0] {
                Arg::R(r) => r,
                Arg::Imm => {
                    let t = e.s(1);
                    e.push_hole(I::ldi(t, 0));
                    t
                }
            };
            e.push(I::store(width.bytes(), s0, 0, src));
        }
        Family::Lea => {
            let d = reg(0);
            e.write_result(width, d, |e, into| e.push(I::movr(into, s0)));
        }
        Family::Inc | Family::Dec => {
            let delta = if *family == Family::Inc { 1 } else { -1 };
            let (d, a) = (reg(0), reg(1));
            if e.map.is_scratch(d) {
                e.push(I::addi(d, a, delta));
            } else {
                e.write_result(width, d, |e, into| e.push(I::addi(into, a, delta)));
            }
        }
        Family::Shl(c) => {
            let c = *c as u32;
            let (d, a) = (reg(0), reg(1));
            if e.map.is_scratch(d) {
                e.push(I::shl(d, a, c));
                return;
            }
            match width {
                Width::W64 => e.push(I::shl(d, a, c)),
                Width::W32 => {
                    e.push(I::shl(d, a, c + 32));
                    e.push(I::shr(d, d, 32));
                }
                Width::W8 if c >= 8 => {
                    e.push(I::shr(d, d, 8));
                    e.push(I::shl(d, d, 8));
                }
                Width::W8 => {
                    let t = e.s(3);
                    e.push(I::shl(t, a, 56 + c));
                    e.push(I::shr(t, t, 56));
                    e.merge_low8(d, t);
                }
            }
        }
        Family::Push => {
            let (r, sp) = (reg(0), reg(1));
            e.push(I::store(8, sp, -8, r));
            e.push(I::addi(sp, sp, -8));
        }
        Family::Pop => {
            let (r, sp) = (reg(0), reg(1));
            e.push(I::load(8, r, sp, 0));
            if r != sp {
                e.push(I::addi(sp, sp, 8));
            }
        }
        Family::Addr(shape) => match shape {
            AddrShape::Rip | AddrShape::Absolute => e.push_hole(I::ldi(s0, 0)),
            AddrShape::Base => e.push_hole(I::addi(s0, reg(0), 0)),
            AddrShape::Index(scale) => {
                e.push(I::shl(s0, reg(0), scale.log2()));
                e.push_hole(I::addi(s0, s0, 0));
            }
            AddrShape::BaseIndex(scale) => {
                e.push(I::shl(s0, reg(1), scale.log2()));
                e.push(I::alu(Opcode::Add, s0, s0, reg(0)));
                e.push_hole(I::addi(s0, s0, 0));
            }
        },
        Family::Flags(op) => {
            let b = args.get(1).copied();
            e.flags(*op, width, reg(0), b);
        }
        Family::Trap(reason) => e.push(I::trap(*reason)),
    }
}
