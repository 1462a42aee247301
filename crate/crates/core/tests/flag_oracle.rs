//! Flag results of the interpreter against an oracle written from the
//! bitwise definitions: every 8-bit operand pair, plus random wide operands.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use tilebt::isa::asm::assemble;
use tilebt::isa::interp::{step, MachineState, StepOutcome};
use tilebt::isa::{FlagMask, Reg};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Add,
    Sub,
    Cmp,
    And,
    Or,
    Xor,
    Test,
    Inc,
    Dec,
    Shl(u32),
}

fn parity(v: u64) -> bool {
    let mut ones = 0;
    for i in 0..8 {
        ones += (v >> i) & 1;
    }
    ones % 2 == 0
}

fn signed(v: u64, bits: u32) -> i128 {
    let v = v as i128;
    if v >> (bits - 1) & 1 == 1 {
        v - (1i128 << bits)
    } else {
        v
    }
}

/// Result and flags (unchanged flags taken from `old`).
fn oracle(op: Op, bits: u32, a: u64, b: u64, old: FlagMask) -> (u64, FlagMask) {
    let modulus = 1u128 << bits;
    let (smin, smax) = (-(1i128 << (bits - 1)), (1i128 << (bits - 1)) - 1);
    let mut f = FlagMask::empty();
    let r: u64;
    match op {
        Op::Add | Op::Inc => {
            let b = if op == Op::Inc { 1 } else { b };
            let sum = a as u128 + b as u128;
            r = (sum % modulus) as u64;
            if op == Op::Add {
                f.set(FlagMask::CF, sum >= modulus);
            } else {
                f.set(FlagMask::CF, old.contains(FlagMask::CF));
            }
            let s = signed(a, bits) + signed(b, bits);
            f.set(FlagMask::OF, s < smin || s > smax);
            f.set(FlagMask::AF, (a & 0xF) + (b & 0xF) > 0xF);
        }
        Op::Sub | Op::Cmp | Op::Dec => {
            let b = if op == Op::Dec { 1 } else { b };
            r = ((a as u128 + modulus - b as u128) % modulus) as u64;
            if op == Op::Dec {
                f.set(FlagMask::CF, old.contains(FlagMask::CF));
            } else {
                f.set(FlagMask::CF, a < b);
            }
            let s = signed(a, bits) - signed(b, bits);
            f.set(FlagMask::OF, s < smin || s > smax);
            f.set(FlagMask::AF, (a & 0xF) < (b & 0xF));
        }
        Op::And | Op::Test => r = a & b,
        Op::Or => r = a | b,
        Op::Xor => r = a ^ b,
        Op::Shl(c) => {
            r = ((a as u128) << c) as u64 & (modulus - 1) as u64;
            let cf = c <= bits && (a >> (bits - c)) & 1 == 1;
            f.set(FlagMask::CF, cf);
            if c == 1 {
                f.set(FlagMask::OF, (r >> (bits - 1) & 1 == 1) != cf);
            }
        }
    }
    f.set(FlagMask::ZF, r == 0);
    f.set(FlagMask::SF, r >> (bits - 1) & 1 == 1);
    f.set(FlagMask::PF, parity(r));
    let result = match op {
        Op::Cmp | Op::Test => a,
        _ => r,
    };
    (result, f)
}

fn text(op: Op, bits: u32) -> String {
    let (a, b) = match bits {
        8 => ("cl", "dl"),
        32 => ("ecx", "edx"),
        _ => ("rcx", "rdx"),
    };
    match op {
        Op::Add => format!("add {a}, {b}"),
        Op::Sub => format!("sub {a}, {b}"),
        Op::Cmp => format!("cmp {a}, {b}"),
        Op::And => format!("and {a}, {b}"),
        Op::Or => format!("or {a}, {b}"),
        Op::Xor => format!("xor {a}, {b}"),
        Op::Test => format!("test {a}, {b}"),
        Op::Inc => format!("inc {a}"),
        Op::Dec => format!("dec {a}"),
        Op::Shl(c) => format!("shl {a}, {c}"),
    }
}

struct Runner {
    state: MachineState,
    bits: u32,
    op: Op,
}

impl Runner {
    fn new(op: Op, bits: u32) -> Runner {
        let image: Arc<[u8]> = Arc::from(assemble(&text(op, bits)).unwrap().image);
        Runner { state: MachineState::new(image, 0), bits, op }
    }

    fn check(&mut self, a: u64, b: u64, old: FlagMask) {
        let s = &mut self.state;
        s.rip = s.image_base();
        s.set_reg(Reg::Rcx, a);
        s.set_reg(Reg::Rdx, b);
        s.flags = old;
        assert_eq!(step(s), StepOutcome::Continue);
        let mask = if self.bits == 64 { u64::MAX } else { (1 << self.bits) - 1 };
        let (r, f) = oracle(self.op, self.bits, a & mask, b & mask, old);
        assert_eq!(s.flags, f, "{} with {a:#x}, {b:#x}: [{}] vs [{}]", text(self.op, self.bits), s.flags.names(), f.names());
        assert_eq!(s.reg(Reg::Rcx) & mask, r, "{} with {a:#x}, {b:#x}", text(self.op, self.bits));
    }
}

fn ops() -> Vec<Op> {
    vec![Op::Add, Op::Sub, Op::Cmp, Op::And, Op::Or, Op::Xor, Op::Test, Op::Inc, Op::Dec]
}

#[test]
fn every_8bit_pair() {
    for op in ops() {
        let mut run = Runner::new(op, 8);
        for a in 0..256u64 {
            for b in 0..256u64 {
                let old = if (a ^ b) & 1 == 0 { FlagMask::empty() } else { FlagMask::all() };
                run.check(a | 0xABCD_EF00, b, old);
            }
        }
    }
}

#[test]
fn every_8bit_shift() {
    for c in 1..32 {
        let mut run = Runner::new(Op::Shl(c), 8);
        for a in 0..256u64 {
            run.check(a, 0, FlagMask::all());
        }
    }
}

#[test]
fn hand_examples() {
    assert_eq!(oracle(Op::Add, 8, 0xFF, 0x01, FlagMask::empty()).1, FlagMask::ZF | FlagMask::CF | FlagMask::AF | FlagMask::PF);
    assert_eq!(oracle(Op::Add, 8, 0x7F, 0x01, FlagMask::empty()).1, FlagMask::SF | FlagMask::OF | FlagMask::AF);
    assert_eq!(oracle(Op::Xor, 64, 5, 5, FlagMask::all()).1, FlagMask::ZF | FlagMask::PF);
}

#[test]
fn random_wide_operands() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let edges = [0u64, 1, 0x7F, 0x80, 0xFF, 0x7FFF_FFFF, 0x8000_0000, 0xFFFF_FFFF, 1 << 63, u64::MAX, u64::MAX >> 1];
    for bits in [32, 64] {
        let mut all = ops();
        all.extend((1..bits).map(Op::Shl));
        for op in all {
            let mut run = Runner::new(op, bits);
            let n = if matches!(op, Op::Shl(_)) { 500 } else { 10_000 };
            for i in 0..n {
                let pick = |rng: &mut rand::rngs::StdRng| if rng.gen_bool(0.2) { edges[rng.gen_range(0..edges.len())] } else { rng.gen() };
                let (a, b) = (pick(&mut rng), pick(&mut rng));
                let old = if i % 2 == 0 { FlagMask::empty() } else { FlagMask::all() };
                run.check(a, b, old);
            }
        }
    }
}
