//! Random program generator for differential testing.
//!
//! Programs only branch forward (calls go to functions placed after the
//! main body, which return), so every program terminates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilebt::isa::memory::{HostCall, HOSTCALL_BASE};
use tilebt::isa::{Cond, Reg, Width};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Features {
    pub memory: bool,
    pub indirect: bool,
    pub overlap: bool,
}

impl Features {
    pub const ALL: Features = Features { memory: true, indirect: true, overlap: true };
    pub const NONE: Features = Features { memory: false, indirect: false, overlap: false };

    /// Parses a comma-separated list of `memory`, `indirect`, `overlap`,
    /// `all` or `none`.
    pub fn parse(list: &str) -> Option<Features> {
        let mut f = Features::NONE;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "memory" => f.memory = true,
                "indirect" => f.indirect = true,
                "overlap" => f.overlap = true,
                "all" => f = Features::ALL,
                "none" => f = Features::NONE,
                _ => return None,
            }
        }
        Some(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GenSpec {
    pub seed: u64,
    /// Approximate number of instructions; 1 yields only the exit call.
    pub budget: usize,
    pub features: Features,
}

impl GenSpec {
    pub fn new(seed: u64, budget: usize, features: Features) -> Self {
        GenSpec { seed, budget, features }
    }
}

const FRAME: u64 = 64;

/// Registers the generator writes freely.
const POOL: [Reg; 15] = [
    Reg::Rax,
    Reg::Rcx,
    Reg::Rdx,
    Reg::Rbx,
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

const BOUNDARY: [u64; 14] = [
    0,
    1,
    2,
    0x7F,
    0x80,
    0xFF,
    0x7FFF,
    0x8000,
    0x7FFF_FFFF,
    0x8000_0000,
    0xFFFF_FFFF,
    0x7FFF_FFFF_FFFF_FFFF,
    0x8000_0000_0000_0000,
    u64::MAX,
];

/// Register inputs for a run of the program generated from `seed`.
pub fn gen_inputs(seed: u64) -> Vec<(Reg, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    POOL.iter()
        .map(|&r| {
            let v = if rng.gen_bool(0.3) { *BOUNDARY.choose(&mut rng).unwrap() } else { rng.gen() };
            (r, v)
        })
        .collect()
}

struct Gen {
    rng: ChaCha8Rng,
    features: Features,
    out: String,
    labels: usize,
    /// Forward labels not yet placed, with the number of items still to
    /// emit before placing them.
    pending: Vec<(String, usize)>,
    functions: Vec<String>,
    uses_data: bool,
}

const ALU: [&str; 6] = ["add", "or", "and", "sub", "xor", "cmp"];
const MEM_ALU: [&str; 6] = ["add", "or", "and", "sub", "xor", "cmp"];

impl Gen {
    fn line(&mut self, text: impl AsRef<str>) {
        self.out.push_str("    ");
        self.out.push_str(text.as_ref());
        self.out.push('\n');
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!("l{}", self.labels)
    }

    fn reg(&mut self) -> Reg {
        *POOL.choose(&mut self.rng).unwrap()
    }

    fn width(&mut self) -> Width {
        *[Width::W8, Width::W32, Width::W64, Width::W64].choose(&mut self.rng).unwrap()
    }

    fn imm(&mut self, width: Width) -> i64 {
        let raw = if self.rng.gen_bool(0.4) { *BOUNDARY.choose(&mut self.rng).unwrap() } else { self.rng.gen::<u64>() };
        match width {
            Width::W8 => (raw & 0xFF) as i64,
            Width::W32 => (raw & 0xFFFF_FFFF) as u32 as i64,
            // sign-extended imm32
            Width::W64 => raw as i32 as i64,
        }
    }

    fn ptr(width: Width) -> &'static str {
        match width {
            Width::W8 => "byte ptr",
            Width::W32 => "dword ptr",
            Width::W64 => "qword ptr",
        }
    }

    fn count(&mut self, width: Width) -> u32 {
        let max = if width == Width::W64 { 63 } else { 31 };
        if self.rng.gen_bool(0.3) {
            1
        } else {
            self.rng.gen_range(1..=max)
        }
    }

    /// One register-only instruction.
    fn arith(&mut self) {
        let w = self.width();
        let (a, b) = (self.reg(), self.reg());
        let (an, bn) = (a.asm_name(w), b.asm_name(w));
        let text = match self.rng.gen_range(0..10) {
            0..=2 => {
                let op = ALU.choose(&mut self.rng).unwrap();
                format!("{op} {an}, {bn}")
            }
            3 | 4 => {
                let op = ALU.choose(&mut self.rng).unwrap();
                let imm = self.imm(w);
                format!("{op} {an}, {imm}")
            }
            5 => {
                if self.rng.gen_bool(0.5) {
                    format!("mov {an}, {bn}")
                } else if w == Width::W64 && self.rng.gen_bool(0.5) {
                    format!("mov {an}, {}", self.rng.gen::<u64>())
                } else {
                    let imm = self.imm(w);
                    format!("mov {an}, {imm}")
                }
            }
            6 => {
                let w = if w == Width::W8 { Width::W64 } else { w };
                let base = self.reg();
                let index = self.reg();
                let scale = [1, 2, 4, 8].choose(&mut self.rng).unwrap();
                let disp: i32 = self.rng.gen_range(-300..300);
                format!("lea {}, [{} + {}*{scale} + {disp}]", a.asm_name(w), base.name().to_lowercase(), index.name().to_lowercase())
            }
            7 => {
                let op = if self.rng.gen_bool(0.5) { "inc" } else { "dec" };
                format!("{op} {an}")
            }
            8 => {
                let c = self.count(w);
                format!("shl {an}, {c}")
            }
            _ => format!("test {an}, {bn}"),
        };
        self.line(text);
    }

    /// One instruction touching the stack frame or the data table.
    fn memory(&mut self) {
        let w = self.width();
        let a = self.reg();
        let an = a.asm_name(w);
        let slot = self.rng.gen_range(0..FRAME / 8) * 8;
        let m = format!("[rsp + {slot}]");
        let ptr = Self::ptr(w);
        let text = match self.rng.gen_range(0..9) {
            0 => format!("mov {m}, {an}"),
            1 => format!("mov {an}, {m}"),
            2 => {
                let op = MEM_ALU.choose(&mut self.rng).unwrap();
                format!("{op} {an}, {m}")
            }
            3 => {
                let op = MEM_ALU.choose(&mut self.rng).unwrap();
                format!("{op} {m}, {an}")
            }
            4 => {
                let op = MEM_ALU.choose(&mut self.rng).unwrap();
                let imm = self.imm(w);
                format!("{op} {ptr} {m}, {imm}")
            }
            5 => {
                let op = if self.rng.gen_bool(0.5) { "inc" } else { "dec" };
                format!("{op} {ptr} {m}")
            }
            6 => {
                let c = self.count(w);
                format!("shl {ptr} {m}, {c}")
            }
            7 => {
                self.uses_data = true;
                let at = self.rng.gen_range(0..8);
                format!("mov {an}, [rip + data + {at}]")
            }
            _ => {
                // indexed access with a bounded index register
                let k = self.rng.gen_range(0..FRAME / 8);
                self.line(format!("mov r10d, {k}"));
                let an = if a == Reg::R10 { Reg::Rax.asm_name(w) } else { an };
                format!("mov {an}, [rsp + r10*8]")
            }
        };
        self.line(text);
    }

    fn branch(&mut self) {
        let w = self.width();
        let (a, b) = (self.reg(), self.reg());
        if self.rng.gen_bool(0.5) {
            self.line(format!("cmp {}, {}", a.asm_name(w), b.asm_name(w)));
        } else {
            let imm = self.imm(w);
            self.line(format!("cmp {}, {imm}", a.asm_name(w)));
        }
        let cond = *Cond::ALL.choose(&mut self.rng).unwrap();
        let label = self.label();
        self.line(format!("j{} {label}", cond.suffix()));
        let distance = self.rng.gen_range(1..6);
        self.pending.push((label, distance));
    }

    fn push_pop(&mut self) {
        let (a, b) = (self.reg(), self.reg());
        self.line(format!("push {}", a.name().to_lowercase()));
        for _ in 0..self.rng.gen_range(0..3) {
            self.arith();
        }
        self.line(format!("pop {}", b.name().to_lowercase()));
    }

    /// A computed jump into a run of two-byte `inc eax` instructions.
    fn jump_table(&mut self) {
        let src = self.reg();
        let table = self.label();
        self.line(format!("mov r10, {}", src.name().to_lowercase()));
        self.line("and r10, 3");
        self.line("add r10, r10");
        self.line(format!("lea r9, [rip + {table}]"));
        self.line("add r9, r10");
        self.line("jmp r9");
        let _ = writeln!(self.out, "{table}:");
        for _ in 0..4 {
            self.line("inc eax");
        }
    }

    fn call(&mut self) {
        let name = format!("f{}", self.functions.len());
        let mut body = String::new();
        let n = self.rng.gen_range(1..5);
        let saved = std::mem::take(&mut self.out);
        for _ in 0..n {
            self.arith();
        }
        self.line("ret");
        body.push_str(&std::mem::replace(&mut self.out, saved));
        self.functions.push(format!("{name}:\n{body}"));
        if self.features.indirect && self.rng.gen_bool(0.5) {
            self.line(format!("lea r9, [rip + {name}]"));
            self.line("call r9");
        } else {
            self.line(format!("call {name}"));
        }
    }

    /// A branch over a `0xB0` byte whose decode swallows the next `nop`.
    fn overlap(&mut self) {
        let r = self.reg();
        let target = self.label();
        self.line(format!("test {0}, {0}", r.name().to_lowercase()));
        let cond = if self.rng.gen_bool(0.5) { "jz" } else { "jnz" };
        self.line(format!("{cond} {target}"));
        self.line(".byte 0xB0");
        let _ = writeln!(self.out, "{target}:");
        self.line("nop");
    }

    fn place_due_labels(&mut self) {
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].1 == 0 {
                let (label, _) = self.pending.remove(i);
                let _ = writeln!(self.out, "{label}:");
            } else {
                self.pending[i].1 -= 1;
                i += 1;
            }
        }
    }
}

fn hostcall(g: &mut Gen, call: HostCall) {
    g.line(format!("mov r11, {:#x}", call.slot_address(HOSTCALL_BASE)));
    g.line("call r11");
}

/// Generates program text; a pure function of `spec`.
pub fn gen_program(spec: &GenSpec) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        features: spec.features,
        out: String::from("start:\n"),
        labels: 0,
        pending: Vec::new(),
        functions: Vec::new(),
        uses_data: false,
    };
    if spec.budget <= 1 {
        hostcall(&mut g, HostCall::Exit);
        return g.out;
    }
    let memory = spec.features.memory;
    if memory {
        g.line(format!("sub rsp, {FRAME}"));
    }
    let mut weights = vec![(0u8, 8u32), (1, 3), (2, 1), (3, 1)];
    if memory {
        weights.push((4, 4));
    }
    if spec.features.indirect {
        weights.push((5, 1));
    }
    if spec.features.overlap {
        weights.push((6, 1));
    }
    let start = g.out.lines().count();
    while g.out.lines().count() - start < spec.budget.saturating_sub(4) {
        g.place_due_labels();
        let kind = weights.choose_weighted(&mut g.rng, |w| w.1).unwrap().0;
        match kind {
            0 => g.arith(),
            1 => g.branch(),
            2 => g.push_pop(),
            3 => g.call(),
            4 => g.memory(),
            5 => g.jump_table(),
            _ => g.overlap(),
        }
    }
    for (label, _) in std::mem::take(&mut g.pending) {
        let _ = writeln!(g.out, "{label}:");
    }
    if memory {
        g.line(format!("add rsp, {FRAME}"));
    }
    g.line("mov rdi, rax");
    hostcall(&mut g, HostCall::WriteU64);
    g.line("mov rdi, rbx");
    if g.rng.gen_bool(0.5) {
        g.line("ret");
    } else {
        hostcall(&mut g, HostCall::Exit);
    }
    for f in std::mem::take(&mut g.functions) {
        g.out.push_str(&f);
    }
    if g.uses_data {
        g.out.push_str("data:\n");
        let bytes: Vec<String> = (0..16).map(|_| format!("{:#04x}", g.rng.gen::<u8>())).collect();
        g.line(format!(".byte {}", bytes.join(", ")));
    }
    g.out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_one_is_a_single_exit_call() {
        let text = gen_program(&GenSpec::new(0, 1, Features::ALL));
        let asm = tilebt::isa::asm::assemble(&text).unwrap();
        assert_eq!(asm.instructions.len(), 2);
        assert_eq!(asm.instructions[1].mnemonic, tilebt::isa::Mnemonic::Call);
    }

    #[test]
    fn deterministic_per_seed() {
        for seed in 0..20 {
            let spec = GenSpec::new(seed, 120, Features::ALL);
            assert_eq!(gen_program(&spec), gen_program(&spec));
        }
        assert_ne!(gen_program(&GenSpec::new(1, 100, Features::ALL)), gen_program(&GenSpec::new(2, 100, Features::ALL)));
    }

    #[test]
    fn features_parse() {
        assert_eq!(Features::parse("memory,overlap"), Some(Features { memory: true, indirect: false, overlap: true }));
        assert_eq!(Features::parse("all"), Some(Features::ALL));
        assert_eq!(Features::parse("bogus"), None);
    }
}
