//! Per-tile fidelity: every tile sequence selected for a concrete source
//! instruction is run on the target VM against one interpreter step, on
//! random and boundary inputs.
//!
//! Each concrete instruction gets a few hundred comparisons. The first
//! instruction of every operand class (same template, same register
//! aliasing, RSP kept apart) gets the full per-class budget. Tiles of one
//! class are checked to be register renamings of each other, so the class
//! budget carries over to every member.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilebt::isa::asm::assemble;
use tilebt::isa::interp::{step, MachineState, StepOutcome, TrapReason};
use tilebt::isa::memory::{IMAGE_BASE, STACK_BASE};
use tilebt::isa::{decode, AluOp, DecodedInstruction, FlagMask, Mnemonic, Operand, Reg, Width};
use tilebt::regmap::{default_register_map, RegisterMap};
use tilebt::tiles::{lookup_tiles, Family, HoleValue, Tile, TileBank, TileOperand, TileUse};
use tilebt::vm::{exec_step, TargetInstruction, TargetState};

const WINDOW: u64 = STACK_BASE + 0x8000;
const WINDOW_LEN: u64 = 0x1000;
/// Bytes appended after the instruction so RIP-relative reads have data.
const TRAILER: [u8; 32] = [
    0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xAA, 0xBB, 0xCC, 0xDD, 0xEE, 0xFF, 0x00, 0x80, 0x7F, 0x01,
    0xFE, 0x10, 0x20, 0x40, 0x08, 0xC3, 0x90, 0xB0, 0x0F, 0xF0, 0x5A, 0xA5, 0x3C,
];

const BOUNDARY: [u64; 22] = [
    0,
    1,
    2,
    0x0F,
    0x10,
    0x7F,
    0x80,
    0x81,
    0xFE,
    0xFF,
    0x100,
    0x7FFF_FFFF,
    0x8000_0000,
    0xFFFF_FFFE,
    0xFFFF_FFFF,
    0x1_0000_0000,
    0x7FFF_FFFF_FFFF_FFFF,
    0x8000_0000_0000_0000,
    0xFFFF_FFFF_FFFF_FF80,
    0xFFFF_FFFF_FFFF_FF7F,
    u64::MAX - 1,
    u64::MAX,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FidelityConfig {
    pub seed: u64,
    /// Comparisons for the first instruction of each operand class, per
    /// flag mode.
    pub class_trials: u64,
    /// Comparisons for every other instruction, per flag mode.
    pub case_trials: u64,
    /// Run all 65,536 operand pairs on the 8-bit add/sub flag classes.
    pub exhaustive_8bit: bool,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig { seed: 0x5EED, class_trials: 100_000, case_trials: 1_000, exhaustive_8bit: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FidelityReport {
    pub instructions: usize,
    pub instruction_classes: usize,
    pub comparisons: u64,
    pub exhaustive_pairs: u64,
    pub mismatches: Vec<String>,
    /// Comparisons each bank tile took part in.
    pub tile_trials: BTreeMap<String, u64>,
    /// Bank tiles never selected.
    pub uncovered: Vec<String>,
    /// Tiles that are not a register renaming of their class representative.
    pub renaming_failures: Vec<String>,
    /// Tile classes whose best-tested member stayed under the class budget.
    pub thin_classes: Vec<String>,
    pub tile_classes: usize,
    pub bank_size: usize,
}

impl FidelityReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
            && self.uncovered.is_empty()
            && self.renaming_failures.is_empty()
            && self.thin_classes.is_empty()
    }

    pub fn min_tile_trials(&self) -> u64 {
        self.tile_trials.values().copied().min().unwrap_or(0)
    }
}

/// One concrete source instruction under test.
#[derive(Clone, Debug)]
pub struct Case {
    pub text: String,
    pub insn: DecodedInstruction,
    pub image: Arc<[u8]>,
    /// Byte range of a patchable immediate operand.
    pub imm_bytes: Option<(usize, usize)>,
}

impl Case {
    pub fn new(text: &str) -> Case {
        let asm = assemble(text).unwrap_or_else(|e| panic!("`{text}`: {e}"));
        let mut bytes = asm.image.clone();
        let insn_len = bytes.len();
        bytes.extend_from_slice(&TRAILER);
        let insn = decode(&bytes, 0).unwrap_or_else(|e| panic!("`{text}` does not decode: {e:?}"));
        assert_eq!(insn.length as usize, insn_len, "`{text}`");
        let imm_bytes = imm_size(&bytes, &insn).map(|n| (insn_len - n, n));
        Case { text: text.to_string(), insn, image: Arc::from(bytes), imm_bytes }
    }

    /// Operand class: mnemonic, width and operand shapes, with registers
    /// replaced by their order of first appearance (RSP kept literal).
    pub fn class_key(&self) -> String {
        let mut seen: Vec<Reg> = Vec::new();
        let mut name = |r: Reg| -> String {
            if r == Reg::Rsp {
                return "RSP".into();
            }
            let i = seen.iter().position(|&s| s == r).unwrap_or_else(|| {
                seen.push(r);
                seen.len() - 1
            });
            format!("r{i}")
        };
        let mut key = format!("{}{}", self.insn.mnemonic.name(), self.insn.width.bits());
        for op in &self.insn.operands {
            key.push(' ');
            match op {
                Operand::Reg(r) => key.push_str(&name(*r)),
                Operand::Imm(v) if self.insn.mnemonic == Mnemonic::Shl => key.push_str(&v.to_string()),
                Operand::Imm(_) => key.push_str("imm"),
                Operand::Mem(m) => {
                    key.push('[');
                    if m.rip_relative {
                        key.push_str("rip");
                    }
                    if let Some(b) = m.base {
                        key.push_str(&name(b));
                    }
                    if let Some((i, s)) = m.index {
                        key.push_str(&format!("+{}*{}", name(i), s.factor()));
                    }
                    key.push(']');
                }
            }
        }
        key
    }
}

/// Size of the trailing immediate for encodings whose immediate is a free
/// operand value (shift counts select the tile and are excluded).
fn imm_size(bytes: &[u8], insn: &DecodedInstruction) -> Option<usize> {
    if !insn.operands.iter().any(|o| matches!(o, Operand::Imm(_))) || insn.mnemonic == Mnemonic::Shl {
        return None;
    }
    let (rex_w, op) = if (0x40..=0x4F).contains(&bytes[0]) { (bytes[0] & 8 != 0, bytes[1]) } else { (false, bytes[0]) };
    match op {
        0x80 | 0x83 | 0xB0..=0xB7 => Some(1),
        0x81 | 0xC7 => Some(4),
        0xB8..=0xBF => Some(if rex_w { 8 } else { 4 }),
        _ => None,
    }
}

/// Every concrete instruction form exercised by the suite.
pub fn enumerate_cases() -> Vec<Case> {
    let mut texts: Vec<String> = Vec::new();
    let lower = |r: Reg| r.name().to_ascii_lowercase();
    let widths = [Width::W64, Width::W32, Width::W8];
    let alu = ["add", "or", "and", "sub", "xor", "cmp"];
    let ptr = |w: Width| match w {
        Width::W8 => "byte ptr",
        Width::W32 => "dword ptr",
        Width::W64 => "qword ptr",
    };

    // address shapes through a 64-bit load into RAX
    texts.push("mov rax, [rip + 8]".into());
    texts.push("mov rax, [0x7F8100]".into());
    for b in Reg::ALL {
        texts.push(format!("mov rax, [{} + 16]", lower(b)));
    }
    for scale in [1, 2, 4, 8] {
        for i in Reg::ALL.into_iter().filter(|&r| r != Reg::Rsp) {
            texts.push(format!("mov rax, [{}*{scale} + 0x7F8000]", lower(i)));
            for b in Reg::ALL {
                texts.push(format!("mov rax, [{} + {}*{scale} - 8]", lower(b), lower(i)));
            }
        }
    }

    for w in widths {
        for r in Reg::ALL {
            let rn = r.asm_name(w);
            for r2 in Reg::ALL {
                let r2n = r2.asm_name(w);
                texts.push(format!("mov {rn}, {r2n}"));
                for op in alu {
                    texts.push(format!("{op} {rn}, {r2n}"));
                }
                texts.push(format!("test {rn}, {r2n}"));
            }
            let big = match w {
                Width::W8 => "0x9C",
                Width::W32 => "0x89ABCDEF",
                Width::W64 => "-0x12345678",
            };
            texts.push(format!("mov {rn}, {big}"));
            if w == Width::W64 {
                texts.push(format!("mov {rn}, 0x123456789ABCDEF0"));
            }
            for op in alu {
                texts.push(format!("{op} {rn}, {big}"));
                if w != Width::W8 {
                    texts.push(format!("{op} {rn}, -3"));
                }
            }
            // memory forms with a fixed base register
            let m = if r == Reg::Rbx { "[rbp + 24]" } else { "[rbx + 24]" };
            texts.push(format!("mov {rn}, {m}"));
            texts.push(format!("mov {m}, {rn}"));
            for op in alu {
                texts.push(format!("{op} {rn}, {m}"));
                texts.push(format!("{op} {m}, {rn}"));
            }
            texts.push(format!("test {m}, {rn}"));
            texts.push(format!("inc {rn}"));
            texts.push(format!("dec {rn}"));
            let max = if w == Width::W64 { 63 } else { 31 };
            for c in 1..=max {
                texts.push(format!("shl {rn}, {c}"));
            }
            if w != Width::W8 {
                texts.push(format!("lea {rn}, [rbx + rcx*4 + 12]"));
            }
        }
        let p = ptr(w);
        for op in alu {
            let imm = if w == Width::W8 { "0x9C" } else { "0x76543210" };
            texts.push(format!("{op} {p} [rbx + 24], {imm}"));
        }
        if w != Width::W8 {
            texts.push(format!("mov {p} [rbx + 24], 0x76543210"));
        }
        texts.push(format!("inc {p} [rbx + 24]"));
        texts.push(format!("dec {p} [rbx + 24]"));
        let max = if w == Width::W64 { 63 } else { 31 };
        for c in 1..=max {
            texts.push(format!("shl {p} [rbx + 24], {c}"));
        }
    }
    for r in Reg::ALL {
        texts.push(format!("push {}", lower(r)));
        texts.push(format!("pop {}", lower(r)));
    }
    texts.iter().map(|t| Case::new(t)).collect()
}

fn random_value(rng: &mut ChaCha8Rng) -> u64 {
    match rng.gen_range(0..10) {
        0..=2 => *BOUNDARY.choose(rng).unwrap(),
        3 => rng.gen_range(0..0x200),
        4 => BOUNDARY.choose(rng).unwrap() ^ rng.gen_range(0..4) << rng.gen_range(0..64),
        _ => rng.gen(),
    }
}

fn random_imm(rng: &mut ChaCha8Rng, size: usize) -> u64 {
    let bits = 8 * size as u32;
    let v = random_value(rng);
    if bits == 64 {
        v
    } else {
        v & ((1 << bits) - 1)
    }
}

/// Persistent interpreter and VM states for one case, kept in sync.
struct Bench<'a> {
    case: &'a Case,
    map: RegisterMap,
    src: MachineState,
    tgt: TargetState,
    /// Tile selections with all flags live and with none.
    uses: [Vec<TileUse<'static>>; 2],
    code: Vec<TargetInstruction>,
    trials_since_sync: u32,
}

/// Operand values forced by the exhaustive sweep: low bytes of the first
/// and second operand.
type Force = Option<(u8, u8)>;

impl<'a> Bench<'a> {
    fn new(case: &'a Case, bank: &'static TileBank) -> Result<Bench<'a>, String> {
        let map = default_register_map();
        let src = MachineState::new(Arc::clone(&case.image), 0);
        let tgt = TargetState {
            regs: [0; 32],
            pc: 0,
            mem: src.mem.clone(),
            output: Vec::new(),
            hostcall_base: src.hostcall_base,
        };
        let select = |live| lookup_tiles(bank, &case.insn, live).map_err(|e| format!("{}: {e}", case.text));
        let uses = [select(FlagMask::all())?, select(FlagMask::empty())?];
        Ok(Bench { case, map, src, tgt, uses, code: Vec::new(), trials_since_sync: 0 })
    }

    fn tiles(&self, mode: usize) -> impl Iterator<Item = &'static Tile> + '_ {
        self.uses[mode].iter().map(|u| u.tile)
    }

    fn write_both(&mut self, addr: u64, value: u64) {
        if (STACK_BASE..tilebt::isa::memory::STACK_END - 8).contains(&addr) {
            self.src.mem.write(addr, 8, value).unwrap();
            self.tgt.mem.write(addr, 8, value).unwrap();
        }
    }

    /// Picks an effective address and solves the address registers for it.
    /// With `in_window` the address always lands in the writable window.
    fn place_address(&mut self, gpr: &mut [u64; 16], rng: &mut ChaCha8Rng, in_window: bool) {
        let Some(m) = self.case.insn.memory_operand().copied() else { return };
        if m.rip_relative || (m.base.is_none() && m.index.is_none()) {
            return;
        }
        let ea = match if in_window { 0 } else { rng.gen_range(0..100) } {
            0..=87 => WINDOW + rng.gen_range(0..WINDOW_LEN),
            88..=93 => IMAGE_BASE + rng.gen_range(0..self.case.image.len() as u64 + 8),
            _ => rng.gen(),
        };
        let disp = m.disp as i64 as u64;
        let target = ea.wrapping_sub(disp);
        match (m.base, m.index) {
            (Some(b), None) => gpr[b.index()] = target,
            (None, Some((i, s))) => gpr[i.index()] = target >> s.log2(),
            (Some(b), Some((i, s))) if b == i => gpr[b.index()] = target / (1 + s.factor()),
            (Some(b), Some((i, s))) => {
                let idx = if rng.gen_bool(0.9) { rng.gen_range(0..64) } else { random_value(rng) };
                gpr[i.index()] = idx;
                gpr[b.index()] = target.wrapping_sub(idx.wrapping_mul(s.factor()));
            }
            (None, None) => {}
        }
    }

    /// Runs one comparison. `mode` 0 keeps every flag live, 1 none.
    fn trial(&mut self, rng: &mut ChaCha8Rng, mode: usize, force: Force) -> Result<(), String> {
        let insn = &self.case.insn;
        let mut gpr = [0u64; 16];
        for v in gpr.iter_mut() {
            *v = random_value(rng);
        }
        if matches!(insn.mnemonic, Mnemonic::Push | Mnemonic::Pop) {
            let sp = WINDOW + rng.gen_range(8..WINDOW_LEN - 8);
            gpr[Reg::Rsp.index()] = match rng.gen_range(0..20) {
                0 => rng.gen(),
                1..=4 => sp,
                _ => sp & !7,
            };
        }
        self.place_address(&mut gpr, rng, force.is_some());

        // immediate: random, or the forced second operand
        let mut imm_value = None;
        if let Some((at, size)) = self.case.imm_bytes {
            let v = match force {
                Some((_, y)) => y as u64,
                None => random_imm(rng, size),
            };
            let mut bytes = self.case.image.to_vec();
            bytes[at..at + size].copy_from_slice(&v.to_le_bytes()[..size]);
            let image: Arc<[u8]> = Arc::from(bytes);
            self.src.mem.set_image(Arc::clone(&image));
            self.tgt.mem.set_image(image);
            let sext = match size {
                1 if insn.width != Width::W8 => v as u8 as i8 as i64 as u64,
                4 if insn.width == Width::W64 => v as u32 as i32 as i64 as u64,
                _ => v,
            };
            imm_value = Some(sext & insn.width.mask());
        }
        if let (Some((x, y)), [a, b, ..]) = (force, &insn.operands[..]) {
            for (op, v) in [(a, x), (b, y)] {
                if let Operand::Reg(r) = op {
                    gpr[r.index()] = (gpr[r.index()] & !0xFF) | v as u64;
                }
            }
        }

        let flags = FlagMask::from_packed(rng.gen::<u64>() & FlagMask::all().packed());
        self.src.gpr = gpr;
        self.src.flags = flags;
        self.src.rip = IMAGE_BASE;

        let next = IMAGE_BASE + insn.length as u64;
        if let Some(m) = insn.memory_operand() {
            let ea = m.effective_address(&gpr, next);
            self.write_both(ea, rng.gen());
            if let (Some((x, y)), [a, b, ..]) = (force, &insn.operands[..]) {
                if (STACK_BASE..tilebt::isa::memory::STACK_END - 8).contains(&ea) {
                    let v = if matches!(a, Operand::Mem(_)) { x } else if matches!(b, Operand::Mem(_)) { y } else { 0 };
                    self.src.mem.write(ea, 1, v as u64).unwrap();
                    self.tgt.mem.write(ea, 1, v as u64).unwrap();
                }
            }
        }
        let sp = gpr[Reg::Rsp.index()];
        self.write_both(sp.wrapping_sub(8), rng.gen());
        self.write_both(sp, rng.gen());

        for reg in Reg::ALL {
            self.tgt.regs[self.map.target(reg) as usize] = gpr[reg.index()];
        }
        for &s in self.map.scratch_regs() {
            self.tgt.regs[s as usize] = rng.gen();
        }
        self.tgt.regs[self.map.flags_reg() as usize] = flags.packed();
        self.tgt.pc = 0;

        self.code.clear();
        for u in &self.uses[mode] {
            let hole = match u.hole {
                _ if u.tile.operands.contains(&TileOperand::Imm) => imm_value,
                Some(HoleValue::Value(v)) => Some(v),
                Some(HoleValue::ImageOffset(o)) => Some(IMAGE_BASE.wrapping_add(o as u64)),
                None => None,
            };
            self.code.extend(u.tile.instantiate(hole));
        }

        let expected = step(&mut self.src);
        let host_arg = self.map.target(Reg::Rdi);
        let mut got = StepOutcome::Continue;
        let mut fuel = 1000;
        while self.tgt.pc < self.code.len() && fuel > 0 {
            fuel -= 1;
            got = exec_step(&mut self.tgt, &self.code, &[], host_arg);
            if got != StepOutcome::Continue {
                break;
            }
        }
        let describe = |what: String| format!("{} [{}]: {what}", self.case.text, if mode == 0 { "flags live" } else { "flags dead" });
        if expected != got {
            return Err(describe(format!("outcome {expected:?} vs {got:?}")));
        }
        let tgpr = self.tgt.gpr(&self.map);
        for reg in Reg::ALL {
            let (a, b) = (self.src.reg(reg), tgpr[reg.index()]);
            if a != b {
                return Err(describe(format!("{reg} {a:#x} vs {b:#x} (inputs {gpr:x?}, flags {})", flags.names())));
            }
        }
        let flags_observed = mode == 0 || expected != StepOutcome::Continue || insn.flags_written.is_empty();
        if flags_observed && self.src.flags != self.tgt.flags(&self.map) {
            return Err(describe(format!(
                "flags [{}] vs [{}] (inputs {gpr:x?}, flags {})",
                self.src.flags.names(),
                self.tgt.flags(&self.map).names(),
                flags.names()
            )));
        }
        for addr in [sp.wrapping_sub(8), sp] {
            if (STACK_BASE..tilebt::isa::memory::STACK_END - 8).contains(&addr) {
                let (a, b) = (self.src.mem.read(addr, 8).unwrap(), self.tgt.mem.read(addr, 8).unwrap());
                if a != b {
                    return Err(describe(format!("stack at {addr:#x}: {a:#x} vs {b:#x}")));
                }
            }
        }
        self.trials_since_sync += 1;
        if self.trials_since_sync >= 1024 {
            self.full_sync_check().map_err(describe)?;
        }
        Ok(())
    }

    /// Compares the whole stack; on mismatch resynchronizes the VM memory.
    fn full_sync_check(&mut self) -> Result<(), String> {
        self.trials_since_sync = 0;
        let a = self.src.mem.stack();
        let b = self.tgt.mem.stack();
        if let Some(i) = a.iter().zip(b).position(|(x, y)| x != y) {
            self.tgt.mem = self.src.mem.clone();
            return Err(format!("stack byte {:#x} diverged", STACK_BASE + i as u64));
        }
        Ok(())
    }
}

/// Class key of a bank tile: its template and operand aliasing.
pub fn tile_class_key(tile: &Tile) -> String {
    let mut seen: Vec<Reg> = Vec::new();
    let mut key = tile.template.pattern();
    for op in &tile.operands {
        key.push(' ');
        match op {
            TileOperand::Reg(Reg::Rsp) => key.push_str("RSP"),
            TileOperand::Reg(r) => {
                let i = seen.iter().position(|s| s == r).unwrap_or_else(|| {
                    seen.push(*r);
                    seen.len() - 1
                });
                key.push_str(&format!("r{i}"));
            }
            other => key.push_str(&other.to_string()),
        }
    }
    key
}

/// Whether `b` is `a` with source-mapped registers consistently renamed
/// (scratch and flag registers fixed).
pub fn is_renaming(a: &Tile, b: &Tile, map: &RegisterMap) -> bool {
    if a.code.len() != b.code.len() || a.hole != b.hole {
        return false;
    }
    let fixed = |r: u8| map.is_scratch(r) || r == map.flags_reg();
    let mut fwd: HashMap<u8, u8> = HashMap::new();
    let mut back: HashMap<u8, u8> = HashMap::new();
    let mut bind = |x: u8, y: u8| -> bool {
        if fixed(x) || fixed(y) {
            return x == y;
        }
        *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    };
    a.code.iter().zip(&b.code).all(|(p, q)| {
        let (d, n, m, _) = p.opcode.fields();
        p.opcode == q.opcode
            && p.imm == q.imm
            && (!d || bind(p.rd, q.rd))
            && (!n || bind(p.rn, q.rn))
            && (!m || bind(p.rm, q.rm))
    })
}

/// The 8-bit add/sub classes swept exhaustively, by representative text.
fn exhaustive_cases() -> Vec<&'static str> {
    vec![
        "add cl, dl",
        "sub cl, dl",
        "cmp cl, dl",
        "add cl, 0x9C",
        "sub cl, 0x9C",
        "cmp cl, 0x9C",
        "add cl, [rbx + 24]",
        "sub cl, [rbx + 24]",
        "cmp cl, [rbx + 24]",
        "add [rbx + 24], cl",
        "sub [rbx + 24], cl",
        "cmp [rbx + 24], cl",
        "add byte ptr [rbx + 24], 0x9C",
        "sub byte ptr [rbx + 24], 0x9C",
        "cmp byte ptr [rbx + 24], 0x9C",
    ]
}

/// Trap tiles against the interpreter stopping at an invalid byte, an
/// `int3` and the end of the image.
fn check_trap_tiles(bank: &TileBank, report: &mut FidelityReport, trials: u64, rng: &mut ChaCha8Rng) {
    let map = default_register_map();
    let cases: [(&[u8], usize, TrapReason); 3] = [
        (&[0x06], 0, TrapReason::InvalidDecode),
        (&[0xCC], 0, TrapReason::Breakpoint),
        (&[0x90], 1, TrapReason::UntranslatedTarget),
    ];
    for (bytes, entry, reason) in cases {
        let name = tilebt::tiles::TileTemplate::new(Family::Trap(reason), Width::W64).pattern();
        let tile = bank.get(&name).expect("trap tile");
        let mut src = MachineState::new(Arc::from(bytes), entry);
        let mut tgt = TargetState { regs: [0; 32], pc: 0, mem: src.mem.clone(), output: Vec::new(), hostcall_base: src.hostcall_base };
        for _ in 0..trials {
            for r in Reg::ALL {
                src.set_reg(r, random_value(rng));
                tgt.regs[map.target(r) as usize] = src.reg(r);
            }
            src.flags = FlagMask::from_packed(rng.gen::<u64>() & FlagMask::all().packed());
            tgt.regs[map.flags_reg() as usize] = src.flags.packed();
            tgt.pc = 0;
            let before = src.clone();
            let expected = step(&mut src);
            let got = exec_step(&mut tgt, &tile.code, &[], map.target(Reg::Rdi));
            report.comparisons += 1;
            if expected != got || src != before || tgt.gpr(&map) != src.gpr || tgt.flags(&map) != src.flags {
                report.mismatches.push(format!("{name}: {expected:?} vs {got:?}"));
                break;
            }
        }
        *report.tile_trials.entry(name).or_default() += trials;
    }
}

/// Runs the whole suite.
pub fn run_fidelity(config: &FidelityConfig) -> FidelityReport {
    let bank = TileBank::global();
    let map = default_register_map();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = FidelityReport { bank_size: bank.len(), ..FidelityReport::default() };
    for tile in bank.tiles() {
        report.tile_trials.insert(tile.name.clone(), 0);
    }

    let cases = enumerate_cases();
    report.instructions = cases.len();
    let mut classes_seen = std::collections::HashSet::new();
    for case in &cases {
        let representative = classes_seen.insert(case.class_key());
        let per_mode = if representative { config.class_trials } else { config.case_trials };
        let mut bench = match Bench::new(case, bank) {
            Ok(b) => b,
            Err(e) => {
                report.mismatches.push(e);
                continue;
            }
        };
        'modes: for mode in 0..2 {
            for _ in 0..per_mode {
                if let Err(e) = bench.trial(&mut rng, mode, None) {
                    report.mismatches.push(e);
                    break 'modes;
                }
            }
            let names: Vec<&'static Tile> = bench.tiles(mode).collect();
            for t in names {
                *report.tile_trials.get_mut(&t.name).unwrap() += per_mode;
            }
            report.comparisons += per_mode;
        }
        if let Err(e) = bench.full_sync_check() {
            report.mismatches.push(format!("{}: {e}", case.text));
        }
    }
    report.instruction_classes = classes_seen.len();

    if config.exhaustive_8bit {
        for text in exhaustive_cases() {
            let case = Case::new(text);
            let mut bench = Bench::new(&case, bank).expect("exhaustive case has tiles");
            'pairs: for x in 0..=255u8 {
                for y in 0..=255u8 {
                    if let Err(e) = bench.trial(&mut rng, 0, Some((x, y))) {
                        report.mismatches.push(e);
                        break 'pairs;
                    }
                    report.exhaustive_pairs += 1;
                }
            }
            let names: Vec<&'static Tile> = bench.tiles(0).collect();
            for t in names {
                *report.tile_trials.get_mut(&t.name).unwrap() += 65_536;
            }
            report.comparisons += 65_536;
        }
    }

    check_trap_tiles(bank, &mut report, config.class_trials, &mut rng);

    // classes: renaming equivalence and the per-class budget
    let mut classes: BTreeMap<String, Vec<&Tile>> = BTreeMap::new();
    for tile in bank.tiles() {
        classes.entry(tile_class_key(tile)).or_default().push(tile);
    }
    report.tile_classes = classes.len();
    for (key, members) in &classes {
        let rep = members[0];
        for t in &members[1..] {
            if !is_renaming(rep, t, &map) {
                report.renaming_failures.push(format!("{} vs {}", rep.name, t.name));
            }
        }
        let best = members.iter().map(|t| report.tile_trials[&t.name]).max().unwrap_or(0);
        if best < config.class_trials {
            report.thin_classes.push(format!("{key} ({best})"));
        }
    }
    report.uncovered = report
        .tile_trials
        .iter()
        .filter(|(_, &n)| n < config.case_trials.min(config.class_trials))
        .map(|(name, n)| format!("{name} ({n})"))
        .collect();
    report
}

/// Whether `op` has a flag tile that can be checked exhaustively.
pub fn is_add_sub(op: AluOp) -> bool {
    matches!(op, AluOp::Add | AluOp::Sub | AluOp::Cmp)
}
