//! Lowering of the superset CFG to T64 code: tile selection per node,
//! control-flow templates, greedy fall-through layout and link-time fixup.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::cfg::{Node, NodeState, Successor, SupersetCfg};
use crate::isa::interp::TrapReason;
use crate::isa::memory::{HostCall, HOSTCALL_BASE, IMAGE_BASE};
use crate::isa::{Cond, DecodedInstruction, FlagMask, Mnemonic, Operand, Reg};
use crate::regmap::RegisterMap;
use crate::tiles::{emit_tiles, lookup_tiles, TileBank};
use crate::vm::{Opcode, TargetInstruction as I};

/// Table entry for offsets without a landing pad.
pub const NO_LANDING_PAD: i64 = -1;

/// The translation artifact: target code, lookup table and the embedded
/// source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslatedImage {
    pub target_code: Vec<I>,
    /// Target instruction index per source offset.
    pub table: Vec<i64>,
    pub source_image: Arc<[u8]>,
    pub image_base: u64,
    pub entry: usize,
    pub hostcall_base: u64,
}

/// Branch target awaiting link-time resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymTarget {
    /// The landing pad of a source offset.
    Offset(usize),
    /// An instruction index within the same lowered node.
    Local(usize),
}

/// A target instruction whose `imm` may still be symbolic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SymInsn {
    pub insn: I,
    pub target: Option<SymTarget>,
}

impl From<I> for SymInsn {
    fn from(insn: I) -> Self {
        SymInsn { insn, target: None }
    }
}

/// Where control goes after the last instruction of a lowered node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Continuation {
    /// The node always transfers control itself.
    None,
    /// Execution continues at this offset.
    Offset(usize),
    /// Execution runs past the end of the image.
    OffImage,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LoweredNode {
    pub offset: usize,
    pub code: Vec<SymInsn>,
    pub continuation: Continuation,
    /// Invalid offsets have no code of their own; their landing pad is the
    /// shared invalid-decode trap.
    pub invalid: bool,
    /// Another node branches here directly.
    pub label: bool,
    /// Control-flow nodes end a layout chunk.
    pub ends_chunk: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TranslateOptions {
    /// Omit flag tiles whose results are dead.
    pub prune: bool,
    pub image_base: u64,
    pub hostcall_base: u64,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions { prune: true, image_base: IMAGE_BASE, hostcall_base: HOSTCALL_BASE }
    }
}

/// Lowering context shared by all nodes of one image.
pub struct Lowering<'a> {
    pub bank: &'a TileBank,
    pub image_base: u64,
    pub image_len: usize,
    pub hostcall_base: u64,
    pub prune: bool,
}

/// Appends instructions with node-local labels.
struct Builder<'m> {
    map: &'m RegisterMap,
    code: Vec<SymInsn>,
}

impl Builder<'_> {
    fn s(&self, k: usize) -> u8 {
        self.map.scratch(k)
    }

    fn r(&self, reg: Reg) -> u8 {
        self.map.target(reg)
    }

    fn emit(&mut self, insn: I) -> usize {
        self.code.push(insn.into());
        self.code.len() - 1
    }

    fn emit_to(&mut self, insn: I, target: SymTarget) -> usize {
        self.code.push(SymInsn { insn, target: Some(target) });
        self.code.len() - 1
    }

    fn here(&self) -> usize {
        self.code.len()
    }

    fn patch(&mut self, at: usize, local: usize) {
        self.code[at].target = Some(SymTarget::Local(local));
    }

    /// Pushes the 64-bit constant `value`; a faulting store leaves RSP as is.
    fn push_const(&mut self, value: u64) {
        let (sp, s1) = (self.r(Reg::Rsp), self.s(1));
        self.emit(I::ldi(s1, value));
        self.emit(I::store(8, sp, -8, s1));
        self.emit(I::addi(sp, sp, -8));
    }

    /// Pops into S0.
    fn pop_s0(&mut self) {
        let (sp, s0) = (self.r(Reg::Rsp), self.s(0));
        self.emit(I::load(8, s0, sp, 0));
        self.emit(I::addi(sp, sp, 8));
    }

    /// Transfers control to the absolute source address in S0: inside the
    /// image through the lookup table, otherwise to a hostcall or a trap.
    fn dispatch_s0(&mut self, ctx: &Lowering<'_>) {
        let [s0, s1, s2, s3, s4, s5] = [0, 1, 2, 3, 4, 5].map(|k| self.s(k));
        let check = self.here();
        // a = addr - base; in bounds iff a - len borrows
        self.emit(I::ldi(s1, ctx.image_base));
        self.emit(I::alu(Opcode::Sub, s1, s0, s1));
        self.emit(I::ldi(s2, ctx.image_len as u64));
        self.emit(I::alu(Opcode::Sub, s3, s1, s2));
        self.emit(I::not(s4, s1));
        self.emit(I::alu(Opcode::And, s5, s4, s2));
        self.emit(I::alu(Opcode::Or, s4, s4, s2));
        self.emit(I::alu(Opcode::And, s4, s4, s3));
        self.emit(I::alu(Opcode::Or, s4, s4, s5));
        self.emit(I::shr(s4, s4, 63));
        let out = self.emit(I::beqz(s4, 0));
        self.emit(I::xlate(s1, s0));
        self.emit(I::br(s1));
        let out_label = self.here();
        self.patch(out, out_label);
        let mut host_branches = Vec::new();
        for call in HostCall::ALL {
            self.emit(I::ldi(s1, call.slot_address(ctx.hostcall_base)));
            self.emit(I::alu(Opcode::Sub, s1, s0, s1));
            host_branches.push((call, self.emit(I::beqz(s1, 0))));
        }
        self.emit(I::trap(TrapReason::UntranslatedTarget));
        for (call, at) in host_branches {
            let label = self.here();
            self.patch(at, label);
            self.emit(I::host(call));
            if call != HostCall::Exit {
                // the hostcall returns to the address on top of the stack
                self.pop_s0();
                self.emit_to(I::b(0), SymTarget::Local(check));
            }
        }
    }

    /// Jumps to the absolute address `addr` known at translation time.
    fn goto_address(&mut self, ctx: &Lowering<'_>, addr: u64) {
        self.emit(I::ldi(self.s(0), addr));
        self.dispatch_s0(ctx);
    }

    /// Leaves S0 nonzero iff `cond` holds for the packed flags.
    fn condition_s0(&mut self, cond: Cond) -> bool {
        let (f, s0, s1) = (self.map.flags_reg(), self.s(0), self.s(1));
        let bit = |b: &mut Self, dst: u8, pos: u32| {
            b.emit(I::shl(dst, f, 63 - pos));
            b.emit(I::shr(dst, dst, 63));
        };
        // SF xor OF into `dst` (bit 0)
        let sf_ne_of = |b: &mut Self, dst: u8, tmp: u8| {
            bit(b, dst, 7);
            bit(b, tmp, 11);
            b.emit(I::alu(Opcode::Xor, dst, dst, tmp));
        };
        // returns whether the branch is taken on nonzero
        match cond {
            Cond::B => {
                bit(self, s0, 0);
                true
            }
            Cond::Ae => {
                bit(self, s0, 0);
                false
            }
            Cond::Z => {
                bit(self, s0, 6);
                true
            }
            Cond::Nz => {
                bit(self, s0, 6);
                false
            }
            Cond::L => {
                sf_ne_of(self, s0, s1);
                true
            }
            Cond::Ge => {
                sf_ne_of(self, s0, s1);
                false
            }
            Cond::Le | Cond::G => {
                sf_ne_of(self, s0, s1);
                bit(self, s1, 6);
                self.emit(I::alu(Opcode::Or, s0, s0, s1));
                cond == Cond::Le
            }
        }
    }
}

impl Lowering<'_> {
    fn address_of(&self, offset: i64) -> u64 {
        self.image_base.wrapping_add(offset as u64)
    }

    /// Lowers one CFG node. `live` is the set of flags that may be observed
    /// after the node.
    pub fn lower_node(&self, node: &Node, live: FlagMask) -> LoweredNode {
        let map = self.bank.register_map();
        let mut lowered = LoweredNode {
            offset: node.offset,
            code: Vec::new(),
            continuation: Continuation::None,
            invalid: false,
            label: false,
            ends_chunk: true,
        };
        let insn = match &node.state {
            NodeState::Valid(insn) => insn,
            NodeState::Invalid(_) => {
                lowered.invalid = true;
                return lowered;
            }
        };
        let mut b = Builder { map, code: Vec::new() };
        let fallthrough = || node.fallthrough.map_or(Continuation::OffImage, Continuation::Offset);
        if !insn.is_control_flow() {
            let live = if self.prune { live } else { FlagMask::all() };
            match lookup_tiles(self.bank, insn, live) {
                Ok(uses) => {
                    for i in emit_tiles(&uses, self.image_base) {
                        b.emit(i);
                    }
                    lowered.continuation = fallthrough();
                    lowered.ends_chunk = false;
                }
                Err(_) => {
                    b.emit(I::trap(TrapReason::InvalidDecode));
                }
            }
            lowered.code = b.code;
            return lowered;
        }
        self.lower_control(&mut b, insn, node);
        if let Mnemonic::Jcc(_) = insn.mnemonic {
            lowered.continuation = fallthrough();
        }
        lowered.code = b.code;
        lowered
    }

    /// Emits a transfer to a direct target.
    fn branch_to(&self, b: &mut Builder<'_>, target: Successor) {
        match target {
            Successor::Offset(t) => {
                b.emit_to(I::b(0), SymTarget::Offset(t));
            }
            Successor::External(t) => b.goto_address(self, self.address_of(t)),
        }
    }

    fn lower_control(&self, b: &mut Builder<'_>, insn: &DecodedInstruction, node: &Node) {
        let direct = node.direct_targets.first().copied();
        let return_address = self.address_of(insn.end() as i64);
        match (insn.mnemonic, &insn.operands[..]) {
            (Mnemonic::Int3, _) => {
                b.emit(I::trap(TrapReason::Breakpoint));
            }
            (Mnemonic::Ret, _) => {
                b.pop_s0();
                b.dispatch_s0(self);
            }
            (Mnemonic::Call, [Operand::Reg(r)]) => {
                // the target is read before the push moves RSP
                b.emit(I::movr(b.s(0), b.r(*r)));
                b.push_const(return_address);
                b.dispatch_s0(self);
            }
            (Mnemonic::Jmp, [Operand::Reg(r)]) => {
                b.emit(I::movr(b.s(0), b.r(*r)));
                b.dispatch_s0(self);
            }
            (Mnemonic::Call, _) => {
                b.push_const(return_address);
                self.branch_to(b, direct.expect("direct call"));
            }
            (Mnemonic::Jmp, _) => self.branch_to(b, direct.expect("direct jump")),
            (Mnemonic::Jcc(cond), _) => {
                let on_nonzero = b.condition_s0(cond);
                let s0 = b.s(0);
                let branch = |target| if on_nonzero { I::bnez(s0, target) } else { I::beqz(s0, target) };
                match direct.expect("direct jcc") {
                    Successor::Offset(t) => {
                        b.emit_to(branch(0), SymTarget::Offset(t));
                    }
                    Successor::External(t) => {
                        // taken path is out of line, after the fall-through branch
                        let at = b.emit(branch(0));
                        let skip = b.emit(I::b(0));
                        let taken = b.here();
                        b.patch(at, taken);
                        b.goto_address(self, self.address_of(t));
                        let after = b.here();
                        b.patch(skip, after);
                    }
                }
            }
            _ => {
                b.emit(I::trap(TrapReason::InvalidDecode));
            }
        }
    }
}

/// Placement of offsets into chunks of straight-line code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub chunks: Vec<Chunk>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub items: Vec<ChunkItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkItem {
    /// The code of the node at this offset.
    Node(usize),
    /// Glue after `from`: branch to the landing pad of `to`.
    Branch { from: usize, to: usize },
    /// Glue after `from`: execution ran off the end of the image.
    OffImage { from: usize },
}

impl ChunkItem {
    fn owner(&self) -> usize {
        match *self {
            ChunkItem::Node(o) | ChunkItem::Branch { from: o, .. } | ChunkItem::OffImage { from: o } => o,
        }
    }
}

/// Layout seeds: offset 0, the entry and every in-image direct target, in
/// ascending order, followed by every remaining offset.
pub fn layout_seeds(cfg: &SupersetCfg, entry: usize) -> Vec<usize> {
    let mut primary = BTreeSet::new();
    primary.insert(0);
    primary.insert(entry);
    for node in &cfg.nodes {
        for t in &node.direct_targets {
            if let Successor::Offset(t) = t {
                primary.insert(*t);
            }
        }
    }
    let mut seeds: Vec<usize> = primary.iter().copied().collect();
    seeds.extend((0..cfg.image_len).filter(|o| !primary.contains(o)));
    seeds
}

/// Greedy fall-through merging.
pub fn layout(cfg: &SupersetCfg, lowered: &[LoweredNode], entry: usize) -> Layout {
    let mut placed = vec![false; lowered.len()];
    let mut chunks = Vec::new();
    for seed in layout_seeds(cfg, entry) {
        if placed[seed] || lowered[seed].invalid {
            continue;
        }
        let mut items = Vec::new();
        let mut o = seed;
        loop {
            placed[o] = true;
            items.push(ChunkItem::Node(o));
            let node = &lowered[o];
            match node.continuation {
                Continuation::None => break,
                Continuation::OffImage => {
                    items.push(ChunkItem::OffImage { from: o });
                    break;
                }
                Continuation::Offset(next) => {
                    if node.ends_chunk || placed[next] || lowered[next].invalid {
                        items.push(ChunkItem::Branch { from: o, to: next });
                        break;
                    }
                    o = next;
                }
            }
        }
        chunks.push(Chunk { items });
    }
    Layout { chunks }
}

/// Per-offset accounting of the emitted code.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranslationInfo {
    /// Target instructions attributed to each source offset: its own code
    /// plus any glue emitted after it.
    pub attributed: Vec<usize>,
    /// Instructions not attributed to any offset (the shared trap pad).
    pub shared: usize,
}

/// Concatenates chunks, resolves symbolic targets and fills the table.
/// The shared invalid-decode trap goes last.
pub fn link(lowered: &[LoweredNode], layout: &Layout) -> (Vec<I>, Vec<i64>, TranslationInfo) {
    let n = lowered.len();
    let mut start = vec![NO_LANDING_PAD; n];
    let mut pos = 0usize;
    for item in layout.chunks.iter().flat_map(|c| &c.items) {
        match *item {
            ChunkItem::Node(o) => {
                start[o] = pos as i64;
                pos += lowered[o].code.len();
            }
            ChunkItem::Branch { .. } | ChunkItem::OffImage { .. } => pos += 1,
        }
    }
    let pad = pos as i64;
    let uses_pad = lowered.iter().any(|l| l.invalid);
    let table: Vec<i64> = (0..n).map(|o| if lowered[o].invalid { pad } else { start[o] }).collect();

    let mut code = Vec::with_capacity(pos + 1);
    let mut attributed = vec![0usize; n];
    for item in layout.chunks.iter().flat_map(|c| &c.items) {
        attributed[item.owner()] += match *item {
            ChunkItem::Node(o) => {
                let base = code.len() as u64;
                for s in &lowered[o].code {
                    let mut insn = s.insn;
                    match s.target {
                        Some(SymTarget::Offset(t)) => {
                            let idx = table[t];
                            assert!(idx >= 0, "dangling branch to offset {t}");
                            insn.imm = idx as u64;
                        }
                        Some(SymTarget::Local(l)) => insn.imm = base + l as u64,
                        None => {}
                    }
                    code.push(insn);
                }
                lowered[o].code.len()
            }
            ChunkItem::Branch { to, .. } => {
                code.push(I::b(table[to] as u64));
                1
            }
            ChunkItem::OffImage { .. } => {
                code.push(I::trap(TrapReason::UntranslatedTarget));
                1
            }
        };
    }
    let mut shared = 0;
    if uses_pad {
        code.push(I::trap(TrapReason::InvalidDecode));
        shared = 1;
    }
    (code, table, TranslationInfo { attributed, shared })
}

/// Full pipeline with explicit options; also returns code attribution.
pub fn translate_with(image: &[u8], entry: usize, options: TranslateOptions, bank: &TileBank) -> (TranslatedImage, TranslationInfo) {
    assert!(!image.is_empty() && entry < image.len(), "entry {entry} outside image of {} bytes", image.len());
    let cfg = SupersetCfg::from_image(image);
    let ctx = Lowering {
        bank,
        image_base: options.image_base,
        image_len: image.len(),
        hostcall_base: options.hostcall_base,
        prune: options.prune,
    };
    let mut lowered: Vec<LoweredNode> = cfg.nodes.iter().map(|n| ctx.lower_node(n, n.live_flags)).collect();
    for node in &cfg.nodes {
        for t in &node.direct_targets {
            if let Successor::Offset(t) = *t {
                lowered[t].label = true;
            }
        }
    }
    let layout = layout(&cfg, &lowered, entry);
    let (target_code, table, info) = link(&lowered, &layout);
    let image = TranslatedImage {
        target_code,
        table,
        source_image: Arc::from(image),
        image_base: options.image_base,
        entry,
        hostcall_base: options.hostcall_base,
    };
    (image, info)
}

/// Translates `image` with flag pruning, using the default tile bank.
pub fn translate_image(image: &[u8], entry: usize) -> TranslatedImage {
    translate_with(image, entry, TranslateOptions::default(), TileBank::global()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::asm::assemble;
    use crate::isa::interp::{run_source, RunStatus};
    use crate::vm::run_translated;

    fn both(src: &str, inputs: &[(Reg, u64)]) -> (crate::isa::interp::ExecutionResult, crate::isa::interp::ExecutionResult) {
        let asm = assemble(src).unwrap();
        let t = translate_image(&asm.image, 0);
        (run_source(&asm.image, 0, inputs, 10_000), run_translated(&t, inputs, 1_000_000))
    }

    #[test]
    fn straight_line_is_one_chunk() {
        let asm = assemble("add rax, rbx\nadd rax, rcx\nret").unwrap();
        let cfg = SupersetCfg::from_image(&asm.image);
        let bank = TileBank::global();
        let ctx = Lowering { bank, image_base: IMAGE_BASE, image_len: asm.image.len(), hostcall_base: HOSTCALL_BASE, prune: true };
        let lowered: Vec<_> = cfg.nodes.iter().map(|n| ctx.lower_node(n, n.live_flags)).collect();
        let l = layout(&cfg, &lowered, 0);
        assert_eq!(l.chunks[0].items, vec![ChunkItem::Node(0), ChunkItem::Node(3), ChunkItem::Node(6)]);
    }

    #[test]
    fn call_pushes_return_address() {
        let asm = assemble("call f\nret\nf: mov rax, [rsp]\nret").unwrap();
        let cfg = SupersetCfg::from_image(&asm.image);
        let ctx = Lowering { bank: TileBank::global(), image_base: IMAGE_BASE, image_len: asm.image.len(), hostcall_base: HOSTCALL_BASE, prune: true };
        let lowered = ctx.lower_node(&cfg.nodes[0], FlagMask::all());
        assert_eq!(lowered.code[0].insn.imm, IMAGE_BASE + 5);
        assert_eq!(lowered.code.last().unwrap().target, Some(SymTarget::Offset(6)));
        let (a, b) = both("call f\nret\nf: mov rax, [rsp]\nret", &[]);
        assert_eq!(a.divergence(&b), None);
        assert_eq!(a.rax(), IMAGE_BASE + 5);
    }

    #[test]
    fn invalid_offsets_land_on_a_trap() {
        let t = translate_image(&[0x06, 0xC3], 1);
        assert_eq!(t.target_code[t.table[0] as usize].opcode, Opcode::Trap);
        assert!(t.table.iter().all(|&e| e >= 0));
    }

    #[test]
    fn conditional_branches_follow_the_oracle() {
        let src = "cmp rdi, 5\njl low\nmov rax, 1\nret\nlow: mov rax, 2\nret";
        for v in [0u64, 4, 5, 6, u64::MAX] {
            let (a, b) = both(src, &[(Reg::Rdi, v)]);
            assert_eq!(a.divergence(&b), None, "rdi = {v}");
            assert!(matches!(a.status, RunStatus::Halted(_)));
        }
    }

    #[test]
    fn translation_is_deterministic() {
        let asm = assemble("mov rcx, 3\nl: dec rcx\njnz l\nret").unwrap();
        assert_eq!(translate_image(&asm.image, 0), translate_image(&asm.image, 0));
    }
}
