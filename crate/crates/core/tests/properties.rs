//! Property tests over images built from random instruction soups.

use proptest::prelude::*;
use tilebt::cfg::{SupersetCfg, Successor};
use tilebt::isa::asm::assemble;
use tilebt::isa::interp::{run, run_source, MachineState, RunStatus};
use tilebt::isa::{FlagMask, Reg};
use tilebt::tiles::{lookup_tiles, TileBank};
use tilebt::translate::{translate_image, translate_with, TranslateOptions};
use tilebt::vm::{deserialize, initial_source_state, run_translated, serialize, Opcode};

const POOL: &[&str] = &[
    "add rax, rbx",
    "sub ecx, 7",
    "cmp rdi, rsi",
    "xor eax, eax",
    "and dl, 0x0F",
    "or r8, -1",
    "test rdi, rdi",
    "inc rcx",
    "dec esi",
    "shl rax, 1",
    "shl ebx, 5",
    "mov al, 0xC3",
    "mov rax, rdi",
    "mov ecx, 0x12345678",
    "mov rdx, [rsp - 16]",
    "mov [rsp - 8], rax",
    "add qword ptr [rsp - 24], 3",
    "lea rsi, [rdi + rcx*4 + 8]",
    "push rax",
    "pop rbx",
    "nop",
    "ret",
    "int3",
    ".byte 0x74, 0x02",
    ".byte 0x72, 0x01",
    ".byte 0x7C, 0x03",
    ".byte 0x75, 0xFA",
    ".byte 0xEB, 0x01",
    ".byte 0xB0",
    ".byte 0x06",
    ".byte 0x48",
    ".byte 0xFF, 0xE1",
];

fn soup() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..POOL.len(), 1..40).prop_map(|picks| {
        let text: Vec<&str> = picks.iter().map(|&i| POOL[i]).collect();
        assemble(&text.join("\n")).expect("pool assembles").image
    })
}

fn any_image() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![soup(), prop::collection::vec(any::<u8>(), 1..64)]
}

fn flags() -> impl Strategy<Value = FlagMask> {
    any::<u16>().prop_map(FlagMask::from_bits_truncate)
}

/// Liveness by naive iteration to a fixed point over the same equations.
fn liveness_oracle(cfg: &SupersetCfg) -> Vec<FlagMask> {
    let n = cfg.nodes.len();
    let mut live = vec![FlagMask::empty(); n];
    loop {
        let mut changed = false;
        for o in 0..n {
            let node = &cfg.nodes[o];
            let value = match node.instruction() {
                Some(i) if !i.is_control_flow() && !i.accesses_memory() && node.fallthrough.is_some() => {
                    let out = live[node.fallthrough.unwrap()];
                    i.flags_read | (out - i.flags_written)
                }
                _ => FlagMask::all(),
            };
            if value != live[o] {
                live[o] = value;
                changed = true;
            }
        }
        if !changed {
            return live;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn liveness_matches_fixpoint(image in any_image()) {
        let cfg = SupersetCfg::from_image(&image);
        let oracle = liveness_oracle(&cfg);
        for node in &cfg.nodes {
            prop_assert_eq!(node.live_in, oracle[node.offset], "offset {}", node.offset);
            let out = node.fallthrough.map_or(FlagMask::all(), |f| oracle[f]);
            if node.instruction().is_some_and(|i| !i.is_control_flow()) {
                prop_assert_eq!(node.live_flags, out);
            }
        }
    }

    #[test]
    fn dead_flags_are_unobservable(image in soup(), f1 in flags(), f2 in flags(), pick in any::<prop::sample::Index>(), rdi in any::<u64>()) {
        let cfg = SupersetCfg::from_image(&image);
        let valid: Vec<usize> = cfg.nodes.iter().filter(|n| n.is_valid()).map(|n| n.offset).collect();
        prop_assume!(!valid.is_empty());
        let o = valid[pick.index(valid.len())];
        let live = cfg.nodes[o].live_in;
        let f2 = (f1 & live) | (f2 - live);
        let start = |flags| {
            let mut s = MachineState::new(image.clone().into(), o);
            s.set_reg(Reg::Rdi, rdi);
            s.flags = flags;
            s
        };
        let a = run(&mut start(f1), 500);
        let b = run(&mut start(f2), 500);
        prop_assert_eq!(a.divergence(&b), None);
    }

    #[test]
    fn translation_matches_oracle_from_every_offset(image in any_image(), rdi in any::<u64>(), prune in any::<bool>()) {
        let cfg = SupersetCfg::from_image(&image);
        for node in cfg.nodes.iter().filter(|n| n.is_valid()) {
            let inputs = [(Reg::Rdi, rdi), (Reg::Rcx, 3)];
            let oracle = run_source(&image, node.offset, &inputs, 1_000);
            if oracle.status == RunStatus::FuelExhausted {
                continue;
            }
            let options = TranslateOptions { prune, ..TranslateOptions::default() };
            let (t, _) = translate_with(&image, node.offset, options, TileBank::global());
            let translated = run_translated(&t, &inputs, 1_000_000);
            prop_assert_eq!(oracle.divergence(&translated), None, "entry {}", node.offset);
        }
    }

    #[test]
    fn container_round_trips_and_translation_is_deterministic(image in any_image(), entry in any::<prop::sample::Index>()) {
        let entry = entry.index(image.len());
        let a = translate_image(&image, entry);
        let b = translate_image(&image, entry);
        let bytes = serialize(&a);
        prop_assert_eq!(&bytes, &serialize(&b));
        prop_assert_eq!(deserialize(&bytes).unwrap(), a);
    }

    #[test]
    fn every_offset_has_a_landing_pad(image in any_image()) {
        let cfg = SupersetCfg::from_image(&image);
        let t = translate_image(&image, 0);
        prop_assert_eq!(t.table.len(), image.len());
        for node in &cfg.nodes {
            let pad = t.table[node.offset];
            prop_assert!(pad >= 0 && (pad as usize) < t.target_code.len());
            if !node.is_valid() {
                prop_assert_eq!(t.target_code[pad as usize].opcode, Opcode::Trap);
            }
        }
        // landing pads are reachable as fresh entries too
        let state = initial_source_state(&t, 0, &[]);
        prop_assert_eq!(state.offset(), Some(0));
    }

    #[test]
    fn direct_targets_and_fallthrough_agree_with_lengths(image in any_image()) {
        let cfg = SupersetCfg::from_image(&image);
        for node in cfg.nodes.iter() {
            let Some(insn) = node.instruction() else { continue };
            if let Some(f) = node.fallthrough {
                prop_assert_eq!(f, node.offset + insn.length as usize);
            }
            for t in &node.direct_targets {
                let target = insn.direct_target().unwrap();
                match *t {
                    Successor::Offset(o) => prop_assert_eq!(o as i64, target),
                    Successor::External(e) => prop_assert!(e == target && (e < 0 || e as usize >= image.len())),
                }
            }
        }
    }

    #[test]
    fn every_decode_has_tiles(bytes in prop::collection::vec(any::<u8>(), 1..16)) {
        if let Ok(insn) = tilebt::isa::decode(&bytes, 0) {
            if !insn.is_control_flow() && insn.mnemonic != tilebt::isa::Mnemonic::Int3 {
                let bank = TileBank::global();
                let all = lookup_tiles(bank, &insn, FlagMask::all()).unwrap();
                let none = lookup_tiles(bank, &insn, FlagMask::empty()).unwrap();
                let has_flag_tile = all.iter().any(|u| u.tile.name.starts_with("FLAGS_"));
                prop_assert_eq!(has_flag_tile, !insn.flags_written.is_empty(), "{}", insn);
                prop_assert!(none.iter().all(|u| !u.tile.name.starts_with("FLAGS_")));
            }
        }
    }
}

#[test]
fn decoder_fuzz_coverage_is_exhaustive_over_single_opcodes() {
    let bank = TileBank::global();
    let mut checked = 0;
    for prefix in [None, Some(0x48u8), Some(0x41), Some(0x4D)] {
        for op in 0..=255u8 {
            for modrm in 0..=255u8 {
                let mut bytes: Vec<u8> = prefix.into_iter().collect();
                bytes.extend([op, modrm, 0x24, 0x10, 0x20, 0x30, 0x40, 0x50, 0x60, 0x70, 0x80]);
                let Ok(insn) = tilebt::isa::decode(&bytes, 0) else { continue };
                if insn.is_control_flow() || insn.mnemonic == tilebt::isa::Mnemonic::Int3 {
                    continue;
                }
                for live in [FlagMask::all(), FlagMask::empty(), FlagMask::ZF] {
                    lookup_tiles(bank, &insn, live).unwrap_or_else(|e| panic!("{insn}: {e}"));
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000);
}
