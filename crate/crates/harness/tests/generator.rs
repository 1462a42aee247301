use std::collections::BTreeSet;

use tilebt::isa::asm::assemble;
use tilebt::isa::interp::{run, step, MachineState, RunStatus, StepOutcome};
use tilebt::isa::Mnemonic;
use tilebt_harness::diff::SOURCE_FUEL;
use tilebt_harness::gen::{gen_inputs, gen_program, Features, GenSpec};

#[test]
fn thousand_seeds_halt_within_fuel() {
    for seed in 0..1000 {
        let asm = assemble(&gen_program(&GenSpec::new(seed, 200, Features::ALL))).unwrap();
        let mut state = MachineState::new(asm.image.clone().into(), 0);
        for (r, v) in gen_inputs(seed) {
            state.set_reg(r, v);
        }
        let result = run(&mut state, SOURCE_FUEL);
        assert!(matches!(result.status, RunStatus::Halted(_)), "seed {seed}: {}", result.status);
    }
}

#[test]
fn indirect_jumps_land_on_instruction_starts() {
    let mut jumps_seen = 0;
    for seed in 0..200 {
        let asm = assemble(&gen_program(&GenSpec::new(seed, 200, Features::ALL))).unwrap();
        assert!(
            asm.instructions.iter().any(|i| i.is_indirect() && i.mnemonic == Mnemonic::Jmp),
            "seed {seed} has no register-indirect jump"
        );
        let starts: BTreeSet<usize> = asm.instruction_starts().into_iter().collect();
        let mut state = MachineState::new(asm.image.clone().into(), 0);
        for (r, v) in gen_inputs(seed) {
            state.set_reg(r, v);
        }
        for _ in 0..SOURCE_FUEL {
            let indirect = state
                .offset()
                .and_then(|o| asm.instructions.iter().find(|i| i.offset == o))
                .is_some_and(|i| i.is_indirect() && i.mnemonic == Mnemonic::Jmp);
            match step(&mut state) {
                StepOutcome::Continue => {}
                _ => break,
            }
            if indirect {
                jumps_seen += 1;
                let o = state.offset().expect("indirect jump stays in the image");
                assert!(starts.contains(&o), "seed {seed}: jump to {o} is not an instruction start");
            }
        }
    }
    assert!(jumps_seen > 0);
}

#[test]
fn features_off_means_no_indirect_jumps_or_overlap() {
    for seed in 0..50 {
        let text = gen_program(&GenSpec::new(seed, 200, Features::NONE));
        assert!(!text.contains(".byte 0xb0") && !text.contains(".byte 0xB0"), "seed {seed}");
        let asm = assemble(&text).unwrap();
        let jumps = asm.instructions.iter().filter(|i| i.is_indirect() && i.mnemonic == Mnemonic::Jmp).count();
        assert_eq!(jumps, 0, "seed {seed}");
    }
}
