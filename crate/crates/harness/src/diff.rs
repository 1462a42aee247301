//! Differential execution: the reference interpreter against translated
//! code, end to end and in lockstep.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilebt::cfg::SupersetCfg;
use tilebt::isa::asm::{assemble, AsmError};
use tilebt::isa::interp::{self, run_source, ExecutionResult, MachineState, RunStatus, StepOutcome};
use tilebt::isa::{FlagMask, Reg};
use tilebt::regmap::{default_register_map, RegisterMap};
use tilebt::tiles::TileBank;
use tilebt::translate::{translate_with, TranslateOptions, TranslatedImage};
use tilebt::vm::{exec_step, initial_source_state, run_translated, TargetState};

use crate::gen::{gen_inputs, gen_program, Features, GenSpec};

/// Source-instruction fuel for oracle runs.
pub const SOURCE_FUEL: u64 = 1_000_000;
/// Target-instruction fuel for translated runs.
pub const TARGET_FUEL: u64 = 200 * SOURCE_FUEL;
/// Target instructions allowed between two source-level sync points.
const SYNC_LIMIT: u64 = 10_000;

/// Both sides of one end-to-end comparison.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub oracle: ExecutionResult,
    pub translated: ExecutionResult,
}

impl Comparison {
    pub fn divergence(&self) -> Option<String> {
        self.oracle.divergence(&self.translated)
    }
}

/// Runs `image` from `entry` on the interpreter and, translated with
/// `options`, on the target VM.
pub fn compare(image: &[u8], entry: usize, inputs: &[(Reg, u64)], options: TranslateOptions) -> Comparison {
    let oracle = run_source(image, entry, inputs, SOURCE_FUEL);
    let (translated_image, _) = translate_with(image, entry, options, TileBank::global());
    let translated = run_translated(&translated_image, inputs, TARGET_FUEL);
    Comparison { oracle, translated }
}

/// A lockstep mismatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    /// Source instructions executed before the mismatch showed.
    pub step: u64,
    /// Source offset (or address) at the mismatch.
    pub rip: u64,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "after {} steps at {:#x}: {}", self.step, self.rip, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BisimOutcome {
    /// Source instructions executed in agreement.
    pub steps: u64,
    /// The oracle halted or trapped (rather than running out of steps).
    pub terminated: bool,
}

/// First mismatch between the source state and the target state, comparing
/// flags only within `flags`.
fn state_mismatch(src: &MachineState, tgt: &TargetState, map: &RegisterMap, flags: FlagMask) -> Option<String> {
    let gpr = tgt.gpr(map);
    for reg in Reg::ALL {
        let (a, b) = (src.reg(reg), gpr[reg.index()]);
        if a != b {
            return Some(format!("{reg} {a:#x} vs {b:#x}"));
        }
    }
    let (a, b) = (src.flags & flags, tgt.flags(map) & flags);
    if a != b {
        return Some(format!("flags [{}] vs [{}] (compared [{}])", a.names(), b.names(), flags.names()));
    }
    if src.output != tgt.output {
        return Some("output differs".into());
    }
    if let Some(i) = src.mem.stack().iter().zip(tgt.mem.stack()).position(|(a, b)| a != b) {
        return Some(format!("stack byte {i:#x} differs"));
    }
    None
}

/// Steps the interpreter from `start` and the translated code from the
/// landing pad of `start`'s offset side by side, comparing registers,
/// live flags, output and stack at every source instruction boundary.
pub fn bisimulate(
    image: &TranslatedImage,
    cfg: &SupersetCfg,
    start: MachineState,
    max_steps: u64,
) -> Result<BisimOutcome, Divergence> {
    let map = default_register_map();
    let host_arg = map.target(Reg::Rdi);
    let mut src = start;
    let Some(mut tgt) = TargetState::from_source(&src, image, &map) else {
        return Err(Divergence { step: 0, rip: src.rip, detail: "no landing pad".into() });
    };
    let fail = |step, rip, detail: String| Err(Divergence { step, rip, detail });
    for step in 1..=max_steps {
        let outcome = interp::step(&mut src);
        match outcome {
            StepOutcome::Continue | StepOutcome::Host(_) => {
                let Some(offset) = src.offset() else {
                    // next source step is a hostcall or a trap; there is no
                    // landing pad to meet at
                    continue;
                };
                let pad = image.table[offset];
                let mut budget = SYNC_LIMIT;
                while tgt.pc as i64 != pad {
                    if budget == 0 {
                        return fail(step, src.rip, format!("target did not reach pad {pad}"));
                    }
                    budget -= 1;
                    match exec_step(&mut tgt, &image.target_code, &image.table, host_arg) {
                        StepOutcome::Continue | StepOutcome::Host(_) => {}
                        other => return fail(step, src.rip, format!("target stopped early: {other:?}")),
                    }
                }
                let live = cfg.nodes[offset].live_in;
                if let Some(d) = state_mismatch(&src, &tgt, &map, live) {
                    return fail(step, src.rip, d);
                }
            }
            StepOutcome::Halted(_) | StepOutcome::Trapped(_) => {
                let mut budget = SYNC_LIMIT;
                let end = loop {
                    if budget == 0 {
                        return fail(step, src.rip, "target did not terminate".into());
                    }
                    budget -= 1;
                    match exec_step(&mut tgt, &image.target_code, &image.table, host_arg) {
                        StepOutcome::Continue | StepOutcome::Host(_) => {}
                        other => break other,
                    }
                };
                if end != outcome {
                    return fail(step, src.rip, format!("oracle {outcome:?}, target {end:?}"));
                }
                if let Some(d) = state_mismatch(&src, &tgt, &map, FlagMask::all()) {
                    return fail(step, src.rip, d);
                }
                return Ok(BisimOutcome { steps: step, terminated: true });
            }
        }
    }
    Ok(BisimOutcome { steps: max_steps, terminated: false })
}

/// Lockstep run from `offset` with the generator's input registers.
pub fn bisimulate_from(image: &TranslatedImage, cfg: &SupersetCfg, offset: usize, inputs: &[(Reg, u64)], max_steps: u64) -> Result<BisimOutcome, Divergence> {
    bisimulate(image, cfg, initial_source_state(image, offset, inputs), max_steps)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedFailure {
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiffReport {
    pub passed: usize,
    pub failures: Vec<SeedFailure>,
    /// Seeds whose oracle run did not halt cleanly (still compared).
    pub non_halting: usize,
    pub mid_entries: usize,
}

impl DiffReport {
    pub fn total(&self) -> usize {
        self.passed + self.failures.len()
    }
}

/// Checks one generated program: end to end with pruning on and off, and
/// in lockstep from a random valid offset.
pub fn check_seed(spec: &GenSpec) -> Result<bool, String> {
    let text = gen_program(spec);
    let asm = assemble(&text).map_err(|e: AsmError| format!("assembly failed: {e}"))?;
    let inputs = gen_inputs(spec.seed);
    let mut halted = true;
    for prune in [true, false] {
        let options = TranslateOptions { prune, ..TranslateOptions::default() };
        let cmp = compare(&asm.image, 0, &inputs, options);
        if let Some(d) = cmp.divergence() {
            return Err(format!("prune={prune}: {d}"));
        }
        halted &= matches!(cmp.oracle.status, RunStatus::Halted(_));
    }
    let image = tilebt::translate::translate_image(&asm.image, 0);
    let cfg = SupersetCfg::from_image(&asm.image);
    let valid: Vec<usize> = cfg.nodes.iter().filter(|n| n.is_valid()).map(|n| n.offset).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(7));
    if let Some(&offset) = valid.choose(&mut rng) {
        bisimulate_from(&image, &cfg, offset, &inputs, 10_000).map_err(|d| format!("mid-entry at {offset}: {d}"))?;
    }
    Ok(halted)
}

/// Runs [`check_seed`] over a seed range.
pub fn difftest(seeds: std::ops::Range<u64>, budget: usize, features: Features) -> DiffReport {
    let mut report = DiffReport::default();
    for seed in seeds {
        match check_seed(&GenSpec::new(seed, budget, features)) {
            Ok(halted) => {
                report.passed += 1;
                report.mid_entries += 1;
                if !halted {
                    report.non_halting += 1;
                }
            }
            Err(detail) => report.failures.push(SeedFailure { seed, detail }),
        }
    }
    report
}
