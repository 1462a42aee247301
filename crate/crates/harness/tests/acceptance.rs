//! The acceptance suite: one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilebt::cfg::SupersetCfg;
use tilebt::isa::interp::{run_source, RunStatus};
use tilebt::isa::Reg;
use tilebt::tiles::TileBank;
use tilebt::translate::{translate_image, translate_with, TranslateOptions};
use tilebt::vm::{run_translated, serialize};
use tilebt_harness::corpus::{corpus, CorpusImage};
use tilebt_harness::diff::{bisimulate_from, difftest, SOURCE_FUEL, TARGET_FUEL};
use tilebt_harness::fidelity::{run_fidelity, FidelityConfig};
use tilebt_harness::gen::{gen_inputs, Features};
use tilebt_harness::metrics::metrics_from;
use tilebt_harness::programs::{assemble_golden, CHAINED_ARITHMETIC, OVERLAPPING, WEIRD_INDIRECT};

const CORPUS_SIZE: usize = 50;

type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn both_sides(image: &[u8], inputs: &[(Reg, u64)], prune: bool) -> Result<(u64, u64), String> {
    let oracle = run_source(image, 0, inputs, SOURCE_FUEL);
    let options = TranslateOptions { prune, ..TranslateOptions::default() };
    let (t, _) = translate_with(image, 0, options, TileBank::global());
    let translated = run_translated(&t, inputs, TARGET_FUEL);
    if let Some(d) = oracle.divergence(&translated) {
        return Err(d);
    }
    Ok((oracle.rax(), translated.rax()))
}

fn goldens() -> Verdict {
    let start = Instant::now();
    let mut errors = Vec::new();
    let l1 = assemble_golden(OVERLAPPING).image;
    for (rdi, want) in [(0u64, 0xC2u64), (1, 0xC3), (7, 0xC3), (1 << 63, 0xC3)] {
        match both_sides(&l1, &[(Reg::Rdi, rdi)], true) {
            Ok((a, b)) if a == want && b == want => {}
            Ok((a, b)) => errors.push(format!("listing 1 rdi={rdi:#x}: oracle {a:#x}, vm {b:#x}, want {want:#x}")),
            Err(d) => errors.push(format!("listing 1 rdi={rdi:#x}: {d}")),
        }
    }
    let l2 = assemble_golden(WEIRD_INDIRECT).image;
    for i in 0..8u64 {
        let want = 4 - (i & 3);
        match both_sides(&l2, &[(Reg::Rdi, i)], true) {
            Ok((a, b)) if a == want && b == want => {}
            Ok((a, b)) => errors.push(format!("listing 2 rdi={i}: oracle {a}, vm {b}, want {want}")),
            Err(d) => errors.push(format!("listing 2 rdi={i}: {d}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = errors.is_empty() && elapsed < Duration::from_secs(1);
    let detail = if errors.is_empty() {
        format!("listing 1 (0 -> 0xC2; 1, 7, 2^63 -> 0xC3) and listing 2 (0..7 -> 4-(i&3)) exact on both sides in {}", secs(elapsed))
    } else {
        errors.join("; ")
    };
    verdict(pass, detail)
}

fn fidelity() -> Verdict {
    let start = Instant::now();
    let config = FidelityConfig::default();
    let r = run_fidelity(&config);
    let elapsed = start.elapsed();
    let pass = r.passed() && r.exhaustive_pairs == 15 * 65_536 && elapsed < Duration::from_secs(600);
    let mut detail = format!(
        "{} comparisons, {} mismatches; {} instruction classes x {} per flag mode; \
         each of the {} bank tiles run directly >= {} times per flag mode and proven a register renaming of a representative run {} per mode; \
         {} exhaustive 8-bit add/sub/cmp pairs; {}",
        r.comparisons,
        r.mismatches.len(),
        r.instruction_classes,
        config.class_trials,
        r.bank_size,
        r.min_tile_trials(),
        config.class_trials,
        r.exhaustive_pairs,
        secs(elapsed)
    );
    for m in r.mismatches.iter().chain(&r.renaming_failures).chain(&r.thin_classes).chain(&r.uncovered).take(5) {
        detail.push_str(&format!("; {m}"));
    }
    verdict(pass, detail)
}

fn differential() -> Verdict {
    let start = Instant::now();
    let report = difftest(0..1000, 200, Features::ALL);
    let elapsed = start.elapsed();
    let pass = report.failures.is_empty() && report.passed == 1000 && elapsed < Duration::from_secs(300);
    let mut detail = format!(
        "{} of 1000 programs agree with pruning on and off, {} mid-program entries, {} divergences in {}",
        report.passed,
        report.mid_entries,
        report.failures.len(),
        secs(elapsed)
    );
    if let Some(f) = report.failures.first() {
        detail.push_str(&format!("; seed {}: {}", f.seed, f.detail));
    }
    verdict(pass, detail)
}

fn determinism(images: &[CorpusImage]) -> Verdict {
    let mut bad = Vec::new();
    for c in images {
        let a = serialize(&translate_image(&c.image, c.entry));
        let b = serialize(&translate_image(&c.image, c.entry));
        if a != b {
            bad.push(c.name.clone());
        }
    }
    verdict(bad.is_empty(), format!("{} images translated twice, {} differ {:?}", images.len(), bad.len(), bad))
}

fn completeness(images: &[CorpusImage]) -> Verdict {
    let mut errors = Vec::new();
    let (mut checked, mut halted) = (0, 0);
    for (i, c) in images.iter().enumerate() {
        let cfg = SupersetCfg::from_image(&c.image);
        let t = translate_image(&c.image, c.entry);
        let mut valid: Vec<usize> = cfg.nodes.iter().filter(|n| n.is_valid()).map(|n| n.offset).collect();
        if let Some(&o) = valid.iter().find(|&&o| t.table[o] < 0) {
            errors.push(format!("{}: no landing pad at {o}", c.name));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        valid.shuffle(&mut rng);
        for &o in valid.iter().take(20) {
            checked += 1;
            match bisimulate_from(&t, &cfg, o, &gen_inputs(i as u64), 100) {
                Ok(b) if b.steps >= 100 || b.terminated => halted += b.terminated as usize,
                Ok(b) => errors.push(format!("{} at {o}: stopped after {} steps", c.name, b.steps)),
                Err(d) => errors.push(format!("{} at {o}: {d}", c.name)),
            }
        }
    }
    let mut detail = format!(
        "{checked} sampled offsets over {} images bisimulate for 100 steps or to termination ({halted} terminated), {} divergences",
        images.len(),
        errors.len()
    );
    if let Some(e) = errors.first() {
        detail.push_str(&format!("; {e}"));
    }
    verdict(errors.is_empty(), detail)
}

fn decomposition(images: &[CorpusImage]) -> Verdict {
    let mut worst = (0.0f64, String::new());
    let (mut bytes, mut valid, mut real, mut real_len) = (0usize, 0usize, 0usize, 0usize);
    for c in images {
        let (t, info) = translate_with(&c.image, c.entry, TranslateOptions::default(), TileBank::global());
        let cfg = SupersetCfg::from_image(&c.image);
        let m = metrics_from(&t, &info, &cfg, &c.real);
        if m.identity_error() >= worst.0 {
            worst = (m.identity_error(), c.name.clone());
        }
        bytes += m.image_len;
        valid += m.valid_offset_count;
        real += m.real_instruction_count;
        real_len += c.real.iter().map(|&(_, l)| l).sum::<usize>();
    }
    let pass = worst.0 < 0.01;
    verdict(
        pass,
        format!(
            "max |expansion - lowering x density x amplification| / expansion = {:.3}% ({}); \
             corpus valid-decode rate {:.1}%, avg instruction length {:.2} B, reported only",
            100.0 * worst.0,
            worst.1,
            100.0 * valid as f64 / bytes as f64,
            real_len as f64 / real as f64
        ),
    )
}

fn pruning() -> Verdict {
    let image = assemble_golden(CHAINED_ARITHMETIC).image;
    let size = |prune| translate_with(&image, 0, TranslateOptions { prune, ..TranslateOptions::default() }, TileBank::global()).0.target_code.len();
    let (pruned, full) = (size(true), size(false));
    let mut errors = Vec::new();
    for (rdi, rsi, rcx) in [(0u64, 0u64, 0u64), (5, 3, 7), (u64::MAX, 1, 200), (1 << 40, 1 << 41, 3), (12, 300, 0)] {
        let inputs = [(Reg::Rdi, rdi), (Reg::Rsi, rsi), (Reg::Rcx, rcx)];
        let oracle = run_source(&image, 0, &inputs, SOURCE_FUEL);
        for prune in [true, false] {
            let (t, _) = translate_with(&image, 0, TranslateOptions { prune, ..TranslateOptions::default() }, TileBank::global());
            let r = run_translated(&t, &inputs, TARGET_FUEL);
            if let Some(d) = oracle.divergence(&r) {
                errors.push(format!("prune={prune} rdi={rdi:#x}: {d}"));
            }
        }
        if !matches!(oracle.status, RunStatus::Halted(_)) {
            errors.push(format!("oracle did not halt: {}", oracle.status));
        }
    }
    let mut detail = format!("{pruned} target instructions pruned vs {full} unpruned, identical results on 5 inputs");
    if let Some(e) = errors.first() {
        detail = format!("{detail}; {e}");
    }
    verdict(pruned < full && errors.is_empty(), detail)
}

fn main() -> ExitCode {
    let images = corpus(CORPUS_SIZE, 200);
    let criteria: Vec<(&str, Check)> = vec![
        ("golden pathological programs", Box::new(goldens)),
        ("per-tile fidelity", Box::new(fidelity)),
        ("end-to-end differential", Box::new(differential)),
        ("determinism", Box::new(|| determinism(&images))),
        ("superset completeness", Box::new(|| completeness(&images))),
        ("decomposition identity", Box::new(|| decomposition(&images))),
        ("pruning effectiveness", Box::new(pruning)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failed += !v.pass as usize;
        println!("{} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
