use tilebt::isa::Reg;
use tilebt::translate::TranslateOptions;
use tilebt_harness::diff::{compare, difftest};
use tilebt_harness::gen::Features;
use tilebt_harness::programs::{assemble_golden, goldens};

#[test]
fn generated_programs_agree() {
    let report = difftest(0..40, 200, Features::ALL);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert_eq!(report.passed, 40);
}

#[test]
fn generated_programs_agree_without_features() {
    let report = difftest(100..120, 60, Features::NONE);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
}

#[test]
fn goldens_agree_in_both_modes() {
    for (name, text) in goldens() {
        let asm = assemble_golden(&text);
        for rdi in [0u64, 1, 2, 3, 5, 7, 1 << 63] {
            for prune in [true, false] {
                let options = TranslateOptions { prune, ..TranslateOptions::default() };
                let cmp = compare(&asm.image, 0, &[(Reg::Rdi, rdi), (Reg::Rsi, 9)], options);
                assert_eq!(cmp.divergence(), None, "{name} rdi={rdi} prune={prune}");
            }
        }
    }
}
