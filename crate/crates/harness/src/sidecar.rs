//! Files that travel next to a raw image: the entry offset (`.entry`,
//! decimal text) and the assembler ground truth (`.syms`).
//!
//! A symbols file holds one record per line:
//!
//! ```text
//! insn <offset> <length>
//! label <name> <offset>
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tilebt::isa::asm::Assembly;

pub fn entry_path(image: &Path) -> PathBuf {
    let mut p = image.as_os_str().to_owned();
    p.push(".entry");
    PathBuf::from(p)
}

pub fn symbols_path(image: &Path) -> PathBuf {
    let mut p = image.as_os_str().to_owned();
    p.push(".syms");
    PathBuf::from(p)
}

pub fn parse_entry(text: &str) -> Option<usize> {
    text.trim().parse().ok()
}

/// Entry of an assembled program: the `_start` label if present, else 0.
pub fn assembly_entry(asm: &Assembly) -> usize {
    asm.symbol("_start").unwrap_or(0)
}

pub fn format_symbols(asm: &Assembly) -> String {
    let mut out = String::new();
    for insn in &asm.instructions {
        writeln!(out, "insn {} {}", insn.offset, insn.length).unwrap();
    }
    for (name, offset) in &asm.symbols {
        writeln!(out, "label {name} {offset}").unwrap();
    }
    out
}

/// Real instructions (offset, length) from a symbols file.
pub fn parse_symbols(text: &str) -> Result<Vec<(usize, usize)>, String> {
    let mut real = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["insn", offset, len] => {
                let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("line {}: bad number `{s}`", n + 1));
                real.push((parse(offset)?, parse(len)?));
            }
            ["label", _, _] => {}
            _ => return Err(format!("line {}: unrecognized record", n + 1)),
        }
    }
    real.sort_unstable();
    Ok(real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tilebt::isa::asm::assemble;

    #[test]
    fn symbols_round_trip() {
        let asm = assemble("start:\n    mov eax, 1\n    ret\nend:\n").unwrap();
        let text = format_symbols(&asm);
        assert_eq!(text, "insn 0 5\ninsn 5 1\nlabel end 6\nlabel start 0\n");
        assert_eq!(parse_symbols(&text).unwrap(), vec![(0, 5), (5, 1)]);
    }

    #[test]
    fn bad_records_are_rejected() {
        assert!(parse_symbols("insn 0\n").is_err());
        assert!(parse_symbols("insn x 1\n").is_err());
    }

    #[test]
    fn entry_defaults() {
        assert_eq!(assembly_entry(&assemble("nop\n_start:\nret\n").unwrap()), 1);
        assert_eq!(assembly_entry(&assemble("ret\n").unwrap()), 0);
        assert_eq!(parse_entry(" 12\n"), Some(12));
        assert_eq!(entry_path(Path::new("a/b.bin")), PathBuf::from("a/b.bin.entry"));
    }
}
