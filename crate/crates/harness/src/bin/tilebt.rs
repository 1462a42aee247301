use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tilebt::cfg::SupersetCfg;
use tilebt::isa::asm::assemble;
use tilebt::isa::interp::{run_source, ExecutionResult, RunStatus};
use tilebt::isa::Reg;
use tilebt::tiles::TileBank;
use tilebt::translate::{translate_with, TranslateOptions};
use tilebt::vm::{deserialize, run_translated, serialize};
use tilebt_harness::diff::{difftest, SOURCE_FUEL, TARGET_FUEL};
use tilebt_harness::gen::Features;
use tilebt_harness::metrics::metrics;
use tilebt_harness::sidecar;

/// Exit status for a run that trapped or ran out of fuel.
const EXIT_ABNORMAL: u8 = 3;

#[derive(Parser)]
#[command(name = "tilebt", version, about = "Superset-disassembly translator from an x86-64 subset to T64")]
struct Cli {
    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a program into a raw image (writes `<out>.entry` and `<out>.syms` too).
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Translate a raw image into an ELVT container.
    Translate {
        image: PathBuf,
        /// Entry offset; defaults to the `.entry` sidecar, else 0.
        #[arg(long)]
        entry: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
        /// Keep every flag computation.
        #[arg(long)]
        no_prune: bool,
        /// Print the superset CFG in DOT format.
        #[arg(long)]
        dump_cfg: bool,
        /// Print the tile bank.
        #[arg(long)]
        dump_bank: bool,
    },
    /// Run a raw image on the reference interpreter.
    RunSource {
        image: PathBuf,
        #[arg(long)]
        entry: Option<usize>,
        /// Initial register value, e.g. `RDI=0x10`.
        #[arg(long = "reg", value_parser = parse_reg)]
        regs: Vec<(Reg, u64)>,
        #[arg(long, default_value_t = SOURCE_FUEL)]
        fuel: u64,
    },
    /// Run an ELVT container on the target VM.
    Run {
        container: PathBuf,
        #[arg(long = "reg", value_parser = parse_reg)]
        regs: Vec<(Reg, u64)>,
        #[arg(long, default_value_t = TARGET_FUEL)]
        fuel: u64,
    },
    /// Differential testing over generated programs.
    Difftest {
        /// Seed range `A..B` (half-open).
        #[arg(long, value_parser = parse_range)]
        seeds: Range<u64>,
        #[arg(long, default_value_t = 200)]
        budget: usize,
        /// Comma-separated subset of `memory,indirect,overlap`, or `all`/`none`.
        #[arg(long, default_value = "all", value_parser = parse_features)]
        features: Features,
    },
    /// Code-size decomposition of a container against assembler ground truth.
    Metrics {
        container: PathBuf,
        #[arg(long)]
        symbols: PathBuf,
    },
}

fn parse_number(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => match t.strip_prefix('-') {
            Some(neg) => neg.parse::<u64>().map(|v| v.wrapping_neg()),
            None => t.parse(),
        },
    };
    parsed.map_err(|_| format!("bad number `{text}`"))
}

fn parse_reg(text: &str) -> Result<(Reg, u64), String> {
    let (name, value) = text.split_once('=').ok_or("expected REG=VALUE")?;
    let reg = Reg::ALL
        .into_iter()
        .find(|r| r.name().eq_ignore_ascii_case(name.trim()))
        .ok_or_else(|| format!("unknown register `{name}`"))?;
    Ok((reg, parse_number(value)?))
}

fn parse_range(text: &str) -> Result<Range<u64>, String> {
    let (a, b) = text.split_once("..").ok_or("expected A..B")?;
    let (a, b) = (parse_number(a)?, parse_number(b)?);
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn parse_features(text: &str) -> Result<Features, String> {
    Features::parse(text).ok_or_else(|| format!("unknown feature list `{text}`"))
}

/// A failure reported with exit status 2.
struct UsageError(String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.to_string())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, UsageError> {
    fs::read(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), UsageError> {
    fs::write(path, bytes).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

fn image_entry(image: &Path, entry: Option<usize>) -> Result<usize, UsageError> {
    if let Some(e) = entry {
        return Ok(e);
    }
    let side = sidecar::entry_path(image);
    match fs::read_to_string(&side) {
        Ok(text) => sidecar::parse_entry(&text).ok_or_else(|| UsageError(format!("{}: bad entry offset", side.display()))),
        Err(_) => Ok(0),
    }
}

fn exit_for(status: RunStatus) -> ExitCode {
    match status {
        RunStatus::Halted(code) => ExitCode::from(code as u8),
        _ => ExitCode::from(EXIT_ABNORMAL),
    }
}

fn report_run(result: &ExecutionResult, json: bool) -> ExitCode {
    if json {
        let regs: serde_json::Map<String, serde_json::Value> =
            Reg::ALL.into_iter().map(|r| (r.name().to_string(), json!(format!("{:#x}", result.gpr[r.index()])))).collect();
        let v = json!({
            "status": result.status.to_string(),
            "steps": result.steps,
            "flags": result.flags.names(),
            "output": String::from_utf8_lossy(&result.output),
            "regs": regs,
        });
        println!("{v}");
    } else {
        let mut out = std::io::stdout();
        out.write_all(&result.output).ok();
        out.flush().ok();
        eprintln!("status {}", result.status);
        eprintln!("steps  {}", result.steps);
        for r in Reg::ALL {
            eprintln!("{:<6} {:#018x}", r.name(), result.gpr[r.index()]);
        }
        eprintln!("flags  [{}]", result.flags.names());
    }
    exit_for(result.status)
}

fn run(cli: Cli) -> Result<ExitCode, UsageError> {
    let json = cli.json;
    match cli.command {
        Command::Asm { input, output } => {
            let text = String::from_utf8(read(&input)?)?;
            let asm = assemble(&text).map_err(|e| UsageError(format!("{}: {e}", input.display())))?;
            write(&output, &asm.image)?;
            write(&sidecar::entry_path(&output), format!("{}\n", sidecar::assembly_entry(&asm)).as_bytes())?;
            write(&sidecar::symbols_path(&output), sidecar::format_symbols(&asm).as_bytes())?;
            if json {
                println!("{}", json!({"bytes": asm.image.len(), "instructions": asm.instructions.len()}));
            } else {
                println!("{} bytes, {} instructions", asm.image.len(), asm.instructions.len());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Translate { image, entry, output, no_prune, dump_cfg, dump_bank } => {
            let bytes = read(&image)?;
            let entry = image_entry(&image, entry)?;
            if entry >= bytes.len() {
                return Err(UsageError(format!("entry {entry} is outside the {}-byte image", bytes.len())));
            }
            let options = TranslateOptions { prune: !no_prune, ..TranslateOptions::default() };
            let (translated, _) = translate_with(&bytes, entry, options, TileBank::global());
            write(&output, &serialize(&translated))?;
            if dump_cfg {
                print!("{}", SupersetCfg::from_image(&bytes).to_dot());
            }
            if dump_bank {
                print!("{}", TileBank::global().dump());
            }
            let msg = format!("{} target instructions, {} offsets", translated.target_code.len(), translated.table.len());
            if json {
                println!(
                    "{}",
                    json!({"target_instructions": translated.target_code.len(), "offsets": translated.table.len(), "prune": !no_prune})
                );
            } else {
                eprintln!("{msg}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RunSource { image, entry, regs, fuel } => {
            let bytes = read(&image)?;
            let entry = image_entry(&image, entry)?;
            if entry >= bytes.len() {
                return Err(UsageError(format!("entry {entry} is outside the {}-byte image", bytes.len())));
            }
            Ok(report_run(&run_source(&bytes, entry, &regs, fuel), json))
        }
        Command::Run { container, regs, fuel } => {
            let translated = deserialize(&read(&container)?)?;
            Ok(report_run(&run_translated(&translated, &regs, fuel), json))
        }
        Command::Difftest { seeds, budget, features } => {
            if budget == 0 {
                return Err(UsageError("budget must be at least 1".into()));
            }
            let report = difftest(seeds, budget, features);
            if json {
                let failures: Vec<_> = report.failures.iter().map(|f| json!({"seed": f.seed, "detail": f.detail})).collect();
                println!(
                    "{}",
                    json!({"passed": report.passed, "failed": report.failures.len(), "non_halting": report.non_halting,
                           "mid_entries": report.mid_entries, "failures": failures})
                );
            } else {
                for f in &report.failures {
                    println!("FAIL seed {}: {}", f.seed, f.detail);
                }
                println!(
                    "{} passed, {} failed ({} mid-program entries, {} non-halting)",
                    report.passed,
                    report.failures.len(),
                    report.mid_entries,
                    report.non_halting
                );
            }
            Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Metrics { container, symbols } => {
            let translated = deserialize(&read(&container)?)?;
            let real = sidecar::parse_symbols(&String::from_utf8(read(&symbols)?)?)?;
            if let Some(&(o, _)) = real.iter().find(|&&(o, _)| o >= translated.source_image.len()) {
                return Err(UsageError(format!("symbol offset {o} is outside the image")));
            }
            let (report, prune) =
                metrics(&translated, &real).ok_or_else(|| UsageError("container is not a translation of its embedded image".into()))?;
            if json {
                println!(
                    "{}",
                    json!({
                        "prune": prune,
                        "real_instruction_count": report.real_instruction_count,
                        "valid_offset_count": report.valid_offset_count,
                        "image_len": report.image_len,
                        "target_instruction_count": report.target_instruction_count,
                        "lowering_factor": report.lowering_factor,
                        "density_factor": report.density_factor,
                        "amplification_factor": report.amplification_factor,
                        "expansion": report.expansion,
                        "avg_source_instr_len": report.avg_source_instr_len,
                        "valid_decode_rate": report.valid_decode_rate,
                        "identity_error": report.identity_error(),
                    })
                );
            } else {
                println!("pruning                {}", if prune { "on" } else { "off" });
                println!("{report}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
