//! Cross-checks the subset decoder against iced-x86: every byte sequence
//! the subset decoder accepts must decode to the same instruction there.

use iced_x86::{Decoder, DecoderOptions, Instruction, Mnemonic as IM, OpKind, Register};
use rand::{Rng, SeedableRng};
use tilebt::isa::{decode, AluOp, Cond, DecodedInstruction, InvalidReason, Mnemonic, Operand, Reg, Width};

const IP: u64 = 0x40_0000;

fn iced(bytes: &[u8]) -> Instruction {
    let mut d = Decoder::with_ip(64, bytes, IP, DecoderOptions::NONE);
    d.decode()
}

fn full_reg(r: Register) -> Option<(Reg, Width)> {
    let full = r.full_register();
    let idx = [
        Register::RAX,
        Register::RCX,
        Register::RDX,
        Register::RBX,
        Register::RSP,
        Register::RBP,
        Register::RSI,
        Register::RDI,
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::R13,
        Register::R14,
        Register::R15,
    ]
    .iter()
    .position(|&x| x == full)?;
    let width = match r.size() {
        1 => Width::W8,
        4 => Width::W32,
        8 => Width::W64,
        _ => return None,
    };
    // AH..BH are outside the subset
    if matches!(r, Register::AH | Register::CH | Register::DH | Register::BH) {
        return None;
    }
    Some((Reg::from_index(idx as u8), width))
}

fn mnemonic_matches(ours: Mnemonic, theirs: IM) -> bool {
    use Cond::*;
    match ours {
        Mnemonic::Mov => theirs == IM::Mov,
        Mnemonic::Lea => theirs == IM::Lea,
        Mnemonic::Alu(op) => {
            theirs
                == match op {
                    AluOp::Add => IM::Add,
                    AluOp::Or => IM::Or,
                    AluOp::And => IM::And,
                    AluOp::Sub => IM::Sub,
                    AluOp::Xor => IM::Xor,
                    AluOp::Cmp => IM::Cmp,
                }
        }
        Mnemonic::Test => theirs == IM::Test,
        Mnemonic::Inc => theirs == IM::Inc,
        Mnemonic::Dec => theirs == IM::Dec,
        Mnemonic::Shl => theirs == IM::Shl,
        Mnemonic::Push => theirs == IM::Push,
        Mnemonic::Pop => theirs == IM::Pop,
        Mnemonic::Call => theirs == IM::Call,
        Mnemonic::Ret => theirs == IM::Ret,
        Mnemonic::Jmp => theirs == IM::Jmp,
        Mnemonic::Nop => theirs == IM::Nop,
        Mnemonic::Int3 => theirs == IM::Int3,
        Mnemonic::Jcc(c) => {
            theirs
                == match c {
                    B => IM::Jb,
                    Ae => IM::Jae,
                    Z => IM::Je,
                    Nz => IM::Jne,
                    L => IM::Jl,
                    Ge => IM::Jge,
                    Le => IM::Jle,
                    G => IM::Jg,
                }
        }
    }
}

fn check(ours: &DecodedInstruction, theirs: &Instruction) -> Result<(), String> {
    if theirs.is_invalid() {
        return Err("iced rejects".into());
    }
    if ours.length as usize != theirs.len() {
        return Err(format!("length {} vs {}", ours.length, theirs.len()));
    }
    if !mnemonic_matches(ours.mnemonic, theirs.mnemonic()) {
        return Err(format!("mnemonic {:?} vs {:?}", ours.mnemonic, theirs.mnemonic()));
    }
    if ours.operands.len() != theirs.op_count() as usize {
        return Err(format!("operand count {} vs {}", ours.operands.len(), theirs.op_count()));
    }
    let next = IP + theirs.len() as u64;
    let mask = ours.width.mask();
    for (i, op) in ours.operands.iter().enumerate() {
        let kind = theirs.op_kind(i as u32);
        match (op, kind) {
            (Operand::Reg(r), OpKind::Register) => {
                let Some((reg, width)) = full_reg(theirs.op_register(i as u32)) else {
                    return Err(format!("register {:?} outside the subset", theirs.op_register(i as u32)));
                };
                if reg != *r {
                    return Err(format!("operand {i}: {r} vs {reg}"));
                }
                if width != ours.width {
                    return Err(format!("operand {i} width {width:?} vs {:?}", ours.width));
                }
            }
            (Operand::Imm(v), OpKind::NearBranch64) => {
                let target = next.wrapping_add(*v as u64);
                if target != theirs.near_branch64() {
                    return Err(format!("branch target {target:#x} vs {:#x}", theirs.near_branch64()));
                }
            }
            (Operand::Imm(v), _) if kind != OpKind::Memory && kind != OpKind::Register => {
                let mut theirs_imm = theirs.immediate(i as u32);
                if ours.mnemonic == Mnemonic::Shl {
                    // the subset keeps the effective (masked) count
                    theirs_imm &= if ours.width == Width::W64 { 0x3F } else { 0x1F };
                }
                if (*v as u64) & mask != theirs_imm & mask {
                    return Err(format!("immediate {:#x} vs {:#x}", v, theirs_imm));
                }
            }
            (Operand::Mem(m), OpKind::Memory) => {
                if m.rip_relative {
                    if !theirs.is_ip_rel_memory_operand() || theirs.ip_rel_memory_address() != next.wrapping_add(m.disp as i64 as u64) {
                        return Err(format!("rip-relative {m} vs {:#x}", theirs.ip_rel_memory_address()));
                    }
                    continue;
                }
                let base = match theirs.memory_base() {
                    Register::None => None,
                    r => Some(full_reg(r).ok_or("bad base")?.0),
                };
                let index = match theirs.memory_index() {
                    Register::None => None,
                    r => Some((full_reg(r).ok_or("bad index")?.0, theirs.memory_index_scale() as u64)),
                };
                if base != m.base || index != m.index.map(|(r, s)| (r, s.factor())) {
                    return Err(format!("address {m} vs base {base:?} index {index:?}"));
                }
                if theirs.memory_displacement64() != m.disp as i64 as u64 {
                    return Err(format!("displacement {:#x} vs {:#x}", m.disp, theirs.memory_displacement64()));
                }
                if ours.mnemonic != Mnemonic::Lea && theirs.memory_size().size() != ours.width.bytes() {
                    return Err(format!("memory size {} vs {}", ours.width.bytes(), theirs.memory_size().size()));
                }
            }
            _ => return Err(format!("operand {i}: {op:?} vs {kind:?}")),
        }
    }
    Ok(())
}

fn cross_check(bytes: &[u8], failures: &mut Vec<String>) -> bool {
    match decode(bytes, 0) {
        Ok(ours) => {
            if let Err(e) = check(&ours, &iced(bytes)) {
                if failures.len() < 20 {
                    failures.push(format!("{bytes:02x?}: {ours}: {e}"));
                }
            }
            true
        }
        Err(e) => {
            if e.reason == InvalidReason::Truncated {
                let t = iced(bytes);
                assert!(t.is_invalid() || t.len() > bytes.len(), "{bytes:02x?} is not truncated for iced");
            }
            false
        }
    }
}

#[test]
fn add_rcx_rdx() {
    let ours = decode(&[0x48, 0x01, 0xD1], 0).unwrap();
    assert_eq!(ours.mnemonic, Mnemonic::Alu(AluOp::Add));
    assert_eq!(ours.operands, vec![Operand::Reg(Reg::Rcx), Operand::Reg(Reg::Rdx)]);
    check(&ours, &iced(&[0x48, 0x01, 0xD1])).unwrap();
}

#[test]
fn every_opcode_modrm_pair_agrees() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let mut failures = Vec::new();
    let mut accepted = 0usize;
    let prefixes: Vec<Option<u8>> = std::iter::once(None).chain((0x40..=0x4F).map(Some)).collect();
    for prefix in &prefixes {
        for two_byte in [false, true] {
            for op in 0..=255u8 {
                for modrm in 0..=255u8 {
                    let mut bytes = Vec::with_capacity(16);
                    bytes.extend(prefix.iter());
                    if two_byte {
                        bytes.push(0x0F);
                    }
                    bytes.push(op);
                    bytes.push(modrm);
                    for _ in 0..10 {
                        bytes.push(rng.gen());
                    }
                    if cross_check(&bytes, &mut failures) {
                        accepted += 1;
                    }
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(accepted > 100_000, "only {accepted} accepted");
}

#[test]
fn every_sib_byte_agrees() {
    let mut failures = Vec::new();
    for rex in [0x48u8, 0x49, 0x4A, 0x4B, 0x4C, 0x4F] {
        for md in 0..3u8 {
            for reg in 0..8u8 {
                for sib in 0..=255u8 {
                    let modrm = md << 6 | reg << 3 | 0b100;
                    let bytes = [rex, 0x8B, modrm, sib, 0x78, 0x56, 0x34, 0x12, 0x90];
                    assert!(cross_check(&bytes, &mut failures), "{bytes:02x?} rejected");
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn random_byte_streams_agree() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2);
    let mut failures = Vec::new();
    for _ in 0..200_000 {
        let len = rng.gen_range(1..=15);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        cross_check(&bytes, &mut failures);
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn truncation_at_every_cut() {
    let programs: [&[u8]; 4] = [
        &[0x48, 0xC7, 0xC0, 0x78, 0x56, 0x34, 0x12],
        &[0x48, 0x8B, 0x84, 0x8B, 0x10, 0x00, 0x00, 0x00],
        &[0x0F, 0x84, 0x00, 0x01, 0x00, 0x00],
        &[0x48, 0xB8, 1, 2, 3, 4, 5, 6, 7, 8],
    ];
    for p in programs {
        assert!(decode(p, 0).is_ok());
        for cut in 1..p.len() {
            assert_eq!(decode(&p[..cut], 0).unwrap_err().reason, InvalidReason::Truncated, "{:02x?}", &p[..cut]);
        }
    }
}
