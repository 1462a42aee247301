//! Hand-written golden programs.

use tilebt::isa::asm::{assemble, Assembly};
use tilebt::isa::memory::{HostCall, HOSTCALL_BASE};

/// Overlapping decodes: the byte at `return_c3` starts `mov al, 0xC3`,
/// one byte later the same `0xC3` is a `ret`.
pub const OVERLAPPING: &str = "
overlapping_instruction:
    xor eax, eax
    mov al, 0xC2
    test rdi, rdi
    jz return_c2
return_c3:
    .byte 0xB0
return_c2:
    .byte 0xC3
    ret
";

/// A computed branch into a run of `inc eax` instructions two bytes apart,
/// with the table base taken from a call's return address.
pub const WEIRD_INDIRECT: &str = "
weird_indirect_branch:
    and rdi, 3
    shl rdi, 1
    xor eax, eax
    call label
    inc eax
    inc eax
    inc eax
    inc eax
    ret
label:
    pop rsi
    add rsi, rdi
    jmp rsi
";

/// Twelve consecutive flag writers feeding one conditional branch: only
/// the last writer's flags are observable.
pub const CHAINED_ARITHMETIC: &str = "
chained:
    mov rax, rdi
    add rax, 7
    sub rax, rsi
    xor rax, 0x55
    add rax, rax
    and rax, 0xFFFF
    or rax, 3
    inc rax
    dec rcx
    shl rax, 2
    add rcx, rax
    sub rcx, 1
    cmp rcx, 100
    jb small
    mov rdi, 1
    ret
small:
    mov rdi, 2
    ret
";

/// A counted loop with a local call and a write hostcall.
pub fn counted_loop() -> String {
    format!(
        "
    mov rcx, 5
    xor eax, eax
again:
    call bump
    dec rcx
    jnz again
    mov rdi, rax
    mov r11, {write:#x}
    call r11
    mov rdi, rax
    ret
bump:
    add rax, rcx
    ret
",
        write = HostCall::WriteU64.slot_address(HOSTCALL_BASE)
    )
}

/// Every golden program by name.
pub fn goldens() -> Vec<(&'static str, String)> {
    vec![
        ("overlapping", OVERLAPPING.to_string()),
        ("weird_indirect", WEIRD_INDIRECT.to_string()),
        ("chained_arithmetic", CHAINED_ARITHMETIC.to_string()),
        ("counted_loop", counted_loop()),
    ]
}

pub fn assemble_golden(source: &str) -> Assembly {
    assemble(source).expect("golden programs assemble")
}
