//! Fixed assignment of source registers to target registers.

use crate::isa::Reg;

/// Number of target registers.
pub const TARGET_REGS: usize = 32;

/// Fixed mapping from source registers to T64 registers, plus the packed
/// flags register and the tile scratch registers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegisterMap {
    gpr: [u8; 16],
    flags: u8,
    scratch: [u8; 6],
}

/// Argument registers sit at their argument position (RDI, RSI, RDX, RCX,
/// R8, R9 in T0..T5), caller-saved registers stay below T19 and callee-saved
/// ones occupy T19..T25.
const DEFAULT_GPR: [u8; 16] = [
    9,  // RAX
    3,  // RCX
    2,  // RDX
    19, // RBX
    25, // RSP
    20, // RBP
    1,  // RSI
    0,  // RDI
    4,  // R8
    5,  // R9
    10, // R10
    11, // R11
    21, // R12
    22, // R13
    23, // R14
    24, // R15
];

pub fn default_register_map() -> RegisterMap {
    RegisterMap { gpr: DEFAULT_GPR, flags: 14, scratch: [15, 16, 17, 18, 12, 13] }
}

impl Default for RegisterMap {
    fn default() -> Self {
        default_register_map()
    }
}

impl RegisterMap {
    /// Builds a map, checking that every assigned register is distinct and
    /// in range.
    pub fn new(gpr: [u8; 16], flags: u8, scratch: [u8; 6]) -> Option<RegisterMap> {
        let mut seen = [false; TARGET_REGS];
        for r in gpr.iter().chain([&flags]).chain(scratch.iter()) {
            let slot = seen.get_mut(*r as usize)?;
            if *slot {
                return None;
            }
            *slot = true;
        }
        Some(RegisterMap { gpr, flags, scratch })
    }

    pub fn target(&self, reg: Reg) -> u8 {
        self.gpr[reg.index()]
    }

    pub fn flags_reg(&self) -> u8 {
        self.flags
    }

    /// Scratch register `k` (S0..S5).
    pub fn scratch(&self, k: usize) -> u8 {
        self.scratch[k]
    }

    pub fn scratch_regs(&self) -> &[u8] {
        &self.scratch
    }

    /// Source register held in target register `t`, if any.
    pub fn source(&self, t: u8) -> Option<Reg> {
        self.gpr.iter().position(|&g| g == t).map(|i| Reg::from_index(i as u8))
    }

    pub fn is_scratch(&self, t: u8) -> bool {
        self.scratch.contains(&t)
    }

    /// Display name of a target register: the source register it holds,
    /// `F` for the flags register, `S0..S5` for scratch, `T<n>` otherwise.
    pub fn name(&self, t: u8) -> String {
        if let Some(r) = self.source(t) {
            r.name().to_string()
        } else if t == self.flags {
            "F".into()
        } else if let Some(k) = self.scratch.iter().position(|&s| s == t) {
            format!("S{k}")
        } else {
            format!("T{t}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_pairs() {
        let map = default_register_map();
        assert_eq!(map.target(Reg::Rcx), 3);
        assert_eq!(map.target(Reg::Rdx), 2);
        assert_eq!(map.target(Reg::Rax), 9);
        assert_eq!(map.flags_reg(), 14);
    }

    #[test]
    fn injective_and_disjoint() {
        let map = default_register_map();
        assert!(RegisterMap::new(map.gpr, map.flags, map.scratch).is_some());
        for reg in Reg::ALL {
            assert_eq!(map.source(map.target(reg)), Some(reg));
        }
        assert!(RegisterMap::new([0; 16], 14, [15, 16, 17, 18, 12, 13]).is_none());
    }
}
