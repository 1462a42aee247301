use bitflags::bitflags;

use super::Width;

bitflags! {
    /// The six arithmetic condition flags, at their RFLAGS bit positions.
    ///
    /// Used both as a set (which flags an instruction reads or writes) and
    /// as a value (which flags are currently 1).
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
    pub struct FlagMask: u16 {
        const CF = 1 << 0;
        const PF = 1 << 2;
        const AF = 1 << 4;
        const ZF = 1 << 6;
        const SF = 1 << 7;
        const OF = 1 << 11;
    }
}

impl FlagMask {
    /// Flags in the order used for display.
    pub const ORDER: [(FlagMask, &'static str); 6] = [
        (FlagMask::CF, "CF"),
        (FlagMask::PF, "PF"),
        (FlagMask::AF, "AF"),
        (FlagMask::ZF, "ZF"),
        (FlagMask::SF, "SF"),
        (FlagMask::OF, "OF"),
    ];

    pub fn names(self) -> String {
        let names: Vec<&str> = Self::ORDER
            .iter()
            .filter(|(f, _)| self.contains(*f))
            .map(|(_, n)| *n)
            .collect();
        names.join("|")
    }

    /// Decodes a packed flags word; bits outside the six flags are dropped.
    pub fn from_packed(word: u64) -> FlagMask {
        FlagMask::from_bits_truncate(word as u16)
    }

    pub fn packed(self) -> u64 {
        self.bits() as u64
    }
}

/// Arithmetic class that selects the flag definitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlagKind {
    Add,
    /// SUB and CMP.
    Sub,
    Inc,
    Dec,
    /// AND, OR, XOR, TEST.
    Logic,
    /// SHL by a nonzero, already masked count.
    Shl { count: u32 },
}

/// Result of a flag computation: which flags the instruction defines, and
/// their values. Flags outside `written` (CF for INC/DEC) are unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlagUpdate {
    pub written: FlagMask,
    pub values: FlagMask,
}

impl FlagUpdate {
    pub fn apply(self, old: FlagMask) -> FlagMask {
        (old - self.written) | (self.values & self.written)
    }
}

pub(crate) fn parity_even(byte: u8) -> bool {
    byte.count_ones().is_multiple_of(2)
}

/// Flag values for an operation at `width`.
///
/// `a` and `b` are the source operands, `result` the (unmasked or masked)
/// result, and `carry_out` the carry (add), borrow (sub) or last bit
/// shifted out (shl). Architecturally undefined outputs are pinned: AF is 0
/// for logic and shifts, OF is 0 for shifts by more than one.
pub fn compute_flags(kind: FlagKind, width: Width, a: u64, b: u64, result: u64, carry_out: bool) -> FlagUpdate {
    let bits = width.bits();
    let sign = 1u64 << (bits - 1);
    let r = result & width.mask();
    let mut values = FlagMask::empty();
    values.set(FlagMask::ZF, r == 0);
    values.set(FlagMask::SF, r & sign != 0);
    values.set(FlagMask::PF, parity_even(r as u8));

    let mut written = FlagMask::all();
    match kind {
        FlagKind::Add | FlagKind::Inc => {
            values.set(FlagMask::AF, (a ^ b ^ r) & 0x10 != 0);
            values.set(FlagMask::OF, (a ^ r) & (b ^ r) & sign != 0);
            if kind == FlagKind::Add {
                values.set(FlagMask::CF, carry_out);
            } else {
                written.remove(FlagMask::CF);
            }
        }
        FlagKind::Sub | FlagKind::Dec => {
            values.set(FlagMask::AF, (a ^ b ^ r) & 0x10 != 0);
            values.set(FlagMask::OF, (a ^ b) & (a ^ r) & sign != 0);
            if kind == FlagKind::Sub {
                values.set(FlagMask::CF, carry_out);
            } else {
                written.remove(FlagMask::CF);
            }
        }
        FlagKind::Logic => {}
        FlagKind::Shl { count } => {
            values.set(FlagMask::CF, carry_out);
            if count == 1 {
                values.set(FlagMask::OF, (r & sign != 0) != carry_out);
            }
        }
    }
    FlagUpdate { written, values }
}
