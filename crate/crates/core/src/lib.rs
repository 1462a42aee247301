//! Static, heuristic-free binary translation of an x86-64 subset into a
//! compact RISC target ("T64") by superset disassembly and a tile bank.
//!
//! The pipeline is: decode every byte offset ([`cfg::superset_disassemble`]),
//! build the superset CFG and flag liveness ([`cfg`]), pick specialized
//! tiles per instruction ([`tiles`]), lower, lay out and link them
//! ([`translate`]), and execute or serialize the result ([`vm`]). The
//! reference interpreter in [`isa::interp`] is the oracle.

pub mod cfg;
pub mod isa;
pub mod regmap;
pub mod tiles;
pub mod translate;
pub mod vm;
