//! Superset control-flow graph: one node per byte offset of the image, and
//! backward flag liveness along fall-through chains.

use std::fmt::Write as _;

use crate::isa::{decode, DecodedInstruction, FlagMask, InvalidDecode, InvalidReason, Mnemonic};

/// A control-flow successor of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Successor {
    /// An offset inside the image.
    Offset(usize),
    /// A direct target outside the image, as a signed offset from the
    /// image start.
    External(i64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum NodeState {
    Valid(DecodedInstruction),
    Invalid(InvalidReason),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub offset: usize,
    pub state: NodeState,
    /// `offset + length` when the instruction may continue there and that
    /// offset lies inside the image.
    pub fallthrough: Option<usize>,
    pub direct_targets: Vec<Successor>,
    pub indirect: bool,
    pub terminal: bool,
    /// Flags that may be read after this node before being overwritten.
    pub live_flags: FlagMask,
    /// Flags that may be read from the start of this node on.
    pub live_in: FlagMask,
}

impl Node {
    pub fn instruction(&self) -> Option<&DecodedInstruction> {
        match &self.state {
            NodeState::Valid(insn) => Some(insn),
            NodeState::Invalid(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.state, NodeState::Valid(_))
    }

    /// Whether execution continues past the end of the image after this node.
    pub fn falls_off_end(&self) -> bool {
        self.instruction().is_some_and(|i| i.falls_through() && !i.is_control_flow()) && self.fallthrough.is_none()
    }

    /// Whether liveness must treat every flag as observable on entry: the
    /// node transfers control, ends a chain, or can fault (a fault exposes
    /// the flags as they were before the node).
    fn observes_all_flags(&self) -> bool {
        match self.instruction() {
            None => true,
            Some(insn) => insn.is_control_flow() || insn.accesses_memory() || self.fallthrough.is_none(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupersetCfg {
    pub nodes: Vec<Node>,
    pub image_len: usize,
}

/// Decodes at every offset of `image`, independently.
pub fn superset_disassemble(image: &[u8]) -> Vec<Result<DecodedInstruction, InvalidDecode>> {
    (0..image.len()).map(|offset| decode(image, offset)).collect()
}

fn build_node(offset: usize, decoded: &Result<DecodedInstruction, InvalidDecode>, image_len: usize) -> Node {
    let insn = match decoded {
        Ok(insn) => insn,
        Err(err) => {
            return Node {
                offset,
                state: NodeState::Invalid(err.reason),
                fallthrough: None,
                direct_targets: Vec::new(),
                indirect: false,
                terminal: true,
                live_flags: FlagMask::all(),
                live_in: FlagMask::all(),
            }
        }
    };
    let fallthrough = (insn.falls_through() && insn.end() < image_len).then_some(insn.end());
    let direct_targets = insn
        .direct_target()
        .map(|t| match usize::try_from(t) {
            Ok(o) if o < image_len => Successor::Offset(o),
            _ => Successor::External(t),
        })
        .into_iter()
        .collect();
    Node {
        offset,
        state: NodeState::Valid(insn.clone()),
        fallthrough,
        direct_targets,
        indirect: insn.is_indirect(),
        terminal: matches!(insn.mnemonic, Mnemonic::Ret | Mnemonic::Int3),
        live_flags: FlagMask::all(),
        live_in: FlagMask::all(),
    }
}

/// Builds the superset CFG from per-offset decodes. Liveness fields start
/// conservative (all flags live) until [`flag_liveness`] runs.
pub fn build_superset_cfg(decodes: &[Result<DecodedInstruction, InvalidDecode>], image_len: usize) -> SupersetCfg {
    assert_eq!(decodes.len(), image_len, "one decode per offset");
    let nodes = decodes.iter().enumerate().map(|(o, d)| build_node(o, d, image_len)).collect();
    SupersetCfg { nodes, image_len }
}

/// Backward flag liveness over fall-through chains.
///
/// Successors always lie at higher offsets, so one descending pass reaches
/// the fixed point.
pub fn flag_liveness(cfg: &mut SupersetCfg) {
    for o in (0..cfg.image_len).rev() {
        let node = &cfg.nodes[o];
        let (live_out, live_in) = match node.instruction() {
            Some(insn) if !node.observes_all_flags() => {
                let out = cfg.nodes[node.fallthrough.unwrap()].live_in;
                (out, insn.flags_read | (out - insn.flags_written))
            }
            Some(insn) if !insn.is_control_flow() => {
                let out = node.fallthrough.map_or(FlagMask::all(), |f| cfg.nodes[f].live_in);
                (out, FlagMask::all())
            }
            _ => (FlagMask::all(), FlagMask::all()),
        };
        let node = &mut cfg.nodes[o];
        node.live_flags = live_out;
        node.live_in = live_in;
    }
}

impl SupersetCfg {
    /// Disassembles, builds and annotates in one go.
    pub fn from_image(image: &[u8]) -> SupersetCfg {
        let mut cfg = build_superset_cfg(&superset_disassemble(image), image.len());
        flag_liveness(&mut cfg);
        cfg
    }

    pub fn valid_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_valid()).count()
    }

    /// Graphviz rendering: one node per offset, edges labelled `ft`,
    /// `br` or `ext`.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph superset {\n  node [shape=box, fontname=monospace];\n");
        for node in &self.nodes {
            let label = match &node.state {
                NodeState::Valid(insn) => {
                    let live = if node.live_flags == FlagMask::all() { "*".to_string() } else { node.live_flags.names() };
                    format!("{:#06x}: {insn}\\nlive: {live}", node.offset)
                }
                NodeState::Invalid(reason) => format!("{:#06x}: invalid ({reason:?})", node.offset),
            };
            let style = if node.is_valid() { "" } else { ", style=dashed" };
            let _ = writeln!(out, "  n{} [label=\"{}\"{style}];", node.offset, label.replace('"', "'"));
            if let Some(f) = node.fallthrough {
                let _ = writeln!(out, "  n{} -> n{f} [label=ft];", node.offset);
            }
            for target in &node.direct_targets {
                match target {
                    Successor::Offset(t) => {
                        let _ = writeln!(out, "  n{} -> n{t} [label=br];", node.offset);
                    }
                    Successor::External(t) => {
                        let _ = writeln!(out, "  ext{0} [label=\"external {t}\", shape=plaintext];", node.offset);
                        let _ = writeln!(out, "  n{0} -> ext{0} [label=ext];", node.offset);
                    }
                }
            }
            if node.indirect {
                let _ = writeln!(out, "  n{} -> indirect [style=dotted];", node.offset);
            }
        }
        out.push_str("}\n");
        out
    }
}
