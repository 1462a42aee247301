//! The image corpus: golden programs plus generated programs.

use tilebt::isa::asm::assemble;

use crate::gen::{gen_program, Features, GenSpec};
use crate::programs::goldens;

#[derive(Clone, Debug)]
pub struct CorpusImage {
    pub name: String,
    pub image: Vec<u8>,
    pub entry: usize,
    /// Offset and length of every real instruction.
    pub real: Vec<(usize, usize)>,
}

/// The goldens followed by generated programs, `size` images in all.
pub fn corpus(size: usize, budget: usize) -> Vec<CorpusImage> {
    let mut out: Vec<CorpusImage> = goldens()
        .into_iter()
        .map(|(name, text)| image_from(name.to_string(), &text))
        .collect();
    let mut seed = 0;
    while out.len() < size {
        let text = gen_program(&GenSpec::new(seed, budget, Features::ALL));
        out.push(image_from(format!("gen-{seed}"), &text));
        seed += 1;
    }
    out.truncate(size);
    out
}

fn image_from(name: String, text: &str) -> CorpusImage {
    let asm = assemble(text).unwrap_or_else(|e| panic!("{name}: {e}"));
    let real = asm.instructions.iter().map(|i| (i.offset, i.length as usize)).collect();
    CorpusImage { name, image: asm.image, entry: 0, real }
}
