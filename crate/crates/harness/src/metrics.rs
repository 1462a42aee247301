//! Code-size decomposition of a translated image against assembler ground
//! truth.

use std::fmt;

use tilebt::cfg::SupersetCfg;
use tilebt::tiles::TileBank;
use tilebt::translate::{translate_with, TranslateOptions, TranslatedImage, TranslationInfo};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub real_instruction_count: usize,
    pub valid_offset_count: usize,
    pub image_len: usize,
    pub target_instruction_count: usize,
    /// Target instructions at real offsets per real instruction.
    pub lowering_factor: f64,
    /// Valid offsets per real instruction.
    pub density_factor: f64,
    /// Mean code per valid offset over mean code per real offset.
    pub amplification_factor: f64,
    /// Target instructions per real instruction.
    pub expansion: f64,
    pub avg_source_instr_len: f64,
    /// Valid offsets per image byte.
    pub valid_decode_rate: f64,
}

impl MetricsReport {
    pub fn product(&self) -> f64 {
        self.lowering_factor * self.density_factor * self.amplification_factor
    }

    /// Relative gap between the expansion and the three-factor product.
    pub fn identity_error(&self) -> f64 {
        (self.expansion - self.product()).abs() / self.expansion
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "image bytes            {}", self.image_len)?;
        writeln!(f, "real instructions      {}", self.real_instruction_count)?;
        writeln!(f, "valid offsets          {}", self.valid_offset_count)?;
        writeln!(f, "target instructions    {}", self.target_instruction_count)?;
        writeln!(f, "valid-decode rate      {:.3}", self.valid_decode_rate)?;
        writeln!(f, "avg instruction length {:.2} B", self.avg_source_instr_len)?;
        writeln!(f, "lowering factor        {:.3}", self.lowering_factor)?;
        writeln!(f, "density factor         {:.3}", self.density_factor)?;
        writeln!(f, "amplification factor   {:.3}", self.amplification_factor)?;
        writeln!(f, "expansion              {:.3}", self.expansion)?;
        write!(f, "identity error         {:.4}%", 100.0 * self.identity_error())
    }
}

/// Computes the report from code attribution. `real` holds the offset and
/// length of every real instruction.
pub fn metrics_from(image: &TranslatedImage, info: &TranslationInfo, cfg: &SupersetCfg, real: &[(usize, usize)]) -> MetricsReport {
    let r = real.len().max(1) as f64;
    let valid: Vec<usize> = cfg.nodes.iter().filter(|n| n.is_valid()).map(|n| n.offset).collect();
    let v = valid.len().max(1) as f64;
    let s_real: usize = real.iter().map(|&(o, _)| info.attributed[o]).sum();
    let s_valid: usize = valid.iter().map(|&o| info.attributed[o]).sum();
    let lowering = s_real as f64 / r;
    let mean_real = s_real as f64 / r;
    let mean_valid = s_valid as f64 / v;
    MetricsReport {
        real_instruction_count: real.len(),
        valid_offset_count: valid.len(),
        image_len: image.source_image.len(),
        target_instruction_count: image.target_code.len(),
        lowering_factor: lowering,
        density_factor: valid.len() as f64 / r,
        amplification_factor: if mean_real > 0.0 { mean_valid / mean_real } else { 0.0 },
        expansion: image.target_code.len() as f64 / r,
        avg_source_instr_len: real.iter().map(|&(_, l)| l).sum::<usize>() as f64 / r,
        valid_decode_rate: valid.len() as f64 / image.source_image.len().max(1) as f64,
    }
}

/// Re-translates the embedded source of `image` to recover code attribution
/// and computes the report. Returns `None` if neither pruning mode
/// reproduces `image`.
pub fn metrics(image: &TranslatedImage, real: &[(usize, usize)]) -> Option<(MetricsReport, bool)> {
    for prune in [true, false] {
        let options = TranslateOptions { prune, image_base: image.image_base, hostcall_base: image.hostcall_base };
        let (again, info) = translate_with(&image.source_image, image.entry, options, TileBank::global());
        if &again == image {
            let cfg = SupersetCfg::from_image(&image.source_image);
            return Some((metrics_from(image, &info, &cfg, real), prune));
        }
    }
    None
}
