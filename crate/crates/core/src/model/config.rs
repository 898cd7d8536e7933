use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::FeatureDims;
use crate::error::{Error, Result};

/// Encoder segments, in the order they appear in the input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    Global,
    RegionsGr,
    RegionsFrcnn,
    Guide,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Global, Segment::RegionsGr, Segment::RegionsFrcnn, Segment::Guide];

    pub fn type_id(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Segment::Global => "G",
            Segment::RegionsGr => "R_GR",
            Segment::RegionsFrcnn => "R_FRCNN",
            Segment::Guide => "T",
        }
    }
}

/// Which inputs the encoder consumes. Labels follow the ablation names,
/// e.g. `T+G+R_GR`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFlags {
    pub guide: bool,
    pub global: bool,
    pub regions_gr: bool,
    pub regions_frcnn: bool,
}

impl InputFlags {
    pub const FULL: InputFlags = InputFlags { guide: true, global: true, regions_gr: true, regions_frcnn: true };
    pub const GUIDE_ONLY: InputFlags = InputFlags { guide: true, global: false, regions_gr: false, regions_frcnn: false };

    pub fn has(&self, s: Segment) -> bool {
        match s {
            Segment::Global => self.global,
            Segment::RegionsGr => self.regions_gr,
            Segment::RegionsFrcnn => self.regions_frcnn,
            Segment::Guide => self.guide,
        }
    }

    pub fn enabled(&self) -> impl Iterator<Item = Segment> + '_ {
        Segment::ALL.into_iter().filter(|s| self.has(*s))
    }

    pub fn is_empty(&self) -> bool {
        self.enabled().next().is_none()
    }
}

impl fmt::Display for InputFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // T first, then image features in encoder order
        let mut parts = Vec::new();
        if self.guide {
            parts.push("T");
        }
        parts.extend(Segment::ALL[..3].iter().filter(|s| self.has(**s)).map(|s| s.label()));
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for InputFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = InputFlags { guide: false, global: false, regions_gr: false, regions_frcnn: false };
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "T" => &mut flags.guide,
                "G" => &mut flags.global,
                "R_GR" => &mut flags.regions_gr,
                "R_FRCNN" => &mut flags.regions_frcnn,
                other => return Err(Error::Input(format!("unknown input `{other}` in `{s}`"))),
            };
            if *slot {
                return Err(Error::Input(format!("input `{part}` repeated in `{s}`")));
            }
            *slot = true;
        }
        Ok(flags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub input_flags: InputFlags,
    pub feature_dims: FeatureDims,
    /// Hidden width of each feature projection network.
    pub fc_hidden: usize,
    pub dropout: f32,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_caption_len: 32,
            input_flags: InputFlags::FULL,
            feature_dims: FeatureDims::default(),
            fc_hidden: 64,
            dropout: 0.0,
        }
    }

    /// Six encoder and decoder layers with eight heads.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            fc_hidden: 512,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn with_flags(mut self, flags: InputFlags) -> Self {
        self.input_flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.input_flags.is_empty() {
            return fail("at least one input must be enabled".into());
        }
        if self.vocab_size <= crate::tokenizer::SPECIALS.len() {
            return fail(format!("vocabulary of {} leaves no room for text", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.fc_hidden == 0 || self.max_caption_len < 2 {
            return fail("layer count, widths and max_caption_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Name and shape of every trainable tensor, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.tokens".into(), vec![self.vocab_size, d]),
            ("embed.types".into(), vec![Segment::ALL.len(), d]),
        ];
        let fd = self.feature_dims;
        for (seg, prefix, width) in [
            (Segment::Global, "fc_g", fd.global),
            (Segment::RegionsGr, "fc_rgr", fd.regional_gr),
            (Segment::RegionsFrcnn, "fc_rfrcnn", fd.regional_frcnn),
        ] {
            if self.input_flags.has(seg) {
                out.push((format!("{prefix}.w1"), vec![width, self.fc_hidden]));
                out.push((format!("{prefix}.b1"), vec![self.fc_hidden]));
                out.push((format!("{prefix}.w2"), vec![self.fc_hidden, d]));
                out.push((format!("{prefix}.b2"), vec![d]));
            }
        }
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            out.push((format!("{p}.bias"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.{w}"), vec![d, d]));
            }
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, self.d_ff]));
            out.push((format!("{p}.b1"), vec![self.d_ff]));
            out.push((format!("{p}.w2"), vec![self.d_ff, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for l in 0..self.n_layers {
            let p = format!("enc.{l}");
            ln(&mut out, &format!("{p}.ln_attn"));
            attn(&mut out, &format!("{p}.self"));
            ln(&mut out, &format!("{p}.ln_ff"));
            ff(&mut out, &format!("{p}.ff"));
        }
        ln(&mut out, "enc.ln_out");
        for l in 0..self.n_layers {
            let p = format!("dec.{l}");
            ln(&mut out, &format!("{p}.ln_self"));
            attn(&mut out, &format!("{p}.self"));
            ln(&mut out, &format!("{p}.ln_cross"));
            attn(&mut out, &format!("{p}.cross"));
            ln(&mut out, &format!("{p}.ln_ff"));
            ff(&mut out, &format!("{p}.ff"));
        }
        ln(&mut out, "dec.ln_out");
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Encoder sequence length for a guide of `guide_len` tokens, padding included.
    pub fn encoder_len(&self, guide_len: usize) -> usize {
        let r = self.feature_dims.max_regions;
        let f = &self.input_flags;
        usize::from(f.global) + r * usize::from(f.regions_gr) + r * usize::from(f.regions_frcnn)
            + if f.guide { guide_len } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_names_round_trip() {
        for name in ["T", "G", "T+G", "T+G+R_GR", "T+G+R_FRCNN", "T+G+R_GR+R_FRCNN"] {
            let f: InputFlags = name.parse().unwrap();
            assert_eq!(f.to_string(), name);
        }
        assert!("T+X".parse::<InputFlags>().is_err());
        assert!("T+T".parse::<InputFlags>().is_err());
    }

    #[test]
    fn encoder_lengths() {
        let cfg = ModelConfig::desk(100);
        assert_eq!(cfg.encoder_len(3), 36);
        assert_eq!(cfg.clone().with_flags(InputFlags::GUIDE_ONLY).encoder_len(3), 3);
    }

    #[test]
    fn validation() {
        let mut cfg = ModelConfig::desk(100);
        cfg.validate().unwrap();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::desk(100).with_flags(InputFlags { guide: false, global: false, regions_gr: false, regions_frcnn: false });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_scale_parameter_count_is_tens_of_millions() {
        let full = ModelConfig::paper(4000).parameter_count();
        let no_frcnn = ModelConfig::paper(4000)
            .with_flags("T+G+R_GR".parse().unwrap())
            .parameter_count();
        assert!((30_000_000..70_000_000).contains(&full), "{full}");
        assert!(no_frcnn < full);
    }
}
