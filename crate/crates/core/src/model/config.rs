use std::fmt;
use std::str::FromStr;

pub use crate::attention::AttnKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Full cross-channel convolution per branch (the CNT baseline).
    Standard,
    /// Depthwise branches fused by a pointwise convolution.
    Mdsc,
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvKind::Standard => "standard",
            ConvKind::Mdsc => "mdsc",
        })
    }
}

impl FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ConvKind::Standard),
            "mdsc" => Ok(ConvKind::Mdsc),
            other => Err(Error::Config(format!("unknown conv kind `{other}` (expected standard or mdsc)"))),
        }
    }
}

/// The four ablation networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Cnt,
    CntMdsc,
    CntBsa,
    LdRpmNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cnt, Variant::CntMdsc, Variant::CntBsa, Variant::LdRpmNet];

    pub fn kinds(self) -> (ConvKind, AttnKind) {
        match self {
            Variant::Cnt => (ConvKind::Standard, AttnKind::Mhsa),
            Variant::CntMdsc => (ConvKind::Mdsc, AttnKind::Mhsa),
            Variant::CntBsa => (ConvKind::Standard, AttnKind::Bsa),
            Variant::LdRpmNet => (ConvKind::Mdsc, AttnKind::Bsa),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnt => "cnt",
            Variant::CntMdsc => "cnt-mdsc",
            Variant::CntBsa => "cnt-bsa",
            Variant::LdRpmNet => "ld-rpmnet",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected cnt, cnt-mdsc, cnt-bsa or ld-rpmnet)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel_sizes: Vec<usize>,
    /// Max-pool window and stride applied after the block.
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub conv_kind: ConvKind,
    pub attn_kind: AttnKind,
    pub input_length: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// 8192-sample input, 64 tokens of width 64 after three pooled stages.
    fn default() -> Self {
        let stage = |c| StageConfig { out_channels: c, kernel_sizes: vec![3, 5, 7], pool_stride: 4 };
        ModelConfig {
            conv_kind: ConvKind::Mdsc,
            attn_kind: AttnKind::Bsa,
            input_length: 8192,
            stem: StemConfig { channels: 16, kernel: 7, stride: 2 },
            stages: vec![stage(32), stage(64), stage(64)],
            encoder: EncoderConfig { depth: 2, model_dim: 64, ffn_expansion: 2, heads: 4 },
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    /// Desk-scale variant: 2048-sample input and halved widths.
    pub fn reduced() -> Self {
        let stage = |c| StageConfig { out_channels: c, kernel_sizes: vec![3, 5, 7], pool_stride: 4 };
        ModelConfig {
            input_length: 2048,
            stem: StemConfig { channels: 8, kernel: 7, stride: 2 },
            stages: vec![stage(16), stage(32), stage(32)],
            encoder: EncoderConfig { depth: 2, model_dim: 32, ffn_expansion: 2, heads: 4 },
            ..Self::default()
        }
    }

    /// Tiny network used by the finite-difference suite.
    pub fn gradcheck_config(conv_kind: ConvKind, attn_kind: AttnKind) -> Self {
        ModelConfig {
            conv_kind,
            attn_kind,
            input_length: 64,
            stem: StemConfig { channels: 4, kernel: 3, stride: 2 },
            stages: vec![StageConfig { out_channels: 8, kernel_sizes: vec![3, 5], pool_stride: 2 }],
            encoder: EncoderConfig { depth: 1, model_dim: 8, ffn_expansion: 2, heads: 2 },
            num_classes: 10,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.conv_kind, self.attn_kind) = variant.kinds();
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.conv_kind, self.attn_kind) {
            (ConvKind::Standard, AttnKind::Mhsa) => Variant::Cnt,
            (ConvKind::Mdsc, AttnKind::Mhsa) => Variant::CntMdsc,
            (ConvKind::Standard, AttnKind::Bsa) => Variant::CntBsa,
            (ConvKind::Mdsc, AttnKind::Bsa) => Variant::LdRpmNet,
        }
    }

    /// Time extent after the stem.
    pub fn stem_len(&self) -> usize {
        self.input_length.div_ceil(self.stem.stride)
    }

    /// Time extent entering each stage, then the token count.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut n = self.stem_len();
        let mut out = vec![n];
        for s in &self.stages {
            n = if n >= s.pool_stride { (n - s.pool_stride) / s.pool_stride + 1 } else { 0 };
            out.push(n);
        }
        out
    }

    pub fn tokens(&self) -> usize {
        *self.stage_lengths().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if self.input_length == 0 || self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::Config("stem and input_length must be positive".into()));
        }
        if self.stem.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("stem kernel {} must be odd", self.stem.kernel)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if e.depth == 0 || e.model_dim == 0 || e.ffn_expansion == 0 || e.heads == 0 {
            return Err(Error::Config("encoder depth, model_dim, ffn_expansion and heads must be positive".into()));
        }
        if self.attn_kind == AttnKind::Mhsa && !e.model_dim.is_multiple_of(e.heads) {
            return Err(Error::Config(format!("model_dim {} not divisible by heads {}", e.model_dim, e.heads)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.pool_stride == 0 {
                return Err(Error::Config(format!("stage {i}: channels and pool_stride must be positive")));
            }
            crate::mdsc::MdscConfig::new(1, 1, s.kernel_sizes.clone())
                .map_err(|err| Error::Config(format!("stage {i}: {err}")))?;
        }
        let last = self.stages.last().map_or(self.stem.channels, |s| s.out_channels);
        if last != e.model_dim {
            return Err(Error::Config(format!("last stage width {last} must equal encoder model_dim {}", e.model_dim)));
        }
        if self.tokens() == 0 {
            return Err(Error::Config(format!("input_length {} leaves no tokens after pooling", self.input_length)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_lengths(), vec![4096, 1024, 256, 64]);
        assert_eq!(c.tokens(), 64);
        let r = ModelConfig::reduced();
        r.validate().unwrap();
        assert_eq!(r.tokens(), 16);
        ModelConfig::gradcheck_config(ConvKind::Mdsc, AttnKind::Bsa).validate().unwrap();
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut c = ModelConfig::default();
        c.encoder.model_dim = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(ModelConfig::default().with_variant(v).variant(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }
}
