//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! conv_kind = mdsc
//! attn_kind = bsa
//! stage_channels = 32, 64, 64
//! kernel_sizes = 3, 5, 7
//! learning_rate = 0.001
//! ```
//!
//! Missing keys keep their defaults; unknown keys are an error.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 16, learning_rate: 0.001, epochs: 50, seed: 0, optimizer: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Recognized keys, in canonical order.
pub const KEYS: &[&str] = &[
    "conv_kind",
    "attn_kind",
    "input_length",
    "stem_channels",
    "stem_kernel",
    "stem_stride",
    "stage_channels",
    "kernel_sizes",
    "pool_stride",
    "model_dim",
    "depth",
    "ffn_expansion",
    "heads",
    "num_classes",
    "batch_size",
    "learning_rate",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
];

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

/// Model keys in canonical order. Fails if the stages do not share one kernel set and pool stride.
pub fn model_to_text(m: &ModelConfig) -> Result<String> {
    let first = m.stages.first();
    let kernels = first.map(|s| s.kernel_sizes.clone()).unwrap_or_default();
    let pool = first.map_or(1, |s| s.pool_stride);
    if m.stages.iter().any(|s| s.kernel_sizes != kernels || s.pool_stride != pool) {
        return Err(Error::Config(
            "stages with differing kernel sets or pool strides cannot be written as text".into(),
        ));
    }
    let widths: Vec<usize> = m.stages.iter().map(|s| s.out_channels).collect();
    let mut out = String::new();
    let _ = writeln!(out, "conv_kind = {}", m.conv_kind);
    let _ = writeln!(out, "attn_kind = {}", m.attn_kind);
    let _ = writeln!(out, "input_length = {}", m.input_length);
    let _ = writeln!(out, "stem_channels = {}", m.stem.channels);
    let _ = writeln!(out, "stem_kernel = {}", m.stem.kernel);
    let _ = writeln!(out, "stem_stride = {}", m.stem.stride);
    let _ = writeln!(out, "stage_channels = {}", join(&widths));
    let _ = writeln!(out, "kernel_sizes = {}", join(&kernels));
    let _ = writeln!(out, "pool_stride = {pool}");
    let _ = writeln!(out, "model_dim = {}", m.encoder.model_dim);
    let _ = writeln!(out, "depth = {}", m.encoder.depth);
    let _ = writeln!(out, "ffn_expansion = {}", m.encoder.ffn_expansion);
    let _ = writeln!(out, "heads = {}", m.encoder.heads);
    let _ = writeln!(out, "num_classes = {}", m.num_classes);
    Ok(out)
}

/// Full canonical text. Floats use Rust's shortest round-trip formatting.
pub fn to_text(m: &ModelConfig, t: &TrainConfig) -> Result<String> {
    let mut out = model_to_text(m)?;
    let o = &t.optimizer;
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "learning_rate = {:?}", t.learning_rate);
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "seed = {}", t.seed);
    let _ = writeln!(out, "beta1 = {:?}", o.beta1);
    let _ = writeln!(out, "beta2 = {:?}", o.beta2);
    let _ = writeln!(out, "eps = {:?}", o.eps);
    let _ = writeln!(out, "weight_decay = {:?}", o.weight_decay);
    Ok(out)
}

struct Line<'a> {
    path: &'a Path,
    number: usize,
}

impl Line<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), line: self.number, detail: detail.into() }
    }

    fn value<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| self.err(format!("invalid value `{raw}` for `{key}`")))
    }

    fn list(&self, key: &str, raw: &str) -> Result<Vec<usize>> {
        let items: Vec<&str> = raw.split(',').map(str::trim).collect();
        if items.iter().any(|s| s.is_empty()) {
            return Err(self.err(format!("`{key}` expects a comma-separated list of integers")));
        }
        items.into_iter().map(|s| self.value(key, s)).collect()
    }
}

/// Parses configuration text. `path` is only used in error messages.
pub fn parse(text: &str, path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let mut m = ModelConfig::default();
    let mut t = TrainConfig::default();
    let mut widths: Option<Vec<usize>> = None;
    let mut kernels: Option<Vec<usize>> = None;
    let mut pool: Option<usize> = None;
    let mut seen: Vec<&str> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = Line { path, number: i + 1 };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| line.err("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(Error::UnknownKey { path: path.to_path_buf(), line: line.number, key: key.to_string() });
        };
        if seen.contains(&known) {
            return Err(line.err(format!("duplicate key `{key}`")));
        }
        seen.push(known);
        if value.is_empty() {
            return Err(line.err(format!("missing value for `{key}`")));
        }
        match known {
            "conv_kind" => m.conv_kind = value.parse().map_err(|e: Error| line.err(e.to_string()))?,
            "attn_kind" => m.attn_kind = value.parse().map_err(|e: Error| line.err(e.to_string()))?,
            "input_length" => m.input_length = line.value(key, value)?,
            "stem_channels" => m.stem.channels = line.value(key, value)?,
            "stem_kernel" => m.stem.kernel = line.value(key, value)?,
            "stem_stride" => m.stem.stride = line.value(key, value)?,
            "stage_channels" => widths = Some(line.list(key, value)?),
            "kernel_sizes" => kernels = Some(line.list(key, value)?),
            "pool_stride" => pool = Some(line.value(key, value)?),
            "model_dim" => m.encoder.model_dim = line.value(key, value)?,
            "depth" => m.encoder.depth = line.value(key, value)?,
            "ffn_expansion" => m.encoder.ffn_expansion = line.value(key, value)?,
            "heads" => m.encoder.heads = line.value(key, value)?,
            "num_classes" => m.num_classes = line.value(key, value)?,
            "batch_size" => t.batch_size = line.value(key, value)?,
            "learning_rate" => t.learning_rate = line.value(key, value)?,
            "epochs" => t.epochs = line.value(key, value)?,
            "seed" => t.seed = line.value(key, value)?,
            "beta1" => t.optimizer.beta1 = line.value(key, value)?,
            "beta2" => t.optimizer.beta2 = line.value(key, value)?,
            "eps" => t.optimizer.eps = line.value(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = line.value(key, value)?,
            _ => unreachable!("key table and match disagree"),
        }
    }

    if widths.is_some() || kernels.is_some() || pool.is_some() {
        let base =
            m.stages.first().cloned().unwrap_or(StageConfig { out_channels: 1, kernel_sizes: vec![3], pool_stride: 1 });
        let widths = widths.unwrap_or_else(|| m.stages.iter().map(|s| s.out_channels).collect());
        let kernels = kernels.unwrap_or(base.kernel_sizes);
        let pool = pool.unwrap_or(base.pool_stride);
        m.stages = widths
            .into_iter()
            .map(|c| StageConfig { out_channels: c, kernel_sizes: kernels.clone(), pool_stride: pool })
            .collect();
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttnKind, ConvKind};

    fn p(text: &str) -> Result<(ModelConfig, TrainConfig)> {
        parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn empty_is_defaults() {
        let (m, t) = p("").unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(t, TrainConfig::default());
        assert_eq!(t.batch_size, 16);
        assert_eq!(t.epochs, 50);
    }

    #[test]
    fn learning_rate_value() {
        let (_, t) = p("learning_rate = 0.001\n").unwrap();
        assert_eq!(t.learning_rate, 0.001);
    }

    #[test]
    fn typo_names_the_line() {
        match p("batch_sise = 16\n") {
            Err(Error::UnknownKey { line, key, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(key, "batch_sise");
            }
            other => panic!("{other:?}"),
        }
        match p("# header\n\nepochs = 3\nheads = 4\nfoo = 1\n") {
            Err(Error::UnknownKey { line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(p("epochs = 3\nbatch_size = sixteen\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(p("epochs\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(p("epochs = 1\nepochs = 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(p("kernel_sizes = 3,,5\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(p("conv_kind = dense\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        assert!(matches!(p("model_dim = 32\n"), Err(Error::Config(_))));
        assert!(matches!(p("batch_size = 0\n"), Err(Error::Config(_))));
        assert!(matches!(p("learning_rate = -1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut m = ModelConfig::reduced();
        m.conv_kind = ConvKind::Standard;
        m.attn_kind = AttnKind::Mhsa;
        let t = TrainConfig { learning_rate: 3e-4, seed: 9, ..TrainConfig::default() };
        let text = to_text(&m, &t).unwrap();
        let (m2, t2) = p(&text).unwrap();
        assert_eq!((m2, t2), (m, t));
    }

    #[test]
    fn stage_keys_override_together() {
        let (m, _) =
            p("stage_channels = 8, 16\nkernel_sizes = 3\npool_stride = 2\nmodel_dim = 16\nheads = 2\n").unwrap();
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.stages[1], StageConfig { out_channels: 16, kernel_sizes: vec![3], pool_stride: 2 });
    }
}
