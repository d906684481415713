use crate::attention::{AttnKind, BsaBlock, MhsaBlock};
use crate::autodiff::{BatchNormConfig, Conv1dOptions, Mode, RunningStats, Tape, Var};
use crate::complexity::LayerKind;
use crate::error::{Error, Result};
use crate::mdsc::{MdscBlock, MdscConfig, BN_EPS, BN_MOMENTUM};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::config::{ConvKind, ModelConfig};
use super::standard::StandardMultiScaleBlock;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const POS_EMBEDDING_BOUND: f64 = 0.02;

#[derive(Debug, Clone)]
pub enum ConvBlock {
    Standard(StandardMultiScaleBlock),
    Mdsc(MdscBlock),
}

impl ConvBlock {
    fn forward(&mut self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        match self {
            ConvBlock::Standard(b) => b.forward(tape, p, x, mode),
            ConvBlock::Mdsc(b) => b.forward(tape, p, x, mode),
        }
    }

    pub fn config(&self) -> &MdscConfig {
        match self {
            ConvBlock::Standard(b) => &b.config,
            ConvBlock::Mdsc(b) => &b.config,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ConvBlock::Standard(b) => b.param_ids(),
            ConvBlock::Mdsc(b) => b.param_ids(),
        }
    }

    fn bn_stats_mut(&mut self) -> &mut RunningStats {
        match self {
            ConvBlock::Standard(b) => &mut b.bn_stats,
            ConvBlock::Mdsc(b) => &mut b.bn_stats,
        }
    }

    fn bn_stats(&self) -> &RunningStats {
        match self {
            ConvBlock::Standard(b) => &b.bn_stats,
            ConvBlock::Mdsc(b) => &b.bn_stats,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Attention {
    Mhsa(MhsaBlock),
    Bsa(BsaBlock),
}

impl Attention {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Attention::Mhsa(b) => b.forward(tape, p, x),
            Attention::Bsa(b) => b.forward(tape, p, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Attention::Mhsa(b) => b.param_ids(),
            Attention::Bsa(b) => b.param_ids(),
        }
    }
}

#[derive(Debug, Clone)]
struct Stem {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub block: ConvBlock,
    pub pool: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: String, d: usize) -> Self {
        Norm {
            gamma: store.constant(format!("{prefix}.gamma"), &[d], 1.0),
            beta: store.constant(format!("{prefix}.beta"), &[d], 0.0),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Post-norm encoder layer: `LN(x + attn(x))`, then `LN(h + FFN(h))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: Attention,
    norm1: Norm,
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    norm2: Norm,
}

impl EncoderLayer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.attention.forward(tape, p, x)?;
        let h = tape.add(x, a)?;
        let h = self.norm1.apply(tape, p, h)?;
        let f = tape.linear(h, p[self.ffn_in.0], Some(p[self.ffn_in.1]))?;
        let f = tape.gelu(f)?;
        let f = tape.linear(f, p[self.ffn_out.0], Some(p[self.ffn_out.1]))?;
        let h2 = tape.add(h, f)?;
        self.norm2.apply(tape, p, h2)
    }
}

/// Stem, multi-scale conv stages, attention encoder, and a pooled linear head.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: Stem,
    pub stages: Vec<Stage>,
    pos_embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    head: (ParamId, ParamId),
}

impl Network {
    /// Allocates and initializes every parameter from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let sc = &config.stem;
        let stem = Stem {
            weight: store.fan_in("stem.conv.weight", &[sc.channels, 1, sc.kernel], sc.kernel),
            gamma: store.constant("stem.bn.gamma", &[sc.channels], 1.0),
            beta: store.constant("stem.bn.beta", &[sc.channels], 0.0),
            stats: RunningStats::new(sc.channels),
        };
        let mut channels = sc.channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let cfg = MdscConfig::new(channels, s.out_channels, s.kernel_sizes.clone())?;
            let prefix = format!("stages.{i}");
            let block = match config.conv_kind {
                ConvKind::Standard => ConvBlock::Standard(StandardMultiScaleBlock::new(&mut store, &prefix, &cfg)?),
                ConvKind::Mdsc => ConvBlock::Mdsc(MdscBlock::new(&mut store, &prefix, &cfg)?),
            };
            stages.push(Stage { block, pool: s.pool_stride });
            channels = s.out_channels;
        }
        let e = &config.encoder;
        let d = e.model_dim;
        let pos_embedding = store.uniform("encoder.pos_embedding", &[config.tokens(), d], POS_EMBEDDING_BOUND);
        let mut encoder = Vec::with_capacity(e.depth);
        for i in 0..e.depth {
            let prefix = format!("encoder.{i}");
            let attention = match config.attn_kind {
                AttnKind::Mhsa => Attention::Mhsa(MhsaBlock::new(&mut store, &format!("{prefix}.attn"), d, e.heads)?),
                AttnKind::Bsa => Attention::Bsa(BsaBlock::new(&mut store, &format!("{prefix}.attn"), d)?),
            };
            let norm1 = Norm::new(&mut store, format!("{prefix}.norm1"), d);
            let hidden = d * e.ffn_expansion;
            let ffn_in = (
                store.fan_in(format!("{prefix}.ffn.in.weight"), &[hidden, d], d),
                store.fan_in(format!("{prefix}.ffn.in.bias"), &[hidden], d),
            );
            let ffn_out = (
                store.fan_in(format!("{prefix}.ffn.out.weight"), &[d, hidden], hidden),
                store.fan_in(format!("{prefix}.ffn.out.bias"), &[d], hidden),
            );
            let norm2 = Norm::new(&mut store, format!("{prefix}.norm2"), d);
            encoder.push(EncoderLayer { attention, norm1, ffn_in, ffn_out, norm2 });
        }
        let head = (
            store.fan_in("head.weight", &[config.num_classes, d], d),
            store.fan_in("head.bias", &[config.num_classes], d),
        );
        Ok(Network { config: config.clone(), store, stem, stages, pos_embedding, encoder, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Every batch-norm running-stat buffer, in a fixed order.
    pub fn bn_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        std::iter::once(&mut self.stem.stats).chain(self.stages.iter_mut().map(|s| s.block.bn_stats_mut())).collect()
    }

    /// Named running-stat buffers (`<layer>.running_mean`, `<layer>.running_var`).
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        let stats = std::iter::once(("stem.bn".to_string(), &self.stem.stats))
            .chain(self.stages.iter().enumerate().map(|(i, s)| (format!("stages.{i}.bn"), s.block.bn_stats())));
        for (name, s) in stats {
            out.push((format!("{name}.running_mean"), s.mean.as_slice()));
            out.push((format!("{name}.running_var"), s.var.as_slice()));
        }
        out
    }

    /// Overwrites the buffer called `name`.
    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let names: Vec<String> = self.buffers().into_iter().map(|(n, _)| n).collect();
        let pos = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(format!("unknown buffer `{name}`")))?;
        let mut stats = self.bn_stats_mut();
        let target = stats.get_mut(pos / 2).expect("buffer index");
        let slot = if pos % 2 == 0 { &mut target.mean } else { &mut target.var };
        if slot.len() != values.len() {
            return Err(Error::Validation(format!("buffer `{name}` has {} values, got {}", slot.len(), values.len())));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    /// Logits `[B, classes]` using parameter handles already on the tape.
    pub fn forward_bound(&mut self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.try_value(x)?.shape().to_vec();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.config.input_length {
            return Err(Error::dim("network", format!("expected [B, 1, {}], got {shape:?}", self.config.input_length)));
        }
        let b = shape[0];
        let sc = &self.config.stem;
        let opts = Conv1dOptions { stride: sc.stride, padding: (sc.kernel - 1) / 2, groups: 1 };
        let mut h = tape.conv1d(x, p[self.stem.weight], None, opts)?;
        let bn = BatchNormConfig { mode, momentum: BN_MOMENTUM, eps: BN_EPS };
        h = tape.batch_norm(h, p[self.stem.gamma], p[self.stem.beta], &mut self.stem.stats, bn)?;
        h = tape.gelu(h)?;
        for stage in &mut self.stages {
            h = stage.block.forward(tape, p, h, mode)?;
            h = tape.max_pool1d(h, stage.pool, stage.pool)?;
        }
        // channels become the embedding, time becomes the token axis
        h = tape.permute(h, &[0, 2, 1])?;
        let (t, d) = (self.config.tokens(), self.config.encoder.model_dim);
        let pos = tape.reshape(p[self.pos_embedding], &[1, t, d])?;
        h = tape.add(h, pos)?;
        for layer in &self.encoder {
            h = layer.forward(tape, p, h)?;
        }
        let pooled = tape.mean_axis(h, 1)?;
        let pooled = tape.reshape(pooled, &[b, d])?;
        tape.linear(pooled, p[self.head.0], Some(p[self.head.1]))
    }

    /// Binds the parameters to `tape` and runs the forward pass.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Bound)> {
        let p = self.store.bind(tape, mode == Mode::Train);
        let logits = self.forward_bound(tape, &p, x, mode)?;
        Ok((logits, p))
    }

    /// Eval-mode logits for a `[B, 1, input_length]` batch.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let p = self.store.bind(&mut tape, false);
        let y = self.forward_bound(&mut tape, &p, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Names of parameters owned by the conv stages and by the encoder.
    pub fn stage_param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.block.param_ids()).collect()
    }

    /// Layer-by-layer description for complexity accounting, in forward order.
    pub fn describe(&self) -> Vec<(String, LayerKind)> {
        let c = &self.config;
        let mut layers = Vec::new();
        let sc = &c.stem;
        let stem_len = c.stem_len();
        layers.push((
            "stem.conv".to_string(),
            LayerKind::Conv1d {
                in_channels: 1,
                out_channels: sc.channels,
                kernel: sc.kernel,
                groups: 1,
                stride: sc.stride,
                padding: (sc.kernel - 1) / 2,
                in_len: c.input_length,
                bias: false,
            },
        ));
        layers
            .push(("stem.bn".into(), LayerKind::BatchNorm { channels: sc.channels, elements: sc.channels * stem_len }));
        layers.push(("stem.gelu".into(), LayerKind::Gelu { elements: sc.channels * stem_len }));
        let lengths = c.stage_lengths();
        for (i, stage) in self.stages.iter().enumerate() {
            let cfg = stage.block.config();
            let n = lengths[i];
            let (c1, c2) = (cfg.in_channels, cfg.out_channels);
            for &k in &cfg.kernel_sizes {
                let (name, groups) = match stage.block {
                    ConvBlock::Mdsc(_) => (format!("stages.{i}.depthwise.k{k}"), c1),
                    ConvBlock::Standard(_) => (format!("stages.{i}.branch.k{k}"), 1),
                };
                layers.push((
                    name,
                    LayerKind::Conv1d {
                        in_channels: c1,
                        out_channels: c1,
                        kernel: k,
                        groups,
                        stride: 1,
                        padding: (k - 1) / 2,
                        in_len: n,
                        bias: false,
                    },
                ));
            }
            layers.push((format!("stages.{i}.concat"), LayerKind::Concat));
            layers.push((
                format!("stages.{i}.pointwise"),
                LayerKind::Conv1d {
                    in_channels: cfg.branches() * c1,
                    out_channels: c2,
                    kernel: 1,
                    groups: 1,
                    stride: 1,
                    padding: 0,
                    in_len: n,
                    bias: true,
                },
            ));
            layers.push((format!("stages.{i}.bn"), LayerKind::BatchNorm { channels: c2, elements: c2 * n }));
            layers.push((format!("stages.{i}.gelu"), LayerKind::Gelu { elements: c2 * n }));
            layers.push((format!("stages.{i}.pool"), LayerKind::MaxPool { in_elements: c2 * n }));
        }
        let (t, d) = (c.tokens(), c.encoder.model_dim);
        let hidden = d * c.encoder.ffn_expansion;
        layers.push(("encoder.pos_embedding".into(), LayerKind::PositionalEmbedding { tokens: t, dim: d }));
        for i in 0..self.encoder.len() {
            let p = format!("encoder.{i}");
            layers.push((
                format!("{p}.attn"),
                LayerKind::Attention { kind: c.attn_kind, tokens: t, dim: d, heads: c.encoder.heads },
            ));
            layers.push((format!("{p}.residual1"), LayerKind::Residual { elements: t * d }));
            layers.push((format!("{p}.norm1"), LayerKind::LayerNorm { features: d, elements: t * d }));
            layers.push((
                format!("{p}.ffn.in"),
                LayerKind::Linear { in_features: d, out_features: hidden, rows: t, bias: true },
            ));
            layers.push((format!("{p}.ffn.gelu"), LayerKind::Gelu { elements: t * hidden }));
            layers.push((
                format!("{p}.ffn.out"),
                LayerKind::Linear { in_features: hidden, out_features: d, rows: t, bias: true },
            ));
            layers.push((format!("{p}.residual2"), LayerKind::Residual { elements: t * d }));
            layers.push((format!("{p}.norm2"), LayerKind::LayerNorm { features: d, elements: t * d }));
        }
        layers.push(("head.mean".into(), LayerKind::Mean { in_elements: t * d }));
        layers.push((
            "head.linear".into(),
            LayerKind::Linear { in_features: d, out_features: c.num_classes, rows: 1, bias: true },
        ));
        layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{AttnKind, Variant};

    #[test]
    fn zero_input_gives_finite_logits() {
        let cfg = ModelConfig::gradcheck_config(ConvKind::Mdsc, AttnKind::Bsa);
        let mut net = Network::build(&cfg, 1).unwrap();
        let y = net.predict(&Tensor::zeros(&[3, 1, cfg.input_length])).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
        assert!(y.is_finite());
    }

    #[test]
    fn wrong_length_is_a_dimension_error() {
        let cfg = ModelConfig::gradcheck_config(ConvKind::Standard, AttnKind::Mhsa);
        let mut net = Network::build(&cfg, 1).unwrap();
        let err = net.predict(&Tensor::zeros(&[1, 1, cfg.input_length + 1])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::reduced();
        let a = Network::build(&cfg, 42).unwrap();
        let b = Network::build(&cfg, 42).unwrap();
        let c = Network::build(&cfg, 43).unwrap();
        assert_eq!(a.store.flatten(), b.store.flatten());
        assert_ne!(a.store.flatten(), c.store.flatten());
    }

    #[test]
    fn described_params_match_allocation() {
        for v in Variant::ALL {
            for cfg in [
                ModelConfig::default(),
                ModelConfig::reduced(),
                ModelConfig::gradcheck_config(ConvKind::Mdsc, AttnKind::Bsa),
            ] {
                let cfg = cfg.with_variant(v);
                let net = Network::build(&cfg, 0).unwrap();
                let described: u64 = net.describe().iter().map(|(_, k)| k.params()).sum();
                assert_eq!(described as usize, net.parameter_count(), "{v}");
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let cfg = ModelConfig::gradcheck_config(ConvKind::Mdsc, AttnKind::Bsa);
        let mut net = Network::build(&cfg, 3).unwrap();
        let x = Tensor::new(&[2, 1, 64], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let before = net.buffers().into_iter().map(|(n, v)| (n, v.to_vec())).collect::<Vec<_>>();
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        let after = net.buffers().into_iter().map(|(n, v)| (n, v.to_vec())).collect::<Vec<_>>();
        assert_eq!(before, after);
    }
}
