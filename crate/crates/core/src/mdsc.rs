//! Multi-scale depthwise separable convolution.
//!
//! ```text
//! x [B, C1, N1]
//!   ├─ depthwise conv k_1 (groups = C1) ─┐
//!   ├─ depthwise conv k_2 (groups = C1) ─┼─ concat [B, L·C1, N2] ─ pointwise [B, C2, N2] ─ BN ─ GELU
//!   └─ depthwise conv k_L (groups = C1) ─┘
//! ```
//!
//! Every branch uses "same" padding `(k - 1) / 2`, so all branch outputs
//! share the time extent `N2 = ceil(N1 / stride)` and the concatenation is
//! well formed. Stride is applied in the depthwise stage only.

use crate::autodiff::{BatchNormConfig, Conv1dOptions, Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MdscConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
}

impl MdscConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel_sizes: Vec<usize>) -> Result<Self> {
        let cfg = MdscConfig { in_channels, out_channels, kernel_sizes, stride: 1 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("at least one kernel size is required".into()));
        }
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} is not odd")));
            }
            if self.kernel_sizes[..i].contains(&k) {
                return Err(Error::Config(format!("kernel size {k} listed twice")));
            }
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.kernel_sizes.len()
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Output time extent for an input of length `n`.
    pub fn out_len(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    pub(crate) fn check_input(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(Error::dim(op, format!("expected [B, {}, N], got {shape:?}", self.in_channels)));
        }
        if self.stride > 1 && shape[2] < self.max_kernel() {
            return Err(Error::DegenerateLength(format!(
                "{op}: input length {} shorter than largest kernel {} with stride {}",
                shape[2],
                self.max_kernel(),
                self.stride
            )));
        }
        Ok(())
    }
}

/// Learnable scalars of an MDSC block:
/// depthwise `Σ C1·k_l`, pointwise `L·C1·C2`, pointwise bias `C2`, BN affine `2·C2`.
pub fn mdsc_param_count(cfg: &MdscConfig) -> usize {
    let c1 = cfg.in_channels;
    let c2 = cfg.out_channels;
    let depthwise: usize = cfg.kernel_sizes.iter().map(|k| c1 * k).sum();
    depthwise + cfg.branches() * c1 * c2 + c2 + 2 * c2
}

/// Pointwise fusion, batch norm, and GELU shared by the multi-scale blocks.
#[derive(Debug, Clone)]
pub(crate) struct Fusion {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, prefix: &str, concat_channels: usize, out_channels: usize) -> Self {
        Fusion {
            weight: store.fan_in(
                format!("{prefix}.pointwise.weight"),
                &[out_channels, concat_channels, 1],
                concat_channels,
            ),
            bias: store.fan_in(format!("{prefix}.pointwise.bias"), &[out_channels], concat_channels),
            gamma: store.constant(format!("{prefix}.bn.gamma"), &[out_channels], 1.0),
            beta: store.constant(format!("{prefix}.bn.beta"), &[out_channels], 0.0),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.weight, self.bias, self.gamma, self.beta]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        concat: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let y = tape.conv1d(concat, p[self.weight], Some(p[self.bias]), Conv1dOptions::default())?;
        let bn = BatchNormConfig { mode, momentum: BN_MOMENTUM, eps: BN_EPS };
        let y = tape.batch_norm(y, p[self.gamma], p[self.beta], stats, bn)?;
        tape.gelu(y)
    }
}

#[derive(Debug, Clone)]
pub struct MdscBlock {
    pub config: MdscConfig,
    /// One `[C1, 1, k_l]` filter bank per kernel size.
    pub depthwise: Vec<ParamId>,
    pub(crate) fusion: Fusion,
    pub bn_stats: RunningStats,
}

impl MdscBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &MdscConfig) -> Result<Self> {
        config.validate()?;
        let c1 = config.in_channels;
        let depthwise = config
            .kernel_sizes
            .iter()
            .map(|&k| store.fan_in(format!("{prefix}.depthwise.k{k}"), &[c1, 1, k], k))
            .collect();
        let fusion = Fusion::new(store, prefix, config.branches() * c1, config.out_channels);
        Ok(MdscBlock { config: config.clone(), depthwise, fusion, bn_stats: RunningStats::new(config.out_channels) })
    }

    pub fn pointwise_weight(&self) -> ParamId {
        self.fusion.weight
    }

    pub fn pointwise_bias(&self) -> ParamId {
        self.fusion.bias
    }

    pub fn bn_gamma(&self) -> ParamId {
        self.fusion.gamma
    }

    pub fn bn_beta(&self) -> ParamId {
        self.fusion.beta
    }

    /// Every parameter the block owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.depthwise.iter().copied().chain(self.fusion.ids()).collect()
    }

    /// Length of the block's flattened parameter vector.
    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.numel_of(&self.param_ids())
    }

    /// The concatenated depthwise branch outputs `[B, L·C1, N2]`.
    pub fn branches(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.config.check_input("mdsc_forward", tape.try_value(x)?.shape())?;
        let c1 = self.config.in_channels;
        let outs = self
            .config
            .kernel_sizes
            .iter()
            .zip(&self.depthwise)
            .map(|(&k, &w)| {
                let opts = Conv1dOptions { stride: self.config.stride, padding: (k - 1) / 2, groups: c1 };
                tape.conv1d(x, p[w], None, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs, 1)
    }

    /// `[B, C1, N1] -> [B, C2, ceil(N1 / stride)]`.
    pub fn forward(&mut self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let z = self.branches(tape, p, x)?;
        self.fusion.forward(tape, p, z, &mut self.bn_stats, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn param_count_closed_form() {
        assert_eq!(mdsc_param_count(&MdscConfig::new(4, 8, vec![3, 5]).unwrap()), 120);
        assert_eq!(mdsc_param_count(&MdscConfig::new(1, 1, vec![1]).unwrap()), 5);
    }

    #[test]
    fn param_count_matches_allocation() {
        for (c1, c2, ks) in [(4, 8, vec![3, 5]), (1, 1, vec![1]), (16, 32, vec![3, 5, 7]), (3, 2, vec![7])] {
            let cfg = MdscConfig::new(c1, c2, ks).unwrap();
            let mut store = ParamStore::new(0);
            let block = MdscBlock::new(&mut store, "b", &cfg).unwrap();
            assert_eq!(block.parameter_count(&store), mdsc_param_count(&cfg));
            assert_eq!(store.flatten().len(), mdsc_param_count(&cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(MdscConfig::new(2, 2, vec![]).is_err());
        assert!(MdscConfig::new(2, 2, vec![4]).is_err());
        assert!(MdscConfig::new(2, 2, vec![3, 3]).is_err());
        assert!(MdscConfig::new(0, 2, vec![3]).is_err());
        assert!(MdscConfig::new(2, 2, vec![3]).unwrap().with_stride(0).is_err());
    }

    #[test]
    fn identity_path_reduces_to_gelu() {
        let cfg = MdscConfig::new(1, 1, vec![1]).unwrap();
        let mut store = ParamStore::new(0);
        let mut block = MdscBlock::new(&mut store, "b", &cfg).unwrap();
        *store.get_mut(block.depthwise[0]) = Tensor::full(&[1, 1, 1], 1.0);
        *store.get_mut(block.pointwise_weight()) = Tensor::full(&[1, 1, 1], 1.0);
        *store.get_mut(block.pointwise_bias()) = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(&[1, 1, 2], vec![2.0, -2.0]).unwrap());
        let y = block.forward(&mut tape, &p, x, Mode::Eval).unwrap();
        // running mean 0, var 1: BN divides by sqrt(1 + eps)
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        let want = [crate::autodiff::gelu_scalar(2.0 * s), crate::autodiff::gelu_scalar(-2.0 * s)];
        for (g, w) in tape.value(y).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        // the un-normalized GELU([2, -2]) differs by O(eps)
        let phi = |v: f64| 0.5 * (1.0 + libm::erf(v / 2f64.sqrt()));
        assert!((tape.value(y).data()[0] - 2.0 * phi(2.0)).abs() < 2.0 * BN_EPS);
        assert!((tape.value(y).data()[1] + 2.0 * phi(-2.0)).abs() < 2.0 * BN_EPS);
    }

    #[test]
    fn strided_output_length_and_errors() {
        let cfg = MdscConfig::new(2, 3, vec![3, 5]).unwrap().with_stride(2).unwrap();
        let mut store = ParamStore::new(0);
        let mut block = MdscBlock::new(&mut store, "b", &cfg).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 2, 9]));
        let y = block.forward(&mut tape, &p, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 5]);
        let bad = tape.constant(Tensor::zeros(&[2, 3, 9]));
        assert!(matches!(block.forward(&mut tape, &p, bad, Mode::Train), Err(Error::Dimension { .. })));
        let short = tape.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(matches!(block.forward(&mut tape, &p, short, Mode::Train), Err(Error::DegenerateLength(_))));
    }
}
