use crate::autodiff::{Conv1dOptions, Mode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::mdsc::{Fusion, MdscConfig};
use crate::params::{Bound, ParamId, ParamStore};

/// Multi-scale block with full cross-channel branches `C1 -> C1`. Same
/// topology as [`crate::mdsc::MdscBlock`]; only the depthwise factorization
/// is missing.
#[derive(Debug, Clone)]
pub struct StandardMultiScaleBlock {
    pub config: MdscConfig,
    /// One `[C1, C1, k_l]` weight per kernel size.
    pub branches: Vec<ParamId>,
    pub(crate) fusion: Fusion,
    pub bn_stats: RunningStats,
}

/// `Σ C1·C1·k_l + L·C1·C2 + C2 + 2·C2`.
pub fn standard_multiscale_param_count(cfg: &MdscConfig) -> usize {
    let c1 = cfg.in_channels;
    let c2 = cfg.out_channels;
    let branches: usize = cfg.kernel_sizes.iter().map(|k| c1 * c1 * k).sum();
    branches + cfg.branches() * c1 * c2 + c2 + 2 * c2
}

impl StandardMultiScaleBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &MdscConfig) -> Result<Self> {
        config.validate()?;
        let c1 = config.in_channels;
        let branches = config
            .kernel_sizes
            .iter()
            .map(|&k| store.fan_in(format!("{prefix}.branch.k{k}"), &[c1, c1, k], c1 * k))
            .collect();
        let fusion = Fusion::new(store, prefix, config.branches() * c1, config.out_channels);
        Ok(StandardMultiScaleBlock {
            config: config.clone(),
            branches,
            fusion,
            bn_stats: RunningStats::new(config.out_channels),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.branches.iter().copied().chain(self.fusion.ids()).collect()
    }

    pub fn forward(&mut self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        self.config.check_input("standard_multiscale_block", tape.try_value(x)?.shape())?;
        let outs = self
            .config
            .kernel_sizes
            .iter()
            .zip(&self.branches)
            .map(|(&k, &w)| {
                let opts = Conv1dOptions { stride: self.config.stride, padding: (k - 1) / 2, groups: 1 };
                tape.conv1d(x, p[w], None, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = tape.concat(&outs, 1)?;
        self.fusion.forward(tape, p, z, &mut self.bn_stats, mode)
    }
}
