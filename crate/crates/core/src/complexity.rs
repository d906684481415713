//! Exact parameter and FLOPs accounting.
//!
//! Conventions, fixed here and nowhere else:
//! - one multiply-add counts as 2 flops;
//! - batch norm and layer norm cost 4 flops per element, GELU 8, softmax 5;
//! - pooling, means, residual and positional additions cost 1 flop per
//!   input element;
//! - bias additions inside conv/linear layers are not counted.
//!
//! All counts are per single input sample.

use std::fmt::Write as _;
use std::io::Write;

use crate::attention::{attention_flops, AttnKind, BsaBlock, MhsaBlock};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_FLOPS_PER_ELEMENT: u64 = 4;
pub const GELU_FLOPS_PER_ELEMENT: u64 = 8;
pub const ELEMENTWISE_FLOPS_PER_ELEMENT: u64 = 1;

/// Shape-level description of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        stride: usize,
        padding: usize,
        in_len: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        rows: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        elements: usize,
    },
    LayerNorm {
        features: usize,
        elements: usize,
    },
    Gelu {
        elements: usize,
    },
    MaxPool {
        in_elements: usize,
    },
    Mean {
        in_elements: usize,
    },
    Residual {
        elements: usize,
    },
    Concat,
    PositionalEmbedding {
        tokens: usize,
        dim: usize,
    },
    Attention {
        kind: AttnKind,
        tokens: usize,
        dim: usize,
        heads: usize,
    },
}

impl LayerKind {
    pub fn conv_out_len(in_len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        (in_len + 2 * padding - kernel) / stride + 1
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerKind::Conv1d { in_channels, out_channels, kernel, groups, bias, .. } => {
                (out_channels * (in_channels / groups) * kernel + if bias { out_channels } else { 0 }) as u64
            }
            LayerKind::Linear { in_features, out_features, bias, .. } => {
                (in_features * out_features + if bias { out_features } else { 0 }) as u64
            }
            LayerKind::BatchNorm { channels, .. } => 2 * channels as u64,
            LayerKind::LayerNorm { features, .. } => 2 * features as u64,
            LayerKind::PositionalEmbedding { tokens, dim } => (tokens * dim) as u64,
            LayerKind::Attention { kind: AttnKind::Mhsa, dim, .. } => MhsaBlock::param_count(dim) as u64,
            LayerKind::Attention { kind: AttnKind::Bsa, dim, .. } => BsaBlock::param_count(dim) as u64,
            LayerKind::Gelu { .. }
            | LayerKind::MaxPool { .. }
            | LayerKind::Mean { .. }
            | LayerKind::Residual { .. }
            | LayerKind::Concat => 0,
        }
    }

    pub fn flops(&self) -> u64 {
        match *self {
            LayerKind::Conv1d { in_channels, out_channels, kernel, groups, stride, padding, in_len, .. } => {
                let out_len = Self::conv_out_len(in_len, kernel, stride, padding);
                2 * (out_len * out_channels * (in_channels / groups) * kernel) as u64
            }
            LayerKind::Linear { in_features, out_features, rows, .. } => 2 * (in_features * out_features * rows) as u64,
            LayerKind::BatchNorm { elements, .. } | LayerKind::LayerNorm { elements, .. } => {
                NORM_FLOPS_PER_ELEMENT * elements as u64
            }
            LayerKind::Gelu { elements } => GELU_FLOPS_PER_ELEMENT * elements as u64,
            LayerKind::MaxPool { in_elements } | LayerKind::Mean { in_elements } => {
                ELEMENTWISE_FLOPS_PER_ELEMENT * in_elements as u64
            }
            LayerKind::Residual { elements } => ELEMENTWISE_FLOPS_PER_ELEMENT * elements as u64,
            LayerKind::PositionalEmbedding { tokens, dim } => ELEMENTWISE_FLOPS_PER_ELEMENT * (tokens * dim) as u64,
            LayerKind::Attention { kind, tokens, dim, heads } => {
                attention_flops(kind, tokens as u64, dim as u64, heads as u64)
            }
            LayerKind::Concat => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityRow {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ComplexityReport {
    pub fn from_layers<'a>(layers: impl IntoIterator<Item = (&'a str, &'a LayerKind)>) -> Self {
        let rows: Vec<ComplexityRow> = layers
            .into_iter()
            .map(|(name, kind)| ComplexityRow { layer: name.to_string(), params: kind.params(), flops: kind.flops() })
            .collect();
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        ComplexityReport { rows, total_params, total_flops }
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_millions(&self) -> f64 {
        self.total_flops as f64 / 1e6
    }

    /// Per-layer table followed by totals in millions (2 decimals).
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "layer", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", r.layer, r.params, r.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "total", self.total_params, self.total_flops);
        let _ = writeln!(
            s,
            "Params: {:.2} M  FLOPs: {:.2} M  (1 multiply-add = 2 flops)",
            self.params_millions(),
            self.flops_millions()
        );
        s
    }

    /// CSV with header `layer,params,flops`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["layer", "params", "flops"])?;
        for r in &self.rows {
            w.write_record([r.layer.clone(), r.params.to_string(), r.flops.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts parameters and flops of `net` for one sample of `input_length`.
pub fn count(net: &crate::model::Network, input_length: usize) -> Result<ComplexityReport> {
    if input_length != net.config.input_length {
        return Err(Error::Input(format!(
            "network was built for input_length {}, not {input_length}",
            net.config.input_length
        )));
    }
    let layers = net.describe();
    Ok(ComplexityReport::from_layers(layers.iter().map(|(n, k)| (n.as_str(), k))))
}

/// Result of an instrumented forward pass.
#[derive(Debug, Clone)]
pub struct Measured {
    /// Multiply-adds actually executed.
    pub macs: u64,
    pub output: Tensor,
}

#[derive(Default)]
struct MacCounter {
    count: u64,
}

impl MacCounter {
    #[inline]
    fn mul_add(&mut self, acc: f64, a: f64, b: f64) -> f64 {
        self.count += 1;
        acc + a * b
    }
}

/// Runs a naive forward pass of a conv or linear layer through a counting
/// multiply-add shim. Conv inputs are explicitly zero-padded and every tap
/// is executed, as a dense implementation would. `input` holds one sample
/// (`[C_in, N]` for conv, `[rows, in]` for linear).
pub fn verify_flops_empirically(layer: &LayerKind, input: &Tensor, weight: &Tensor) -> Result<Measured> {
    let mut counter = MacCounter::default();
    match *layer {
        LayerKind::Conv1d { in_channels, out_channels, kernel, groups, stride, padding, in_len, .. } => {
            if input.shape() != [in_channels, in_len] {
                return Err(Error::dim(
                    "verify_flops",
                    format!("input {:?} != [{in_channels}, {in_len}]", input.shape()),
                ));
            }
            let cin_g = in_channels / groups;
            let cout_g = out_channels / groups;
            if weight.shape() != [out_channels, cin_g, kernel] {
                return Err(Error::dim("verify_flops", format!("weight {:?}", weight.shape())));
            }
            let padded_len = in_len + 2 * padding;
            let mut padded = vec![0.0; in_channels * padded_len];
            for c in 0..in_channels {
                padded[c * padded_len + padding..][..in_len].copy_from_slice(&input.data()[c * in_len..][..in_len]);
            }
            let out_len = LayerKind::conv_out_len(in_len, kernel, stride, padding);
            let mut out = vec![0.0; out_channels * out_len];
            for co in 0..out_channels {
                let g = co / cout_g;
                for t in 0..out_len {
                    let mut acc = 0.0;
                    for cig in 0..cin_g {
                        let ci = g * cin_g + cig;
                        for j in 0..kernel {
                            let w = weight.data()[(co * cin_g + cig) * kernel + j];
                            acc = counter.mul_add(acc, w, padded[ci * padded_len + t * stride + j]);
                        }
                    }
                    out[co * out_len + t] = acc;
                }
            }
            Ok(Measured { macs: counter.count, output: Tensor::new(&[out_channels, out_len], out)? })
        }
        LayerKind::Linear { in_features, out_features, rows, .. } => {
            if input.shape() != [rows, in_features] || weight.shape() != [out_features, in_features] {
                return Err(Error::dim(
                    "verify_flops",
                    format!("input {:?} weight {:?}", input.shape(), weight.shape()),
                ));
            }
            let mut out = vec![0.0; rows * out_features];
            for r in 0..rows {
                for o in 0..out_features {
                    let mut acc = 0.0;
                    for i in 0..in_features {
                        acc =
                            counter.mul_add(acc, weight.data()[o * in_features + i], input.data()[r * in_features + i]);
                    }
                    out[r * out_features + o] = acc;
                }
            }
            Ok(Measured { macs: counter.count, output: Tensor::new(&[rows, out_features], out)? })
        }
        ref other => Err(Error::Unsupported(format!("{other:?}"))),
    }
}
