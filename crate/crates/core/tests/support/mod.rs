//! Naive reference implementations written straight from the definitions,
//! sharing no code with the library kernels.
#![allow(dead_code)]

use ldrpm_core::attention::{BsaBlock, MhsaBlock};
use ldrpm_core::autodiff::{Conv1dOptions, Mode, Tape};
use ldrpm_core::mdsc::{MdscBlock, MdscConfig, BN_EPS};
use ldrpm_core::params::ParamStore;
use ldrpm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn by_name<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.iter().find(|(_, p)| p.name == name).map(|(_, p)| &p.value).unwrap_or_else(|| panic!("no parameter {name}"))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Grouped 1-D cross-correlation with zero padding.
/// x `[B, Cin, N]`, w `[Cout, Cin/groups, K]`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize, groups: usize) -> Tensor {
    let (b, cin, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let out_len = (n + 2 * padding - k) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = vec![0.0; b * cout * out_len];
    for bi in 0..b {
        for co in 0..cout {
            let g = co / opg;
            for t in 0..out_len {
                let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < n {
                            acc += w.data()[(co * cpg + ci) * k + j] * x.data()[(bi * cin + c) * n + pos as usize];
                        }
                    }
                }
                out[(bi * cout + co) * out_len + t] = acc;
            }
        }
    }
    Tensor::new(&[b, cout, out_len], out).unwrap()
}

/// `y[r, o] = Σ_i x[r, i] · w[o, i] + b[o]` on the last axis of `x`.
fn project(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * o];
    for r in 0..rows {
        for a in 0..o {
            let mut acc = b.data()[a];
            for c in 0..i {
                acc += x[r * i + c] * w.data()[a * i + c];
            }
            y[r * o + a] = acc;
        }
    }
    y
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Multi-head attention over x `[B, N, d]` with parameters `{prefix}.{query,key,value,output}.{weight,bias}`.
pub fn mhsa(store: &ParamStore, prefix: &str, heads: usize, x: &Tensor) -> Tensor {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let proj = |name: &str, input: &[f64]| {
        project(
            input,
            b * n,
            by_name(store, &format!("{prefix}.{name}.weight")),
            by_name(store, &format!("{prefix}.{name}.bias")),
        )
    };
    let q = proj("query", x.data());
    let k = proj("key", x.data());
    let v = proj("value", x.data());
    let mut ctx = vec![0.0; b * n * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[(bi * n + i) * d + h * dh + c] * k[(bi * n + j) * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                softmax(&mut scores);
                for c in 0..dh {
                    ctx[(bi * n + i) * d + h * dh + c] =
                        (0..n).map(|j| scores[j] * v[(bi * n + j) * d + h * dh + c]).sum();
                }
            }
        }
    }
    Tensor::new(&[b, n, d], proj("output", &ctx)).unwrap()
}

/// Broadcast attention: `a = softmax_N(X w_s)`, `c = Σ_n a_n K_n`, `Y = W_o (V ⊙ c) + b_o`.
pub fn bsa(store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = by_name(store, &format!("{prefix}.score"));
    let proj = |name: &str, input: &[f64]| {
        project(
            input,
            b * n,
            by_name(store, &format!("{prefix}.{name}.weight")),
            by_name(store, &format!("{prefix}.{name}.bias")),
        )
    };
    let k = proj("key", x.data());
    let v = proj("value", x.data());
    let mut mixed = vec![0.0; b * n * d];
    for bi in 0..b {
        let mut a: Vec<f64> =
            (0..n).map(|i| (0..d).map(|c| x.data()[(bi * n + i) * d + c] * ws.data()[c]).sum()).collect();
        softmax(&mut a);
        let ctx: Vec<f64> = (0..d).map(|c| (0..n).map(|i| a[i] * k[(bi * n + i) * d + c]).sum()).collect();
        for i in 0..n {
            for c in 0..d {
                mixed[(bi * n + i) * d + c] = v[(bi * n + i) * d + c] * ctx[c];
            }
        }
    }
    Tensor::new(&[b, n, d], proj("output", &mixed)).unwrap()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Eval-mode MDSC block: depthwise branches, concat, pointwise, BN with the given running stats, GELU.
#[allow(clippy::too_many_arguments)]
pub fn mdsc_eval(
    store: &ParamStore,
    prefix: &str,
    kernels: &[usize],
    stride: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    x: &Tensor,
) -> Tensor {
    let (b, c1) = (x.shape()[0], x.shape()[1]);
    let branches: Vec<Tensor> = kernels
        .iter()
        .map(|&k| conv1d(x, by_name(store, &format!("{prefix}.depthwise.k{k}")), None, stride, (k - 1) / 2, c1))
        .collect();
    let n2 = branches[0].shape()[2];
    let lc = c1 * kernels.len();
    let mut cat = vec![0.0; b * lc * n2];
    for bi in 0..b {
        for (l, br) in branches.iter().enumerate() {
            for c in 0..c1 {
                for t in 0..n2 {
                    cat[(bi * lc + l * c1 + c) * n2 + t] = br.data()[(bi * c1 + c) * n2 + t];
                }
            }
        }
    }
    let cat = Tensor::new(&[b, lc, n2], cat).unwrap();
    let y = conv1d(
        &cat,
        by_name(store, &format!("{prefix}.pointwise.weight")),
        Some(by_name(store, &format!("{prefix}.pointwise.bias"))),
        1,
        0,
        1,
    );
    let gamma = by_name(store, &format!("{prefix}.bn.gamma"));
    let beta = by_name(store, &format!("{prefix}.bn.beta"));
    let c2 = y.shape()[1];
    let mut out = y.data().to_vec();
    for bi in 0..b {
        for c in 0..c2 {
            for t in 0..n2 {
                let i = (bi * c2 + c) * n2 + t;
                let z = (out[i] - mean[c]) / (var[c] + eps).sqrt() * gamma.data()[c] + beta.data()[c];
                out[i] = gelu(z);
            }
        }
    }
    Tensor::new(&[b, c2, n2], out).unwrap()
}

fn randomize_store(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Worst deviation of the tape conv from [`conv1d`] over `cases` random shapes.
/// Odd cases are grouped.
pub fn conv_sweep(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let groups = if case % 2 == 1 { r.random_range(2..=4) } else { 1 };
        let cin = groups * r.random_range(1..=3);
        let cout = groups * r.random_range(1..=3);
        let k = r.random_range(1..=7);
        let stride = r.random_range(1..=3);
        let padding = r.random_range(0..=k / 2 + 1);
        let n = r.random_range(k.max(1)..=k + 20);
        let b = r.random_range(1..=3);
        let x = random(&mut r, &[b, cin, n]);
        let w = random(&mut r, &[cout, cin / groups, k]);
        let bias = (case % 3 != 0).then(|| random(&mut r, &[cout]));
        let want = conv1d(&x, &w, bias.as_ref(), stride, padding, groups);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let bv = bias.map(|b| t.constant(b));
        let y = t.conv1d(xv, wv, bv, Conv1dOptions { stride, padding, groups }).unwrap();
        assert_eq!(t.value(y).shape(), want.shape());
        worst = worst.max(max_abs_diff(t.value(y).data(), want.data()));
    }
    worst
}

pub fn mhsa_sweep(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = r.random_range(1..=4);
        let d = heads * r.random_range(1..=4);
        let (b, n) = (r.random_range(1..=3), r.random_range(1..=9));
        let mut store = ParamStore::new(r.random());
        let block = MhsaBlock::new(&mut store, "m", d, heads).unwrap();
        randomize_store(&mut store, &mut r);
        let x = random(&mut r, &[b, n, d]);
        let want = mhsa(&store, "m", heads, &x);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x);
        let y = block.forward(&mut t, &p, xv).unwrap();
        worst = worst.max(max_abs_diff(t.value(y).data(), want.data()));
    }
    worst
}

pub fn bsa_sweep(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = r.random_range(1..=12);
        let (b, n) = (r.random_range(1..=3), r.random_range(1..=12));
        let mut store = ParamStore::new(r.random());
        let block = BsaBlock::new(&mut store, "s", d).unwrap();
        randomize_store(&mut store, &mut r);
        let x = random(&mut r, &[b, n, d]);
        let want = bsa(&store, "s", &x);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x);
        let y = block.forward(&mut t, &p, xv).unwrap();
        worst = worst.max(max_abs_diff(t.value(y).data(), want.data()));
    }
    worst
}

pub fn mdsc_sweep(cases: usize, seed: u64) -> f64 {
    const KERNELS: [usize; 4] = [1, 3, 5, 7];
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut kernels: Vec<usize> = KERNELS.iter().copied().filter(|_| r.random_bool(0.5)).collect();
        if kernels.is_empty() {
            kernels.push(3);
        }
        let (c1, c2) = (r.random_range(1..=4), r.random_range(1..=5));
        let stride = r.random_range(1..=2);
        let n = r.random_range(7..=20);
        let b = r.random_range(1..=3);
        let cfg = MdscConfig::new(c1, c2, kernels.clone()).unwrap().with_stride(stride).unwrap();
        let mut store = ParamStore::new(r.random());
        let mut block = MdscBlock::new(&mut store, "b", &cfg).unwrap();
        randomize_store(&mut store, &mut r);
        for m in block.bn_stats.mean.iter_mut() {
            *m = r.random_range(-0.5..0.5);
        }
        for v in block.bn_stats.var.iter_mut() {
            *v = r.random_range(0.5..2.0);
        }
        let x = random(&mut r, &[b, c1, n]);
        let want = mdsc_eval(&store, "b", &kernels, stride, &block.bn_stats.mean, &block.bn_stats.var, BN_EPS, &x);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x);
        let y = block.forward(&mut t, &p, xv, Mode::Eval).unwrap();
        assert_eq!(t.value(y).shape(), want.shape());
        worst = worst.max(max_abs_diff(t.value(y).data(), want.data()));
    }
    worst
}
