//! Raw loops behind the differentiable ops. Every kernel partitions its
//! output so that each element is produced by one sequential reduction;
//! parallel and sequential builds therefore agree bit for bit.

use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    fn cin_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Range of output positions `t` for which input index
    /// `t*stride + tap - padding` lies inside `[0, in_len)`.
    #[inline]
    fn valid_range(&self, tap: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest t with t*s + tap >= padding
        let lo = if tap >= self.padding { 0 } else { (self.padding - tap).div_ceil(s) };
        // largest t with t*s + tap - padding <= in_len - 1
        let limit = self.in_len + self.padding;
        let hi = if tap >= limit { 0 } else { ((limit - 1 - tap) / s + 1).min(self.out_len) };
        (lo.min(hi), hi)
    }
}

/// `out[b, co, t] = bias[co] + sum_{ci in group, j} w[co, ci', j] * x[b, ci, t*s + j - p]`
pub fn conv1d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_len];
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let work = g.batch * g.out_channels * g.out_len * cin_g * g.kernel;
    par::for_each_chunk_weighted(&mut out, g.out_len, work, |row, dst| {
        let b = row / g.out_channels;
        let co = row % g.out_channels;
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        let group = co / cout_g;
        for cig in 0..cin_g {
            let ci = group * cin_g + cig;
            let xrow = &x[(b * g.in_channels + ci) * g.in_len..][..g.in_len];
            let wrow = &w[(co * cin_g + cig) * g.kernel..][..g.kernel];
            for (tap, &wv) in wrow.iter().enumerate() {
                let (lo, hi) = g.valid_range(tap);
                if g.stride == 1 {
                    let off = lo + tap - g.padding;
                    for (d, xv) in dst[lo..hi].iter_mut().zip(&xrow[off..off + (hi - lo)]) {
                        *d += wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        dst[t] += wv * xrow[t * g.stride + tap - g.padding];
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub fn conv1d_backward_input(g: &ConvGeometry, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.in_channels * g.in_len];
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let work = g.batch * g.out_channels * g.out_len * cin_g * g.kernel;
    par::for_each_chunk_weighted(&mut dx, g.in_len, work, |row, dst| {
        let b = row / g.in_channels;
        let ci = row % g.in_channels;
        let group = ci / cin_g;
        let cig = ci % cin_g;
        for cog in 0..cout_g {
            let co = group * cout_g + cog;
            let dyrow = &dy[(b * g.out_channels + co) * g.out_len..][..g.out_len];
            let wrow = &w[(co * cin_g + cig) * g.kernel..][..g.kernel];
            for (tap, &wv) in wrow.iter().enumerate() {
                let (lo, hi) = g.valid_range(tap);
                if g.stride == 1 {
                    let off = lo + tap - g.padding;
                    for (d, gv) in dst[off..off + (hi - lo)].iter_mut().zip(&dyrow[lo..hi]) {
                        *d += wv * gv;
                    }
                } else {
                    for t in lo..hi {
                        dst[t * g.stride + tap - g.padding] += wv * dyrow[t];
                    }
                }
            }
        }
    });
    dx
}

/// Gradient with respect to the weight `[C_out, C_in/groups, k]`.
pub fn conv1d_backward_weight(g: &ConvGeometry, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let mut dw = vec![0.0; g.out_channels * cin_g * g.kernel];
    let work = g.batch * g.out_channels * g.out_len * cin_g * g.kernel;
    par::for_each_chunk_weighted(&mut dw, cin_g * g.kernel, work, |co, dst| {
        let group = co / cout_g;
        for b in 0..g.batch {
            let dyrow = &dy[(b * g.out_channels + co) * g.out_len..][..g.out_len];
            for cig in 0..cin_g {
                let ci = group * cin_g + cig;
                let xrow = &x[(b * g.in_channels + ci) * g.in_len..][..g.in_len];
                for tap in 0..g.kernel {
                    let (lo, hi) = g.valid_range(tap);
                    let mut acc = 0.0;
                    if g.stride == 1 {
                        let off = lo + tap - g.padding;
                        for (a, b) in dyrow[lo..hi].iter().zip(&xrow[off..off + (hi - lo)]) {
                            acc += a * b;
                        }
                    } else {
                        for t in lo..hi {
                            acc += dyrow[t] * xrow[t * g.stride + tap - g.padding];
                        }
                    }
                    dst[cig * g.kernel + tap] += acc;
                }
            }
        }
    });
    dw
}

/// Sum of `dy` over batch and time per output channel.
pub fn conv1d_backward_bias(g: &ConvGeometry, dy: &[f64]) -> Vec<f64> {
    let mut db = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dy[(b * g.out_channels + co) * g.out_len..][..g.out_len].iter().sum::<f64>();
        }
    }
    db
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y[m, o] = sum_i x[m, i] * w[o, i] + b[o]`
pub fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * fout];
    par::for_each_chunk_weighted(&mut y, fout, rows * fin * fout, |m, dst| {
        let xr = &x[m * fin..][..fin];
        for (o, d) in dst.iter_mut().enumerate() {
            *d = dot(xr, &w[o * fin..][..fin]) + b.map_or(0.0, |b| b[o]);
        }
    });
    y
}

pub fn linear_backward_input(dy: &[f64], w: &[f64], rows: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * fin];
    par::for_each_chunk_weighted(&mut dx, fin, rows * fin * fout, |m, dst| {
        for (o, &g) in dy[m * fout..][..fout].iter().enumerate() {
            axpy(g, &w[o * fin..][..fin], dst);
        }
    });
    dx
}

pub fn linear_backward_weight(dy: &[f64], x: &[f64], rows: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut dw = vec![0.0; fout * fin];
    par::for_each_chunk_weighted(&mut dw, fin, rows * fin * fout, |o, dst| {
        for m in 0..rows {
            axpy(dy[m * fout + o], &x[m * fin..][..fin], dst);
        }
    });
    dw
}

pub fn linear_backward_bias(dy: &[f64], rows: usize, fout: usize) -> Vec<f64> {
    let mut db = vec![0.0; fout];
    for m in 0..rows {
        for (d, g) in db.iter_mut().zip(&dy[m * fout..][..fout]) {
            *d += g;
        }
    }
    db
}

#[derive(Debug, Clone, Copy)]
pub struct BmmGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is stored as `[batch, n, k]` instead of `[batch, k, n]`.
    pub transpose_b: bool,
}

pub fn bmm_forward(g: &BmmGeometry, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.m * g.n];
    par::for_each_chunk_weighted(&mut out, g.n, g.batch * g.m * g.n * g.k, |row, dst| {
        let bt = row / g.m;
        let ar = &a[row * g.k..][..g.k];
        if g.transpose_b {
            for (nn, d) in dst.iter_mut().enumerate() {
                *d = dot(ar, &b[(bt * g.n + nn) * g.k..][..g.k]);
            }
        } else {
            for (kk, &av) in ar.iter().enumerate() {
                axpy(av, &b[(bt * g.k + kk) * g.n..][..g.n], dst);
            }
        }
    });
    out
}

pub fn bmm_backward_a(g: &BmmGeometry, dy: &[f64], b: &[f64]) -> Vec<f64> {
    let mut da = vec![0.0; g.batch * g.m * g.k];
    par::for_each_chunk_weighted(&mut da, g.k, g.batch * g.m * g.n * g.k, |row, dst| {
        let bt = row / g.m;
        let gr = &dy[row * g.n..][..g.n];
        if g.transpose_b {
            for (nn, &gv) in gr.iter().enumerate() {
                axpy(gv, &b[(bt * g.n + nn) * g.k..][..g.k], dst);
            }
        } else {
            for (kk, d) in dst.iter_mut().enumerate() {
                *d = dot(gr, &b[(bt * g.k + kk) * g.n..][..g.n]);
            }
        }
    });
    da
}

pub fn bmm_backward_b(g: &BmmGeometry, dy: &[f64], a: &[f64]) -> Vec<f64> {
    let mut db = vec![0.0; g.batch * g.k * g.n];
    let per_batch = g.k * g.n;
    par::for_each_chunk_weighted(&mut db, per_batch, g.batch * g.m * g.n * g.k, |bt, dst| {
        for mm in 0..g.m {
            let ar = &a[(bt * g.m + mm) * g.k..][..g.k];
            let gr = &dy[(bt * g.m + mm) * g.n..][..g.n];
            if g.transpose_b {
                // dst is [n, k]
                for (nn, &gv) in gr.iter().enumerate() {
                    axpy(gv, ar, &mut dst[nn * g.k..][..g.k]);
                }
            } else {
                // dst is [k, n]
                for (kk, &av) in ar.iter().enumerate() {
                    axpy(av, gr, &mut dst[kk * g.n..][..g.n]);
                }
            }
        }
    });
    db
}

/// For each element of a tensor of shape `out_shape`, the linear offset of
/// the element of `in_shape` it reads under same-rank broadcasting.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = crate::tensor::strides_of(in_shape);
    let eff: Vec<usize> = in_shape.iter().zip(&in_strides).map(|(&e, &s)| if e == 1 { 0 } else { s }).collect();
    strided_offsets(out_shape, &eff)
}

/// Linear offsets visited when walking `shape` in row-major order with the
/// given per-axis strides.
pub fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
