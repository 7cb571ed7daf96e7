//! Forward and adjoint kernels for the fused tape nodes.

use crate::error::{shape_err, Result};
use crate::graph::{BnMode, BnStats};
use crate::scalar::{matmul_into, Scalar};

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn sign<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub(crate) fn log_mean_exp<F: Scalar>(a: F, b: F) -> F {
    let m = a.max(b);
    m + (((a - m).exp() + (b - m).exp()) * F::lit(0.5)).ln()
}

/// Transposes each trailing `rows × cols` matrix of a batched buffer.
pub(crate) fn transpose_batched<F: Scalar>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    let block = rows * cols;
    let mut out = vec![F::zero(); src.len()];
    if block == 0 {
        return out;
    }
    for (s, d) in src.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_out: usize,
}

impl ConvGeom {
    /// Input frame read by output frame `to` at kernel tap `k`, if inside
    /// the unpadded signal.
    fn source(&self, to: usize, k: usize) -> Option<usize> {
        let pos = (to * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

/// Returns the output `[N, C_out, T_out]` and the unfolded input columns
/// `[C_in·K, N·T_out]` kept for the adjoint.
pub(crate) fn conv1d_forward<F: Scalar>(
    geom: &ConvGeom,
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
) -> (Vec<F>, Vec<F>) {
    let g = geom;
    let ntp = g.batch * g.t_out;
    let ck = g.c_in * g.kernel;
    let mut cols = vec![F::zero(); ck * ntp];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * ntp..(ci * g.kernel + k + 1) * ntp];
            for n in 0..g.batch {
                let xs = &x[(n * g.c_in + ci) * g.t_in..(n * g.c_in + ci + 1) * g.t_in];
                for to in 0..g.t_out {
                    if let Some(src) = g.source(to, k) {
                        row[n * g.t_out + to] = xs[src];
                    }
                }
            }
        }
    }
    let mut prod = vec![F::zero(); g.c_out * ntp];
    matmul_into(g.c_out, ck, ntp, w, false, &cols, false, &mut prod, false);
    let mut out = vec![F::zero(); g.batch * g.c_out * g.t_out];
    for co in 0..g.c_out {
        let bias = b.map_or(F::zero(), |b| b[co]);
        for n in 0..g.batch {
            let src = &prod[co * ntp + n * g.t_out..co * ntp + (n + 1) * g.t_out];
            let dst = &mut out[(n * g.c_out + co) * g.t_out..(n * g.c_out + co + 1) * g.t_out];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    (out, cols)
}

pub(crate) fn conv1d_backward<F: Scalar>(
    geom: &ConvGeom,
    dout: &[F],
    w: &[F],
    cols: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let g = geom;
    let ntp = g.batch * g.t_out;
    let ck = g.c_in * g.kernel;
    let mut dmat = vec![F::zero(); g.c_out * ntp];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let src = &dout[(n * g.c_out + co) * g.t_out..(n * g.c_out + co + 1) * g.t_out];
            dmat[co * ntp + n * g.t_out..co * ntp + (n + 1) * g.t_out].copy_from_slice(src);
        }
    }
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d = *d + dmat[co * ntp..(co + 1) * ntp].iter().copied().sum::<F>();
        }
    }
    if let Some(dw) = dw {
        matmul_into(g.c_out, ntp, ck, &dmat, false, cols, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![F::zero(); ck * ntp];
        matmul_into(ck, g.c_out, ntp, w, true, &dmat, false, &mut dcols, false);
        for ci in 0..g.c_in {
            for k in 0..g.kernel {
                let row = &dcols[(ci * g.kernel + k) * ntp..(ci * g.kernel + k + 1) * ntp];
                for n in 0..g.batch {
                    let base = (n * g.c_in + ci) * g.t_in;
                    for to in 0..g.t_out {
                        if let Some(src) = g.source(to, k) {
                            dx[base + src] = dx[base + src] + row[n * g.t_out + to];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) struct BnSaved<F> {
    batch: usize,
    channels: usize,
    frames: usize,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    training: bool,
}

pub(crate) fn batch_norm_forward<F: Scalar>(
    x: &[F],
    batch: usize,
    channels: usize,
    frames: usize,
    gamma: &[F],
    beta: &[F],
    mode: &BnMode<'_, F>,
) -> Result<(Vec<F>, BnSaved<F>, Option<BnStats<F>>)> {
    let count = batch * frames;
    let eps = F::lit(BN_EPS);
    let idx = |n: usize, c: usize| (n * channels + c) * frames;
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let mut mean = vec![F::zero(); channels];
            let mut var = vec![F::zero(); channels];
            let m = F::lit(count as f64);
            for c in 0..channels {
                let s: F = (0..batch).flat_map(|n| &x[idx(n, c)..idx(n, c) + frames]).copied().sum();
                mean[c] = s / m;
                let ss: F = (0..batch)
                    .flat_map(|n| &x[idx(n, c)..idx(n, c) + frames])
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum();
                var[c] = ss / m;
            }
            let unbiased = if count > 1 {
                let k = F::lit(count as f64 / (count - 1) as f64);
                var.iter().map(|&v| v * k).collect()
            } else {
                var.clone()
            };
            let stats = BnStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != channels || var.len() != channels {
                return shape_err("batch_norm", format!("running stats for {channels} channels"));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    let mut out = vec![F::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let r = idx(n, c)..idx(n, c) + frames;
            for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                *xh = (v - mean[c]) * inv_std[c];
                *o = gamma[c] * *xh + beta[c];
            }
        }
    }
    let saved = BnSaved {
        batch,
        channels,
        frames,
        xhat,
        inv_std,
        training: matches!(mode, BnMode::Train),
    };
    Ok((out, saved, stats))
}

pub(crate) fn batch_norm_backward<F: Scalar>(
    saved: &BnSaved<F>,
    dy: &[F],
    gamma: &[F],
    dx: Option<&mut [F]>,
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) {
    let (batch, channels, frames) = (saved.batch, saved.channels, saved.frames);
    let idx = |n: usize, c: usize| (n * channels + c) * frames;
    let mut sum_dy = vec![F::zero(); channels];
    let mut sum_dy_xhat = vec![F::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let r = idx(n, c)..idx(n, c) + frames;
            for (&d, &xh) in dy[r.clone()].iter().zip(&saved.xhat[r]) {
                sum_dy[c] = sum_dy[c] + d;
                sum_dy_xhat[c] = sum_dy_xhat[c] + d * xh;
            }
        }
    }
    if let Some(dg) = dgamma {
        for (d, s) in dg.iter_mut().zip(&sum_dy_xhat) {
            *d = *d + *s;
        }
    }
    if let Some(db) = dbeta {
        for (d, s) in db.iter_mut().zip(&sum_dy) {
            *d = *d + *s;
        }
    }
    if let Some(dx) = dx {
        let m = F::lit((batch * frames) as f64);
        for n in 0..batch {
            for c in 0..channels {
                let r = idx(n, c)..idx(n, c) + frames;
                let k = gamma[c] * saved.inv_std[c];
                for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&saved.xhat[r]) {
                    let contrib = if saved.training {
                        k * (g - sum_dy[c] / m - xh * sum_dy_xhat[c] / m)
                    } else {
                        k * g
                    };
                    *d = *d + contrib;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    /// Time index processed at step `s`.
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }

    /// Time index processed just before step `s`.
    fn prev_time(&self, s: usize) -> Option<usize> {
        (s > 0).then(|| self.time(s - 1))
    }
}

pub(crate) struct LstmSaved<F> {
    dims: LstmDims,
    /// Activated gates `[N, T, 4H]` in (i, f, g, o) order.
    acts: Vec<F>,
    /// Cell states `[N, T, H]`.
    cells: Vec<F>,
    c0: Option<Vec<F>>,
}

impl<F: Scalar> LstmSaved<F> {
    pub(crate) fn final_cell(&self) -> Vec<F> {
        let d = &self.dims;
        let t = d.time(d.steps - 1);
        let mut out = Vec::with_capacity(d.batch * d.hidden);
        for n in 0..d.batch {
            let base = (n * d.steps + t) * d.hidden;
            out.extend_from_slice(&self.cells[base..base + d.hidden]);
        }
        out
    }
}

pub(crate) fn lstm_forward<F: Scalar>(
    dims: &LstmDims,
    x: &[F],
    w_ih: &[F],
    w_hh: &[F],
    b: &[F],
    h0: Option<&[F]>,
    c0: Option<&[F]>,
) -> (Vec<F>, LstmSaved<F>) {
    let LstmDims {
        batch,
        steps,
        input,
        hidden: h,
        ..
    } = *dims;
    let g4 = 4 * h;
    let rows = batch * steps;
    let mut acts = vec![F::zero(); rows * g4];
    for row in acts.chunks_mut(g4) {
        row.copy_from_slice(b);
    }
    matmul_into(rows, input, g4, x, false, w_ih, true, &mut acts, true);

    let mut out = vec![F::zero(); rows * h];
    let mut cells = vec![F::zero(); rows * h];
    for s in 0..steps {
        let t = dims.time(s);
        let prev = dims.prev_time(s);
        let recurrent: Option<(&[F], usize)> = match prev {
            Some(tp) => Some((&out[tp * h..], steps * h)),
            None => h0.map(|h0| (h0, h)),
        };
        if let Some((hp, stride)) = recurrent {
            // acts[n, t, :] += h_prev[n, :] · w_hhᵀ
            F::gemm(
                batch,
                h,
                g4,
                F::one(),
                hp,
                (stride, 1),
                w_hh,
                (1, h),
                F::one(),
                &mut acts[t * g4..],
                (steps * g4, 1),
            );
        }
        for n in 0..batch {
            let row = n * steps + t;
            let a = &mut acts[row * g4..(row + 1) * g4];
            for k in 0..h {
                a[k] = sigmoid(a[k]);
                a[h + k] = sigmoid(a[h + k]);
                a[2 * h + k] = a[2 * h + k].tanh();
                a[3 * h + k] = sigmoid(a[3 * h + k]);
                let c_prev = match prev {
                    Some(tp) => cells[(n * steps + tp) * h + k],
                    None => c0.map_or(F::zero(), |c| c[n * h + k]),
                };
                let c = a[h + k] * c_prev + a[k] * a[2 * h + k];
                cells[row * h + k] = c;
                out[row * h + k] = a[3 * h + k] * c.tanh();
            }
        }
    }
    let saved = LstmSaved {
        dims: *dims,
        acts,
        cells,
        c0: c0.map(|c| c.to_vec()),
    };
    (out, saved)
}

pub(crate) struct LstmGrads<'a, F> {
    pub dx: Option<&'a mut [F]>,
    pub dw_ih: Option<&'a mut [F]>,
    pub dw_hh: Option<&'a mut [F]>,
    pub db: Option<&'a mut [F]>,
    pub dh0: Option<&'a mut [F]>,
    pub dc0: Option<&'a mut [F]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward<F: Scalar>(
    saved: &LstmSaved<F>,
    dout: &[F],
    x: &[F],
    out: &[F],
    w_ih: &[F],
    w_hh: &[F],
    h0: Option<&[F]>,
    grads: LstmGrads<'_, F>,
) {
    let dims = &saved.dims;
    let LstmDims {
        batch,
        steps,
        input,
        hidden: h,
        ..
    } = *dims;
    let g4 = 4 * h;
    let rows = batch * steps;
    let one = F::one();
    let mut da = vec![F::zero(); rows * g4];
    let mut dh_next = vec![F::zero(); batch * h];
    let mut dc_next = vec![F::zero(); batch * h];
    for s in (0..steps).rev() {
        let t = dims.time(s);
        let prev = dims.prev_time(s);
        for n in 0..batch {
            let row = n * steps + t;
            let a = &saved.acts[row * g4..(row + 1) * g4];
            let d = &mut da[row * g4..(row + 1) * g4];
            for k in 0..h {
                let (i, f, g, o) = (a[k], a[h + k], a[2 * h + k], a[3 * h + k]);
                let c = saved.cells[row * h + k];
                let tc = c.tanh();
                let c_prev = match prev {
                    Some(tp) => saved.cells[(n * steps + tp) * h + k],
                    None => saved.c0.as_ref().map_or(F::zero(), |c0| c0[n * h + k]),
                };
                let dh = dout[row * h + k] + dh_next[n * h + k];
                let dc = dh * o * (one - tc * tc) + dc_next[n * h + k];
                dc_next[n * h + k] = dc * f;
                d[k] = dc * g * i * (one - i);
                d[h + k] = dc * c_prev * f * (one - f);
                d[2 * h + k] = dc * i * (one - g * g);
                d[3 * h + k] = dh * tc * o * (one - o);
            }
        }
        // dh_prev[n, :] = da[n, t, :] · w_hh
        F::gemm(
            batch,
            g4,
            h,
            one,
            &da[t * g4..],
            (steps * g4, 1),
            w_hh,
            (h, 1),
            F::zero(),
            &mut dh_next,
            (h, 1),
        );
    }
    if let Some(dh0) = grads.dh0 {
        for (d, v) in dh0.iter_mut().zip(&dh_next) {
            *d = *d + *v;
        }
    }
    if let Some(dc0) = grads.dc0 {
        for (d, v) in dc0.iter_mut().zip(&dc_next) {
            *d = *d + *v;
        }
    }
    if let Some(dw_hh) = grads.dw_hh {
        let mut h_prev = vec![F::zero(); rows * h];
        for s in 0..steps {
            let t = dims.time(s);
            for n in 0..batch {
                let dst = &mut h_prev[(n * steps + t) * h..(n * steps + t + 1) * h];
                match dims.prev_time(s) {
                    Some(tp) => dst.copy_from_slice(&out[(n * steps + tp) * h..(n * steps + tp + 1) * h]),
                    None => {
                        if let Some(h0) = h0 {
                            dst.copy_from_slice(&h0[n * h..(n + 1) * h]);
                        }
                    }
                }
            }
        }
        matmul_into(g4, rows, h, &da, true, &h_prev, false, dw_hh, true);
    }
    if let Some(dw_ih) = grads.dw_ih {
        matmul_into(g4, rows, input, &da, true, x, false, dw_ih, true);
    }
    if let Some(db) = grads.db {
        for row in da.chunks(g4) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
    }
    if let Some(dx) = grads.dx {
        matmul_into(rows, g4, input, &da, false, w_ih, false, dx, true);
    }
}
