use crate::error::{shape, Result};
use crate::tensor::Tensor;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one `C×H×W` image into a `(C·k·k)×(Ho·Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let ncol = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let ncol = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha·a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (b, ci, h, w) = x.dims4()?;
    let (co, wci, kh, kw) = wt.dims4()?;
    if wci != ci || kh != kw {
        return Err(shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            wt.shape(),
            x.shape()
        )));
    }
    let ho = conv_out_len(h, kh, stride, pad)
        .ok_or_else(|| shape(format!("kernel {kh} too large for height {h}")))?;
    let wo = conv_out_len(w, kw, stride, pad)
        .ok_or_else(|| shape(format!("kernel {kw} too large for width {w}")))?;
    Ok(ConvGeom {
        b,
        ci,
        h,
        w,
        co,
        k: kh,
        ho,
        wo,
    })
}

pub fn conv2d_forward(
    x: &Tensor,
    wt: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom(x, wt, stride, pad)?;
    if let Some(bias) = bias {
        if bias.len() != g.co {
            return Err(shape(format!("conv bias has {} entries, expected {}", bias.len(), g.co)));
        }
    }
    let rows = g.ci * g.k * g.k;
    let ncol = g.ho * g.wo;
    let mut out = Tensor::zeros(&[g.b, g.co, g.ho, g.wo]);
    let mut col = vec![0.0; rows * ncol];
    let in_stride = g.ci * g.h * g.w;
    let out_stride = g.co * ncol;
    for bi in 0..g.b {
        let xs = &x.data()[bi * in_stride..(bi + 1) * in_stride];
        let os = &mut out.data_mut()[bi * out_stride..(bi + 1) * out_stride];
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                os[co * ncol..(co + 1) * ncol].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.k == 1 && stride == 1 && pad == 0 {
            gemm(g.co, rows, ncol, wt.data(), rows as isize, 1, xs, ncol as isize, 1, beta, os);
        } else {
            im2col(xs, g.ci, g.h, g.w, g.k, stride, pad, g.ho, g.wo, &mut col);
            gemm(g.co, rows, ncol, wt.data(), rows as isize, 1, &col, ncol as isize, 1, beta, os);
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    wt: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = conv_geom(x, wt, stride, pad)?;
    let rows = g.ci * g.k * g.k;
    let ncol = g.ho * g.wo;
    let pointwise = g.k == 1 && stride == 1 && pad == 0;
    let mut dw = Tensor::zeros(wt.shape());
    let mut db = Tensor::zeros(&[g.co]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0; if pointwise { 0 } else { rows * ncol }];
    let mut dcol = vec![0.0; rows * ncol];
    let in_stride = g.ci * g.h * g.w;
    let out_stride = g.co * ncol;
    for bi in 0..g.b {
        let xs = &x.data()[bi * in_stride..(bi + 1) * in_stride];
        let gs = &gout.data()[bi * out_stride..(bi + 1) * out_stride];
        for co in 0..g.co {
            db.data_mut()[co] += gs[co * ncol..(co + 1) * ncol].iter().sum::<f64>();
        }
        let cols: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, g.ci, g.h, g.w, g.k, stride, pad, g.ho, g.wo, &mut col);
            &col
        };
        // dW (co×rows) += gout (co×ncol) · colᵀ (ncol×rows)
        gemm(g.co, ncol, rows, gs, ncol as isize, 1, cols, 1, ncol as isize, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
            if pointwise {
                gemm(rows, g.co, ncol, wt.data(), 1, rows as isize, gs, ncol as isize, 1, 0.0, dxs);
            } else {
                // dcol (rows×ncol) = Wᵀ (rows×co) · gout (co×ncol)
                gemm(rows, g.co, ncol, wt.data(), 1, rows as isize, gs, ncol as isize, 1, 0.0, &mut dcol);
                col2im(&dcol, g.ci, g.h, g.w, g.k, stride, pad, g.ho, g.wo, dxs);
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn max_pool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape(format!("max pool needs even spatial dims, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0; b * c * ho * wo];
    let src = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn upsample_forward(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if f == 0 {
        return Err(shape("upsample factor must be positive"));
    }
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        for oy in 0..ho {
            let srow = &src[plane * h * w + (oy / f) * w..plane * h * w + (oy / f + 1) * w];
            let drow = &mut dst[plane * ho * wo + oy * wo..plane * ho * wo + (oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / f];
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward(g: &Tensor, in_shape: &[usize], f: usize) -> Result<Tensor> {
    let (_, _, ho, wo) = g.dims4()?;
    let mut dx = Tensor::zeros(in_shape);
    let (b, c, h, w) = dx.dims4()?;
    let gd = g.data();
    let d = dx.data_mut();
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                d[plane * h * w + (oy / f) * w + ox / f] += gd[plane * ho * wo + oy * wo + ox];
            }
        }
    }
    Ok(dx)
}

pub fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(shape(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
    for i in 0..ba {
        data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], data)
}

pub fn concat_channels_backward(g: &Tensor, a: &[usize], b: &[usize]) -> Result<(Tensor, Tensor)> {
    let (bs, ca, h, w) = (a[0], a[1], a[2], a[3]);
    let cb = b[1];
    let hw = h * w;
    let mut da = Vec::with_capacity(bs * ca * hw);
    let mut db = Vec::with_capacity(bs * cb * hw);
    for i in 0..bs {
        let base = i * (ca + cb) * hw;
        da.extend_from_slice(&g.data()[base..base + ca * hw]);
        db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
    }
    Ok((Tensor::new(a.to_vec(), da)?, Tensor::new(b.to_vec(), db)?))
}

const LN_EPS: f64 = 1e-5;

pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape(format!("layer norm affine params must have {c} entries")));
    }
    let hw = h * w;
    let src = x.data();
    let mut xhat = vec![0.0; src.len()];
    let mut inv_std = vec![0.0; b * hw];
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mean = (0..c).map(|ch| src[base + ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (src[base + ch * hw + p] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[bi * hw + p] = is;
            for ch in 0..c {
                let i = base + ch * hw + p;
                xhat[i] = (src[i] - mean) * is;
                out.data_mut()[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
            }
        }
    }
    Ok((out, xhat, inv_std))
}

pub fn layer_norm_backward(
    g: &Tensor,
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = g.dims4()?;
    let hw = h * w;
    let gd = g.data();
    let mut dx = Tensor::zeros(g.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let cf = c as f64;
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for ch in 0..c {
                let i = base + ch * hw + p;
                dgamma.data_mut()[ch] += gd[i] * xhat[i];
                dbeta.data_mut()[ch] += gd[i];
                let dxh = gd[i] * gamma.data()[ch];
                sum_d += dxh;
                sum_dx += dxh * xhat[i];
            }
            let is = inv_std[bi * hw + p];
            for ch in 0..c {
                let i = base + ch * hw + p;
                let dxh = gd[i] * gamma.data()[ch];
                dx.data_mut()[i] = is / cf * (cf * dxh - sum_d - xhat[i] * sum_dx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

struct AttnGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    dh: usize,
    n: usize,
}

fn attn_geom(q: &Tensor, k: &Tensor, v: &Tensor, window: usize, heads: usize) -> Result<AttnGeom> {
    let (b, c, h, w) = q.dims4()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape("attention q/k/v shapes differ"));
    }
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(shape(format!("window {window} does not tile {h}×{w}")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(shape(format!("{heads} heads do not divide {c} channels")));
    }
    Ok(AttnGeom {
        b,
        c,
        h,
        w,
        dh: c / heads,
        n: window * window,
    })
}

/// Gathers window tokens of one head into an `n×dh` row-major matrix.
#[allow(clippy::too_many_arguments)]
fn gather(src: &[f64], g: &AttnGeom, bi: usize, head: usize, wy: usize, wx: usize, win: usize, out: &mut [f64]) {
    let hw = g.h * g.w;
    for t in 0..g.n {
        let (y, x) = (wy * win + t / win, wx * win + t % win);
        for d in 0..g.dh {
            out[t * g.dh + d] = src[bi * g.c * hw + (head * g.dh + d) * hw + y * g.w + x];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_add(dst: &mut [f64], g: &AttnGeom, bi: usize, head: usize, wy: usize, wx: usize, win: usize, m: &[f64]) {
    let hw = g.h * g.w;
    for t in 0..g.n {
        let (y, x) = (wy * win + t / win, wx * win + t % win);
        for d in 0..g.dh {
            dst[bi * g.c * hw + (head * g.dh + d) * hw + y * g.w + x] += m[t * g.dh + d];
        }
    }
}

pub fn window_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    win: usize,
    heads: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let g = attn_geom(q, k, v, win, heads)?;
    let scale = 1.0 / (g.dh as f64).sqrt();
    let (n, dh) = (g.n, g.dh);
    let nwin = (g.h / win) * (g.w / win);
    let mut probs = vec![0.0; g.b * nwin * heads * n * n];
    let mut out = Tensor::zeros(q.shape());
    let (mut qm, mut km, mut vm) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let mut om = vec![0.0; n * dh];
    let mut block = 0;
    for bi in 0..g.b {
        for wy in 0..g.h / win {
            for wx in 0..g.w / win {
                for head in 0..heads {
                    gather(q.data(), &g, bi, head, wy, wx, win, &mut qm);
                    gather(k.data(), &g, bi, head, wy, wx, win, &mut km);
                    gather(v.data(), &g, bi, head, wy, wx, win, &mut vm);
                    let p = &mut probs[block * n * n..(block + 1) * n * n];
                    gemm(n, dh, n, &qm, dh as isize, 1, &km, 1, dh as isize, 0.0, p);
                    for row in p.chunks_mut(n) {
                        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                        let mut z = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s * scale - mx).exp();
                            z += *s;
                        }
                        for s in row.iter_mut() {
                            *s /= z;
                        }
                    }
                    gemm(n, n, dh, p, n as isize, 1, &vm, dh as isize, 1, 0.0, &mut om);
                    scatter_add(out.data_mut(), &g, bi, head, wy, wx, win, &om);
                    block += 1;
                }
            }
        }
    }
    Ok((out, probs))
}

pub fn window_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    gout: &Tensor,
    win: usize,
    heads: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = attn_geom(q, k, v, win, heads)?;
    let scale = 1.0 / (g.dh as f64).sqrt();
    let (n, dh) = (g.n, g.dh);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let (mut qm, mut km, mut vm, mut gm) = (
        vec![0.0; n * dh],
        vec![0.0; n * dh],
        vec![0.0; n * dh],
        vec![0.0; n * dh],
    );
    let mut dp = vec![0.0; n * n];
    let mut tmp = vec![0.0; n * dh];
    let mut block = 0;
    for bi in 0..g.b {
        for wy in 0..g.h / win {
            for wx in 0..g.w / win {
                for head in 0..heads {
                    gather(q.data(), &g, bi, head, wy, wx, win, &mut qm);
                    gather(k.data(), &g, bi, head, wy, wx, win, &mut km);
                    gather(v.data(), &g, bi, head, wy, wx, win, &mut vm);
                    gather(gout.data(), &g, bi, head, wy, wx, win, &mut gm);
                    let p = &probs[block * n * n..(block + 1) * n * n];
                    // dV = Pᵀ·dO
                    gemm(n, n, dh, p, 1, n as isize, &gm, dh as isize, 1, 0.0, &mut tmp);
                    scatter_add(dv.data_mut(), &g, bi, head, wy, wx, win, &tmp);
                    // dP = dO·Vᵀ, then softmax Jacobian
                    gemm(n, dh, n, &gm, dh as isize, 1, &vm, 1, dh as isize, 0.0, &mut dp);
                    for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (d, &pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - dot) * scale;
                        }
                    }
                    gemm(n, n, dh, &dp, n as isize, 1, &km, dh as isize, 1, 0.0, &mut tmp);
                    scatter_add(dq.data_mut(), &g, bi, head, wy, wx, win, &tmp);
                    gemm(n, n, dh, &dp, 1, n as isize, &qm, dh as isize, 1, 0.0, &mut tmp);
                    scatter_add(dk.data_mut(), &g, bi, head, wy, wx, win, &tmp);
                    block += 1;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, i) = x.dims2()?;
    let (o, wi) = w.dims2()?;
    if wi != i || b.len() != o {
        return Err(shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[bs, o]);
    for r in 0..bs {
        out.data_mut()[r * o..(r + 1) * o].copy_from_slice(b.data());
    }
    gemm(bs, i, o, x.data(), i as isize, 1, w.data(), 1, i as isize, 1.0, out.data_mut());
    Ok(out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (bs, i) = x.dims2()?;
    let (o, _) = w.dims2()?;
    let mut dx = Tensor::zeros(&[bs, i]);
    gemm(bs, o, i, g.data(), o as isize, 1, w.data(), i as isize, 1, 0.0, dx.data_mut());
    let mut dw = Tensor::zeros(&[o, i]);
    gemm(o, bs, i, g.data(), 1, o as isize, x.data(), i as isize, 1, 0.0, dw.data_mut());
    let mut db = Tensor::zeros(&[o]);
    for r in 0..bs {
        for (d, gv) in db.data_mut().iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
            *d += gv;
        }
    }
    Ok((dx, dw, db))
}
