//! Differentiable operations.
//!
//! Each op computes its result eagerly and registers a backward closure
//! mapping the output gradient to parent gradients. Heavy kernels (matmul,
//! conv) route through `matrixmultiply::dgemm`, which is single-threaded and
//! deterministic; everything else is plain loops in a fixed order.

use super::{Buf, Tensor};

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let out = a.buf().zip(b.buf(), |x, y| x + y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let out = a.buf().zip(b.buf(), |x, y| x - y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let out = a.buf().zip(b.buf(), |x, y| x * y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, ps| {
            vec![
                Some(g.zip(ps[1].buf(), |gv, bv| gv * bv)),
                Some(g.zip(ps[0].buf(), |gv, av| gv * av)),
            ]
        }),
    )
}

/// `a*x + b` with scalar constants.
pub fn affine(x: &Tensor, a: f64, b: f64) -> Tensor {
    let out = x.buf().map(|v| a * v + b);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g.map(|v| a * v))]),
    )
}

pub fn scale(x: &Tensor, a: f64) -> Tensor {
    affine(x, a, 0.0)
}

pub fn silu(x: &Tensor) -> Tensor {
    let out = x.buf().map(|v| v * sigmoid_f(v));
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(|g, _, ps| {
            vec![Some(g.zip(ps[0].buf(), |gv, xv| {
                let s = sigmoid_f(xv);
                gv * (s * (1.0 + xv * (1.0 - s)))
            }))]
        }),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out = x.buf().map(sigmoid_f);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(|g, y, _| vec![Some(g.zip(y, |gv, yv| gv * yv * (1.0 - yv)))]),
    )
}

pub fn sqrt_eps(x: &Tensor, eps: f64) -> Tensor {
    let out = x.buf().map(|v| (v + eps).sqrt());
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(|g, y, _| vec![Some(g.zip(y, |gv, yv| gv / (2.0 * yv)))]),
    )
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// broadcast adds
// ---------------------------------------------------------------------------

/// Adds `b` (a suffix of `x`'s shape) to every leading slice of `x`.
pub fn add_bcast_tail(x: &Tensor, b: &Tensor) -> Tensor {
    let xs = x.shape();
    let bs = b.shape();
    assert!(bs.len() <= xs.len() && &xs[xs.len() - bs.len()..] == bs, "suffix mismatch");
    let s = b.buf().numel();
    let mut data = x.buf().to_vec();
    let bd = b.data();
    for (i, v) in data.iter_mut().enumerate() {
        *v += bd[i % s];
    }
    let out = Buf::new(xs.to_vec(), data);
    Tensor::from_op(
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let bshape = ps[1].shape().to_vec();
            let mut db = vec![0.0; s];
            for (i, gv) in g.data().iter().enumerate() {
                db[i % s] += gv;
            }
            vec![Some(g.clone()), Some(Buf::new(bshape, db))]
        }),
    )
}

/// Adds a per-(item, channel) bias `b[N,C]` onto `x[N,C,...]`.
pub fn add_item_channel(x: &Tensor, b: &Tensor) -> Tensor {
    let xs = x.shape().to_vec();
    assert!(xs.len() >= 2);
    let (n, c) = (xs[0], xs[1]);
    assert_eq!(b.shape(), &[n, c]);
    let inner: usize = xs[2..].iter().product();
    let mut data = x.buf().to_vec();
    let bd = b.data();
    for i in 0..n {
        for j in 0..c {
            let bias = bd[i * c + j];
            let base = (i * c + j) * inner;
            for v in &mut data[base..base + inner] {
                *v += bias;
            }
        }
    }
    let out = Buf::new(xs, data);
    Tensor::from_op(
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _, _| {
            let gd = g.data();
            let mut db = vec![0.0; n * c];
            for (slot, chunk) in db.iter_mut().zip(gd.chunks_exact(inner)) {
                *slot = chunk.iter().sum();
            }
            vec![Some(g.clone()), Some(Buf::new(vec![n, c], db))]
        }),
    )
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    let out = x.buf().reshaped(shape.to_vec());
    let orig = x.shape().to_vec();
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g.reshaped(orig.clone()))]),
    )
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_buf(x: &Buf, perm: &[usize]) -> Buf {
    let xs = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let in_strides = strides_of(xs);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![0.0; x.numel()];
    let xd = x.data();
    let nd = xs.len();
    let mut idx = vec![0usize; nd]; // index in output coordinates
    for (o, slot) in data.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for d in 0..nd {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = xd[src];
    }
    Buf::new(out_shape, data)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let out = permute_buf(x.buf(), perm);
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(permute_buf(g, &inv))]),
    )
}

/// Concatenates along `axis`. All other dims must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Tensor {
    assert!(!xs.is_empty());
    let base = xs[0].shape().to_vec();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let parts: Vec<usize> = xs.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = parts.iter().sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let mut data = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let mut off = 0usize;
        for (t, &p) in xs.iter().zip(&parts) {
            let src = &t.data()[o * p * inner..(o + 1) * p * inner];
            let dst = &mut data[(o * total + off) * inner..(o * total + off + p) * inner];
            dst.copy_from_slice(src);
            off += p;
        }
    }
    let out = Buf::new(shape, data);
    Tensor::from_op(
        out,
        xs.to_vec(),
        Box::new(move |g, _, ps| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(ps.len());
            let mut off = 0usize;
            for (t, &p) in ps.iter().zip(&parts) {
                let mut d = vec![0.0; outer * p * inner];
                for o in 0..outer {
                    let src = &gd[(o * total + off) * inner..(o * total + off + p) * inner];
                    d[o * p * inner..(o + 1) * p * inner].copy_from_slice(src);
                }
                grads.push(Some(Buf::new(t.shape().to_vec(), d)));
                off += p;
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

/// C = A_op @ B_op for row-major slices, via matrixmultiply.
#[allow(clippy::too_many_arguments)]
fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
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

/// Plain 2-D matmul: `a[M,K] @ b[K,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims");
    let mut data = vec![0.0; m * n];
    gemm_into(m, k, n, a.data(), false, b.data(), false, &mut data, 0.0);
    let out = Buf::new(vec![m, n], data);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let mut da = vec![0.0; m * k];
            gemm_into(m, n, k, g.data(), false, ps[1].data(), true, &mut da, 0.0);
            let mut db = vec![0.0; k * n];
            gemm_into(k, m, n, ps[0].data(), true, g.data(), false, &mut db, 0.0);
            vec![
                Some(Buf::new(vec![m, k], da)),
                Some(Buf::new(vec![k, n], db)),
            ]
        }),
    )
}

/// Batched matmul over a leading group axis with optional transposes:
/// `a[G, ., .] @ b[G, ., .]`.
pub fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let gsz = a.shape()[0];
    assert_eq!(b.shape()[0], gsz, "bmm group size");
    let (am, ak) = (a.shape()[1], a.shape()[2]);
    let (bm, bk) = (b.shape()[1], b.shape()[2]);
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k, k2, "bmm inner dims");
    let (sa, sb) = (am * ak, bm * bk);
    let mut data = vec![0.0; gsz * m * n];
    for gi in 0..gsz {
        gemm_into(
            m,
            k,
            n,
            &a.data()[gi * sa..(gi + 1) * sa],
            ta,
            &b.data()[gi * sb..(gi + 1) * sb],
            tb,
            &mut data[gi * m * n..(gi + 1) * m * n],
            0.0,
        );
    }
    let out = Buf::new(vec![gsz, m, n], data);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let (abuf, bbuf) = (ps[0].buf(), ps[1].buf());
            let mut da = vec![0.0; gsz * sa];
            let mut db = vec![0.0; gsz * sb];
            for gi in 0..gsz {
                let gslice = &g.data()[gi * m * n..(gi + 1) * m * n];
                let aslice = &abuf.data()[gi * sa..(gi + 1) * sa];
                let bslice = &bbuf.data()[gi * sb..(gi + 1) * sb];
                let daslice = &mut da[gi * sa..(gi + 1) * sa];
                let dbslice = &mut db[gi * sb..(gi + 1) * sb];
                // dA = dY @ B_op^T (then transpose into storage layout if ta)
                if ta {
                    // A stored [k,m]; dA_stored = B_op @ dY^T
                    if tb {
                        gemm_into(k, n, m, bslice, true, gslice, true, daslice, 0.0);
                    } else {
                        gemm_into(k, n, m, bslice, false, gslice, true, daslice, 0.0);
                    }
                } else if tb {
                    gemm_into(m, n, k, gslice, false, bslice, false, daslice, 0.0);
                } else {
                    gemm_into(m, n, k, gslice, false, bslice, true, daslice, 0.0);
                }
                // dB = A_op^T @ dY (transposed into storage layout if tb)
                if tb {
                    // B stored [n,k]; dB_stored = dY^T @ A_op
                    if ta {
                        gemm_into(n, m, k, gslice, true, aslice, true, dbslice, 0.0);
                    } else {
                        gemm_into(n, m, k, gslice, true, aslice, false, dbslice, 0.0);
                    }
                } else if ta {
                    gemm_into(k, m, n, aslice, false, gslice, false, dbslice, 0.0);
                } else {
                    gemm_into(k, m, n, aslice, true, gslice, false, dbslice, 0.0);
                }
            }
            vec![
                Some(Buf::new(vec![gsz, am, ak], da)),
                Some(Buf::new(vec![gsz, bm, bk], db)),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], d: &ConvDims, ni: usize, col: &mut [f64]) {
    let (ci, h, w, kh, kw, ho, wo) = (d.ci, d.h, d.w, d.kh, d.kw, d.ho, d.wo);
    let xs = &x[ni * ci * h * w..(ni + 1) * ci * h * w];
    let mut r = 0usize;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let row_ok = iy >= 0 && (iy as usize) < h;
                    for ox in 0..wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        col[r * ho * wo + oy * wo + ox] = if row_ok && ix >= 0 && (ix as usize) < w
                        {
                            xs[c * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im_add(col: &[f64], d: &ConvDims, ni: usize, dx: &mut [f64]) {
    let (ci, h, w, kh, kw, ho, wo) = (d.ci, d.h, d.w, d.kh, d.kw, d.ho, d.wo);
    let xs = &mut dx[ni * ci * h * w..(ni + 1) * ci * h * w];
    let mut r = 0usize;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        xs[c * h * w + iy as usize * w + ix as usize] +=
                            col[r * ho * wo + oy * wo + ox];
                    }
                }
                r += 1;
            }
        }
    }
}

/// 2-D convolution, zero padding, square stride: `x[N,Ci,H,W] * w[Co,Ci,kh,kw] + b[Co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
    assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
    let d = ConvDims {
        n: xs[0],
        ci: xs[1],
        h: xs[2],
        w: xs[3],
        co: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
        ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
        wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
    };
    assert_eq!(b.shape(), &[d.co]);
    let ksz = d.ci * d.kh * d.kw;
    let mut data = vec![0.0; d.n * d.co * d.ho * d.wo];
    let mut col = vec![0.0; ksz * d.ho * d.wo];
    for ni in 0..d.n {
        im2col(x.data(), &d, ni, &mut col);
        let dst = &mut data[ni * d.co * d.ho * d.wo..(ni + 1) * d.co * d.ho * d.wo];
        gemm_into(d.co, ksz, d.ho * d.wo, w.data(), false, &col, false, dst, 0.0);
        let bd = b.data();
        for o in 0..d.co {
            let bias = bd[o];
            for v in &mut dst[o * d.ho * d.wo..(o + 1) * d.ho * d.wo] {
                *v += bias;
            }
        }
    }
    let out = Buf::new(vec![d.n, d.co, d.ho, d.wo], data);
    Tensor::from_op(
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let (xb, wb) = (ps[0].buf(), ps[1].buf());
            let ksz = d.ci * d.kh * d.kw;
            let hw = d.ho * d.wo;
            let mut dx = vec![0.0; xb.numel()];
            let mut dw = vec![0.0; wb.numel()];
            let mut db = vec![0.0; d.co];
            let mut col = vec![0.0; ksz * hw];
            let mut dcol = vec![0.0; ksz * hw];
            for ni in 0..d.n {
                let gslice = &g.data()[ni * d.co * hw..(ni + 1) * d.co * hw];
                im2col(xb.data(), &d, ni, &mut col);
                // dW += dY @ col^T
                gemm_into(d.co, hw, ksz, gslice, false, &col, true, &mut dw, 1.0);
                // dcol = W^T @ dY
                gemm_into(ksz, d.co, hw, wb.data(), true, gslice, false, &mut dcol, 0.0);
                col2im_add(&dcol, &d, ni, &mut dx);
                for o in 0..d.co {
                    db[o] += gslice[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            vec![
                Some(Buf::new(xb.shape().to_vec(), dx)),
                Some(Buf::new(wb.shape().to_vec(), dw)),
                Some(Buf::new(vec![d.co], db)),
            ]
        }),
    )
}

/// Nearest-neighbour 2x upsampling of `x[N,C,H,W]`.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = vec![0.0; n * c * 4 * h * w];
    let xd = x.data();
    for nc in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[nc * h * w + y * w + xx];
                let base = nc * 4 * h * w;
                for dy in 0..2 {
                    for dxx in 0..2 {
                        data[base + (2 * y + dy) * 2 * w + 2 * xx + dxx] = v;
                    }
                }
            }
        }
    }
    let out = Buf::new(vec![n, c, 2 * h, 2 * w], data);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gd = g.data();
            let mut dx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        let base = nc * 4 * h * w;
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                acc += gd[base + (2 * y + dy) * 2 * w + 2 * xx + dxx];
                            }
                        }
                        dx[nc * h * w + y * w + xx] = acc;
                    }
                }
            }
            vec![Some(Buf::new(vec![n, c, h, w], dx))]
        }),
    )
}

// ---------------------------------------------------------------------------
// normalization, softmax
// ---------------------------------------------------------------------------

/// Group normalization over `x[N,C,H,W]` with affine `gamma[C]`, `beta[C]`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let s = x.shape().to_vec();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    let cg = c / groups;
    let m = cg * inner;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; n * groups];
    for ni in 0..n {
        for gi in 0..groups {
            let base = ni * c * inner + gi * cg * inner;
            let sl = &xd[base..base + m];
            let mean = sl.iter().sum::<f64>() / m as f64;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ni * groups + gi] = istd;
            for j in 0..m {
                let xh = (sl[j] - mean) * istd;
                xhat[base + j] = xh;
                let ch = gi * cg + j / inner;
                data[base + j] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let out = Buf::new(s.clone(), data);
    Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, ps| {
            let gam = ps[1].data();
            let gdta = g.data();
            let mut dx = vec![0.0; gdta.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * c * inner + gi * cg * inner;
                    let istd = inv_std[ni * groups + gi];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..m {
                        let ch = gi * cg + j / inner;
                        let dxh = gdta[base + j] * gam[ch];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[base + j];
                    }
                    let mean_dxhat = sum_dxhat / m as f64;
                    let mean_dxhat_xhat = sum_dxhat_xhat / m as f64;
                    for j in 0..m {
                        let ch = gi * cg + j / inner;
                        let dxh = gdta[base + j] * gam[ch];
                        dx[base + j] =
                            istd * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                        dgamma[ch] += gdta[base + j] * xhat[base + j];
                        dbeta[ch] += gdta[base + j];
                    }
                }
            }
            vec![
                Some(Buf::new(ps[0].shape().to_vec(), dx)),
                Some(Buf::new(vec![c], dgamma)),
                Some(Buf::new(vec![c], dbeta)),
            ]
        }),
    )
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let l = *s.last().unwrap();
    let rows = x.buf().numel() / l;
    let xd = x.data();
    let mut data = vec![0.0; xd.len()];
    for r in 0..rows {
        let sl = &xd[r * l..(r + 1) * l];
        let mx = sl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..l {
            let e = (sl[j] - mx).exp();
            data[r * l + j] = e;
            z += e;
        }
        for j in 0..l {
            data[r * l + j] /= z;
        }
    }
    let out = Buf::new(s, data);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, y, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; gd.len()];
            for r in 0..rows {
                let dot: f64 = (0..l).map(|j| gd[r * l + j] * yd[r * l + j]).sum();
                for j in 0..l {
                    dx[r * l + j] = yd[r * l + j] * (gd[r * l + j] - dot);
                }
            }
            vec![Some(Buf::new(g.shape().to_vec(), dx))]
        }),
    )
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.buf().numel() as f64;
    let out = Buf::scalar(x.data().iter().sum::<f64>() / n);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, ps| {
            let gv = g.item() / n;
            vec![Some(Buf::full(ps[0].shape(), gv))]
        }),
    )
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let out = Buf::scalar(x.data().iter().sum::<f64>());
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(|g, _, ps| vec![Some(Buf::full(ps[0].shape(), g.item()))]),
    )
}

/// Mean squared error between same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.buf().numel() as f64;
    let out = Buf::scalar(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n,
    );
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let gv = g.item();
            let (ad, bd) = (ps[0].data(), ps[1].data());
            let da: Vec<f64> = ad
                .iter()
                .zip(bd)
                .map(|(x, y)| 2.0 * (x - y) * gv / n)
                .collect();
            let db: Vec<f64> = da.iter().map(|v| -v).collect();
            vec![
                Some(Buf::new(ps[0].shape().to_vec(), da)),
                Some(Buf::new(ps[1].shape().to_vec(), db)),
            ]
        }),
    )
}

/// Masked MSE normalized by the valid weight mass.
///
/// `mask` must either match `a`'s shape or match with the channel axis set to
/// 1 (it is then broadcast across channels). Panics if the mask is all zero;
/// callers guard that per their own contracts.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &Buf) -> Tensor {
    let s = a.shape().to_vec();
    assert_eq!(b.shape(), &s[..], "masked_mse operand shapes");
    let weights = broadcast_mask(&s, mask);
    let wsum: f64 = weights.iter().sum();
    assert!(wsum > 0.0, "masked_mse: mask selects nothing");
    let val = a
        .data()
        .iter()
        .zip(b.data())
        .zip(&weights)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum::<f64>()
        / wsum;
    let out = Buf::scalar(val);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, ps| {
            let gv = g.item();
            let (ad, bd) = (ps[0].data(), ps[1].data());
            let da: Vec<f64> = ad
                .iter()
                .zip(bd)
                .zip(&weights)
                .map(|((x, y), w)| 2.0 * w * (x - y) * gv / wsum)
                .collect();
            let db: Vec<f64> = da.iter().map(|v| -v).collect();
            vec![
                Some(Buf::new(ps[0].shape().to_vec(), da)),
                Some(Buf::new(ps[1].shape().to_vec(), db)),
            ]
        }),
    )
}

fn broadcast_mask(shape: &[usize], mask: &Buf) -> Vec<f64> {
    if mask.shape() == shape {
        return mask.to_vec();
    }
    assert_eq!(shape.len(), 4, "broadcast mask expects 4-d operands");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(
        mask.shape(),
        &[n, 1, h, w],
        "mask must be [N,1,H,W] or match operands"
    );
    let md = mask.data();
    let mut out = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            dst.copy_from_slice(&md[ni * h * w..(ni + 1) * h * w]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// temporal-attention helpers
// ---------------------------------------------------------------------------

/// Expands a relative-position table `bias[H, 2F-1]` into matrices `[H,F,F]`
/// where entry (i, j) reads offset `j - i`.
pub fn rel_bias_matrix(bias: &Tensor, frames: usize) -> Tensor {
    let h = bias.shape()[0];
    assert_eq!(bias.shape()[1], 2 * frames - 1);
    let bd = bias.data();
    let mut data = vec![0.0; h * frames * frames];
    for hi in 0..h {
        for i in 0..frames {
            for j in 0..frames {
                data[hi * frames * frames + i * frames + j] =
                    bd[hi * (2 * frames - 1) + (j + frames - 1 - i)];
            }
        }
    }
    let out = Buf::new(vec![h, frames, frames], data);
    Tensor::from_op(
        out,
        vec![bias.clone()],
        Box::new(move |g, _, _| {
            let gd = g.data();
            let mut db = vec![0.0; h * (2 * frames - 1)];
            for hi in 0..h {
                for i in 0..frames {
                    for j in 0..frames {
                        db[hi * (2 * frames - 1) + (j + frames - 1 - i)] +=
                            gd[hi * frames * frames + i * frames + j];
                    }
                }
            }
            vec![Some(Buf::new(vec![h, 2 * frames - 1], db))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::check_unary;
    use crate::tensor::Tensor;

    fn buf_seq(shape: &[usize]) -> Buf {
        let n: usize = shape.iter().product();
        Buf::new(
            shape.to_vec(),
            (0..n).map(|i| (i as f64 * 0.37).sin() * 0.9).collect(),
        )
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::constant(buf_seq(&[2, 3, 4]));
        let y = permute(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = permute(&y, &[1, 2, 0]);
        assert_eq!(z.buf(), x.buf());
    }

    #[test]
    fn concat_restores_parts() {
        let a = Tensor::constant(buf_seq(&[2, 2, 3]));
        let b = Tensor::constant(buf_seq(&[2, 1, 3]));
        let y = concat(&[a.clone(), b.clone()], 1);
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert_eq!(y.data()[0..6], a.data()[0..6]);
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::constant(Buf::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = Tensor::constant(Buf::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]));
        let y = matmul(&a, &b);
        assert_eq!(y.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn bmm_matches_matmul_per_group() {
        let a = Tensor::constant(buf_seq(&[3, 2, 4]));
        let b = Tensor::constant(buf_seq(&[3, 4, 5]));
        let y = bmm(&a, &b, false, false);
        for gi in 0..3 {
            let ag = Tensor::constant(Buf::new(
                vec![2, 4],
                a.data()[gi * 8..(gi + 1) * 8].to_vec(),
            ));
            let bg = Tensor::constant(Buf::new(
                vec![4, 5],
                b.data()[gi * 20..(gi + 1) * 20].to_vec(),
            ));
            let yg = matmul(&ag, &bg);
            assert_eq!(&y.data()[gi * 10..(gi + 1) * 10], yg.data());
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        check_unary(&buf_seq(&[2, 5]), 1e-5, 2e-6, |x| silu(x));
        check_unary(&buf_seq(&[2, 5]), 1e-5, 2e-6, |x| sigmoid(x));
        check_unary(&buf_seq(&[7]), 1e-5, 2e-6, |x| sqrt_eps(x, 1.5));
        check_unary(&buf_seq(&[3, 4]), 1e-5, 2e-6, |x| softmax_last(x));
        check_unary(&buf_seq(&[2, 3]), 1e-5, 2e-6, |x| affine(x, -0.7, 0.3));
    }

    #[test]
    fn grad_matmul_both_sides() {
        let a0 = buf_seq(&[3, 4]);
        let b0 = buf_seq(&[4, 2]);
        let bc = Tensor::constant(b0.clone());
        check_unary(&a0, 1e-5, 2e-6, |x| matmul(x, &bc));
        let ac = Tensor::constant(a0);
        check_unary(&b0, 1e-5, 2e-6, |x| matmul(&ac, x));
    }

    #[test]
    fn grad_bmm_transposes() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let ash = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let bsh = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let b0 = buf_seq(&bsh);
            let bc = Tensor::constant(b0.clone());
            check_unary(&buf_seq(&ash), 1e-5, 2e-6, move |x| bmm(x, &bc, ta, tb));
            let ac = Tensor::constant(buf_seq(&ash));
            check_unary(&b0, 1e-5, 2e-6, move |x| bmm(&ac, x, ta, tb));
        }
    }

    #[test]
    fn grad_conv2d_all_parents() {
        let x0 = buf_seq(&[2, 3, 6, 5]);
        let w0 = buf_seq(&[4, 3, 3, 3]);
        let b0 = buf_seq(&[4]);
        {
            let (w, b) = (Tensor::constant(w0.clone()), Tensor::constant(b0.clone()));
            check_unary(&x0, 1e-5, 5e-6, move |x| conv2d(x, &w, &b, 1, 1));
        }
        {
            let (x, b) = (Tensor::constant(x0.clone()), Tensor::constant(b0.clone()));
            check_unary(&w0, 1e-5, 5e-6, move |w| conv2d(&x, w, &b, 2, 1));
        }
        {
            let (x, w) = (Tensor::constant(x0.clone()), Tensor::constant(w0.clone()));
            check_unary(&b0, 1e-5, 5e-6, move |b| conv2d(&x, &w, b, 1, 0));
        }
    }

    #[test]
    fn grad_group_norm() {
        let x0 = buf_seq(&[2, 4, 3, 3]);
        let g0 = Buf::new(vec![4], vec![1.1, 0.9, 1.3, 0.8]);
        let be0 = Buf::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]);
        {
            let (g, b) = (Tensor::constant(g0.clone()), Tensor::constant(be0.clone()));
            check_unary(&x0, 1e-5, 5e-5, move |x| group_norm(x, &g, &b, 2, 1e-5));
        }
        {
            let (x, b) = (Tensor::constant(x0.clone()), Tensor::constant(be0.clone()));
            check_unary(&g0, 1e-5, 5e-6, move |g| group_norm(&x, g, &b, 2, 1e-5));
        }
    }

    #[test]
    fn grad_shape_and_reduction_ops() {
        check_unary(&buf_seq(&[2, 3, 4]), 1e-5, 2e-6, |x| permute(x, &[2, 0, 1]));
        check_unary(&buf_seq(&[2, 2, 2, 2]), 1e-5, 2e-6, |x| upsample2x(x));
        check_unary(&buf_seq(&[3, 4]), 1e-5, 2e-6, |x| mean_all(x));
        let b = Tensor::constant(buf_seq(&[3, 4]));
        check_unary(&buf_seq(&[3, 4]), 1e-5, 2e-6, move |x| mse(x, &b));
        let mask = Buf::new(vec![2, 1, 2, 2], vec![1., 0., 1., 1., 0., 0., 1., 0.]);
        let tgt = Tensor::constant(buf_seq(&[2, 3, 2, 2]));
        check_unary(&buf_seq(&[2, 3, 2, 2]), 1e-5, 2e-6, move |x| {
            masked_mse(x, &tgt, &mask)
        });
    }

    #[test]
    fn grad_broadcast_adds_and_bias_tables() {
        let b0 = buf_seq(&[4]);
        {
            let b = Tensor::constant(b0.clone());
            check_unary(&buf_seq(&[3, 4]), 1e-5, 2e-6, move |x| add_bcast_tail(x, &b));
        }
        {
            let x = Tensor::constant(buf_seq(&[3, 4]));
            check_unary(&b0, 1e-5, 2e-6, move |b| add_bcast_tail(&x, b));
        }
        let bias0 = buf_seq(&[2, 2]);
        {
            let b = Tensor::constant(bias0.clone());
            check_unary(&buf_seq(&[2, 2, 3, 5]), 1e-5, 2e-6, move |x| {
                add_item_channel(x, &b)
            });
        }
        {
            let x = Tensor::constant(buf_seq(&[2, 2, 3, 5]));
            check_unary(&bias0, 1e-5, 2e-6, move |b| add_item_channel(&x, b));
        }
        check_unary(&buf_seq(&[2, 7]), 1e-5, 2e-6, |b| rel_bias_matrix(b, 4));
    }
}
