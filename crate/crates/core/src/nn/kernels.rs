//! Raw compute kernels behind the graph ops. Everything here is single-threaded
//! and therefore bit-deterministic.

use super::tensor::Tensor;

/// Stride and zero padding of a 2-d convolution. Padding is
/// `[top, bottom, left, right]` so even kernels can keep the spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: [usize; 4],
}

impl ConvGeom {
    pub fn same(k: usize) -> Self {
        let before = k / 2;
        let after = k - 1 - before;
        Self { stride: 1, pad: [before, after, before, after] }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        let p = k / 2;
        Self { stride, pad: [p, p, p, p] }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ph = h + self.pad[0] + self.pad[1];
        let pw = w + self.pad[2] + self.pad[3];
        assert!(ph >= kh && pw >= kw, "kernel larger than padded input");
        ((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == [0; 4]
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit row/col strides;
/// `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    gemm_strided(m, k, n, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// As [`gemm`] with explicit strides for `c` as well.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the caller passes slices large enough for the given shapes and
    // strides; the assertions on shapes live in the graph ops.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Output columns `ox` in `[lo, hi)` read an input column inside `[0, w)`.
fn valid_range(ow: usize, w: usize, kx: usize, pl: usize, s: usize) -> (usize, usize) {
    // ix = ox * s + kx - pl must satisfy 0 <= ix < w.
    let lo = pl.saturating_sub(kx).div_ceil(s).min(ow);
    let hi = if w + pl > kx { ((w + pl - kx - 1) / s + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let ohw = oh * ow;
    let [pt, _, pl, _] = geom.pad;
    let s = geom.stride;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                let dst = &mut col[row..row + ohw];
                let (lo, hi) = valid_range(ow, w, kx, pl, s);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pt as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo == hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let start = lo * s + kx - pl;
                    if s == 1 {
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, v) in out[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [f32],
) {
    let ohw = oh * ow;
    let [pt, _, pl, _] = geom.pad;
    let s = geom.stride;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                let src = &col[row..row + ohw];
                let (lo, hi) = valid_range(ow, w, kx, pl, s);
                if lo == hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let start = lo * s + kx - pl;
                    let from = &src[oy * ow + lo..oy * ow + hi];
                    if s == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(from) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[start..].iter_mut().step_by(s).zip(from) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeom) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, c2, kh, kw) = w.dims4();
    assert_eq!(c, c2, "conv2d channel mismatch: input {c}, kernel {c2}");
    let (oh, ow) = geom.output_size(h, wd, kh, kw);
    let ck = c * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![0.0f32; n * o * ohw];
    let pointwise = geom.is_pointwise(kh, kw);
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; ck * ohw] };
    for ni in 0..n {
        let xn = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let cols: &[f32] = if pointwise {
            xn
        } else {
            im2col(xn, c, h, wd, kh, kw, geom, oh, ow, &mut col);
            &col
        };
        let on = &mut out[ni * o * ohw..(ni + 1) * o * ohw];
        gemm(o, ck, ohw, w.data(), (ck as isize, 1), cols, (ohw as isize, 1), 0.0, on);
        if let Some(b) = b {
            for (oc, bias) in b.data().iter().enumerate() {
                for v in &mut on[oc * ohw..(oc + 1) * ohw] {
                    *v += bias;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out)
}

/// Gradients of a convolution. Returns `(dx, dw, db)`; each is computed only
/// when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, kh, kw) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let ck = c * kh * kw;
    let ohw = oh * ow;
    let pointwise = geom.is_pointwise(kh, kw);
    let mut dx = want_dx.then(|| vec![0.0f32; x.numel()]);
    let mut dw = want_dw.then(|| vec![0.0f32; w.numel()]);
    let mut col = if pointwise || !want_dw { Vec::new() } else { vec![0.0f32; ck * ohw] };
    let mut rows = if want_dw { vec![0.0f32; ck * ohw] } else { Vec::new() };
    let mut dcol = if want_dx && !pointwise { vec![0.0f32; ck * ohw] } else { Vec::new() };
    for ni in 0..n {
        let dyn_ = &dy.data()[ni * o * ohw..(ni + 1) * o * ohw];
        let xn = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f32] = if pointwise {
                xn
            } else {
                im2col(xn, c, h, wd, kh, kw, geom, oh, ow, &mut col);
                &col
            };
            transpose::transpose(cols, &mut rows, ohw, ck);
            // dw[o, ck] += dy[o, ohw] * rows[ohw, ck]
            gemm(o, ohw, ck, dyn_, (ohw as isize, 1), &rows, (ck as isize, 1), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
            if pointwise {
                // dx[c, hw] = w^T[c, o] * dy[o, hw]
                gemm(ck, o, ohw, w.data(), (1, ck as isize), dyn_, (ohw as isize, 1), 1.0, dxn);
            } else {
                gemm(ck, o, ohw, w.data(), (1, ck as isize), dyn_, (ohw as isize, 1), 0.0, &mut dcol);
                col2im_add(&dcol, c, h, wd, kh, kw, geom, oh, ow, dxn);
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![0.0f32; o];
        for ni in 0..n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let start = (ni * o + oc) * ohw;
                *acc += dy.data()[start..start + ohw].iter().sum::<f32>();
            }
        }
        Tensor::new([o], db)
    });
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        db,
    )
}

/// Interpolation taps for half-pixel-centred bilinear resampling along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = (pos - i0 as f64) as f32;
            (i0, i1, t)
        })
        .collect()
}

pub fn resize_bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - fy);
                let bot = v * fy;
                d[y0 * w + x0] += top * (1.0 - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (1.0 - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
    Tensor::new([n, c, h, w], dx)
}
