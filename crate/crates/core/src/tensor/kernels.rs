// Raw numeric kernels on flat slices. Shapes are validated by the tape ops
// before anything here runs.

use rayon::prelude::*;

/// Strided matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(a.data.len() as isize >= span(m, k, a.rs, a.cs));
    assert!(b.data.len() as isize >= span(k, n, b.rs, b.cs));
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is an exclusive borrow of at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.out_ch * self.out_plane()
    }
}

/// Unfolds one `[C,H,W]` sample into `[C·kh·kw, oh·ow]` columns (zero padding).
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters column gradients back onto the input plane.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dxc[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let patch = g.patch();
    let plane = g.out_plane();
    out.par_chunks_mut(g.out_sample())
        .zip(x.par_chunks(g.in_sample()))
        .for_each_init(
            || vec![0.0; patch * plane],
            |cols, (y, xs)| {
                im2col(xs, g, cols);
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[o]);
                }
                gemm(
                    g.out_ch,
                    patch,
                    plane,
                    Mat::rows(kernel, patch),
                    Mat::rows(cols, plane),
                    1.0,
                    y,
                );
            },
        );
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads {
    let patch = g.patch();
    let plane = g.out_plane();

    let input = want_input.then(|| {
        let mut dx = vec![0.0; g.batch * g.in_sample()];
        dx.par_chunks_mut(g.in_sample())
            .zip(dy.par_chunks(g.out_sample()))
            .for_each_init(
                || vec![0.0; patch * plane],
                |dcols, (dxs, dys)| {
                    // dcols = Kᵀ · dY
                    gemm(
                        patch,
                        g.out_ch,
                        plane,
                        Mat::t(kernel, patch),
                        Mat::rows(dys, plane),
                        0.0,
                        dcols,
                    );
                    col2im(dcols, g, dxs);
                },
            );
        dx
    });

    let kernel_grad = want_kernel.then(|| {
        // Per-sample partials reduced in sample order keep the sum deterministic
        // regardless of how rayon schedules the map.
        let partials: Vec<Vec<f64>> = x
            .par_chunks(g.in_sample())
            .zip(dy.par_chunks(g.out_sample()))
            .map(|(xs, dys)| {
                let mut cols = vec![0.0; patch * plane];
                im2col(xs, g, &mut cols);
                let mut dk = vec![0.0; g.out_ch * patch];
                gemm(
                    g.out_ch,
                    plane,
                    patch,
                    Mat::rows(dys, plane),
                    Mat::t(&cols, plane),
                    0.0,
                    &mut dk,
                );
                dk
            })
            .collect();
        let mut dk = vec![0.0; g.out_ch * patch];
        for p in &partials {
            dk.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        dk
    });

    let bias = want_bias.then(|| {
        let mut db = vec![0.0; g.out_ch];
        for dys in dy.chunks(g.out_sample()) {
            for (o, row) in dys.chunks(plane).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        db
    });

    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

/// Normalizes each contiguous plane of length `plane`; returns (output, 1/σ per plane).
pub(crate) fn instance_norm_forward(x: &[f64], plane: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let planes = x.len() / plane;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; planes];
    out.par_chunks_mut(plane)
        .zip(x.par_chunks(plane))
        .zip(inv_std.par_iter_mut())
        .for_each(|((y, xs), inv)| {
            let n = plane as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            *inv = 1.0 / (var + eps).sqrt();
            for (o, v) in y.iter_mut().zip(xs) {
                *o = (v - mean) * *inv;
            }
        });
    (out, inv_std)
}

pub(crate) fn instance_norm_backward(xhat: &[f64], inv_std: &[f64], dy: &[f64], plane: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    dx.par_chunks_mut(plane)
        .zip(xhat.par_chunks(plane).zip(dy.par_chunks(plane)))
        .zip(inv_std.par_iter())
        .for_each(|((dxs, (xh, dys)), inv)| {
            let n = plane as f64;
            let mean_dy = dys.iter().sum::<f64>() / n;
            let mean_dy_xhat = dys.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
            for ((o, d), x) in dxs.iter_mut().zip(dys).zip(xh) {
                *o = inv * (d - mean_dy - x * mean_dy_xhat);
            }
        });
    dx
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.planes * g.oh * g.ow];
    let norm = 1.0 / (g.k * g.k) as f64;
    for p in 0..g.planes {
        let xs = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let ys = &mut out[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for dy in 0..g.k {
                    let row = (oy * g.stride + dy) * g.w + ox * g.stride;
                    acc += xs[row..row + g.k].iter().sum::<f64>();
                }
                ys[oy * g.ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    let norm = 1.0 / (g.k * g.k) as f64;
    for p in 0..g.planes {
        let dxs = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        let dys = &dy[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let v = dys[oy * g.ow + ox] * norm;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    dxs[row..row + g.k].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of a `[rows, k]` matrix with max subtraction.
pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (p, z) in probs.chunks_mut(k).zip(logits.chunks(k)) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (pi, zi) in p.iter_mut().zip(z) {
            *pi = (zi - max).exp();
            total += *pi;
        }
        p.iter_mut().for_each(|v| *v /= total);
    }
    probs
}

/// Mean of each group of rows, summing in the listed order.
pub(crate) fn group_mean(x: &[f64], width: usize, groups: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; groups.len() * width];
    for (dst, rows) in out.chunks_mut(width).zip(groups) {
        for &r in rows {
            dst.iter_mut()
                .zip(&x[r * width..(r + 1) * width])
                .for_each(|(d, v)| *d += v);
        }
        let n = rows.len() as f64;
        dst.iter_mut().for_each(|d| *d /= n);
    }
    out
}
