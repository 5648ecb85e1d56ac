//! Raw slice kernels. Shapes are validated by the callers in `autograd`.

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposition of
/// either row-major operand. Logical shapes are `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oi in 0..oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oi in 0..oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for oj in 0..ow {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            plane[base + ix as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let x_per = g.in_ch * g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.out_ch * ohw];
    let mut cols = vec![0.0; rows * ohw];
    for n in 0..g.batch {
        im2col(g, &x[n * x_per..(n + 1) * x_per], &mut cols);
        let dst = &mut out[n * g.out_ch * ohw..(n + 1) * g.out_ch * ohw];
        gemm(g.out_ch, rows, ohw, w, false, &cols, false, dst, false);
    }
    out
}

/// Adjoint of [`conv2d`] in its input argument.
pub fn conv2d_input_grad(g: &ConvGeom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let x_per = g.in_ch * g.in_h * g.in_w;
    let mut gx = vec![0.0; g.batch * x_per];
    let mut cols = vec![0.0; rows * ohw];
    for n in 0..g.batch {
        let gy_n = &gy[n * g.out_ch * ohw..(n + 1) * g.out_ch * ohw];
        gemm(rows, g.out_ch, ohw, w, true, gy_n, false, &mut cols, false);
        col2im_add(g, &cols, &mut gx[n * x_per..(n + 1) * x_per]);
    }
    gx
}

/// Adjoint of [`conv2d`] in its weight argument.
pub fn conv2d_weight_grad(g: &ConvGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let x_per = g.in_ch * g.in_h * g.in_w;
    let mut gw = vec![0.0; g.out_ch * rows];
    let mut cols = vec![0.0; rows * ohw];
    for n in 0..g.batch {
        im2col(g, &x[n * x_per..(n + 1) * x_per], &mut cols);
        let gy_n = &gy[n * g.out_ch * ohw..(n + 1) * g.out_ch * ohw];
        gemm(g.out_ch, ohw, rows, gy_n, false, &cols, true, &mut gw, true);
    }
    gw
}

/// Non-overlapping average pooling with window `(kh, kw)` over NCHW input.
pub fn avg_pool(shape: &[usize], kh: usize, kw: usize, x: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / kh, w / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh * kh {
            for j in 0..ow * kw {
                dst[(i / kh) * ow + j / kw] += src[i * w + j];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

/// Adjoint of [`avg_pool`]: spreads each pooled gradient evenly over its window.
pub fn avg_pool_adjoint(in_shape: &[usize], kh: usize, kw: usize, g: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / kh, w / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh * kh {
            for j in 0..ow * kw {
                dst[i * w + j] = src[(i / kh) * ow + j / kw] * scale;
            }
        }
    }
    out
}

/// Flat input indices of the maxima of each `k × k` stride-`k` window.
/// Ties go to the lowest linear index.
pub fn max_pool_argmax(shape: &[usize], k: usize, x: &[f64]) -> Vec<usize> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * k * w + oj * k;
                for di in 0..k {
                    for dj in 0..k {
                        let cand = base + (oi * k + di) * w + oj * k + dj;
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
