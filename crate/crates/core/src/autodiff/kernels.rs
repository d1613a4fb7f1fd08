//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored as its
/// transpose (`k×m` or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
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

/// Geometry of a 2-D sliding window over one `channels×height×width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image into a `col_rows × col_cols` patch matrix.
pub(crate) fn im2col(image: &[f64], win: &Window, col: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let mut row = 0;
    for c in 0..win.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..win.kernel_h {
            for kj in 0..win.kernel_w {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * win.stride + ki) as isize - win.pad as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= win.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * win.stride + kj) as isize - win.pad as isize;
                        *v = if ix < 0 || ix >= win.width as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `image`.
pub(crate) fn col2im(col: &[f64], win: &Window, image: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let mut row = 0;
    for c in 0..win.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..win.kernel_h {
            for kj in 0..win.kernel_w {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let base = iy as usize * win.width;
                    for x in 0..ow {
                        let ix = (x * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && ix < win.width as isize {
                            dst[base + ix as usize] += src[y * ow + x];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-group normalization statistics for a `[batch, channels, spatial]` view.
pub(crate) struct NormSaved {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each `(sample, group)` block to zero mean and unit variance
/// (biased estimator). Channels of a group are contiguous in memory.
pub(crate) fn group_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> NormSaved {
    let block = channels / groups * spatial;
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(batch * groups);
    for (src, dst) in x.chunks_exact(block).zip(normalized.chunks_exact_mut(block)) {
        let mean = src.iter().sum::<f64>() / block as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        inv_std.push(r);
    }
    NormSaved { normalized, inv_std }
}

/// Gradient through the normalization, given the gradient w.r.t. the
/// normalized values.
pub(crate) fn group_norm_backward(saved: &NormSaved, grad_normalized: &[f64], dx: &mut [f64]) {
    let groups = saved.inv_std.len();
    let block = saved.normalized.len() / groups;
    for (((xhat, g), out), &r) in saved
        .normalized
        .chunks_exact(block)
        .zip(grad_normalized.chunks_exact(block))
        .zip(dx.chunks_exact_mut(block))
        .zip(&saved.inv_std)
    {
        let mean_g = g.iter().sum::<f64>() / block as f64;
        let mean_gx = g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / block as f64;
        for ((o, gi), xi) in out.iter_mut().zip(g).zip(xhat) {
            *o += r * (gi - mean_g - xi * mean_gx);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) - x·y + ln(1 + e^{-|x|})`, the stable binary cross-entropy of
/// logit `x` against target `y`.
pub(crate) fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
