//! Forward and backward kernels for the heavier primitives. All loops run in a
//! fixed order so results are bit-reproducible at a given precision.

use super::tensor::Real;

/// Output geometry of a 2-D convolution over NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || stride == 0 || x[1] != w[1] {
            return None;
        }
        let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if w[2] == 0 || w[3] == 0 || w[2] > h || w[3] > wd {
            return None;
        }
        Some(Self {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            padding,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds one CHW image into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_pixels();
    let mut q = 0;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = &mut cols[q * p..(q + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                q += 1;
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one CHW image gradient.
fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let p = g.out_pixels();
    let mut q = 0;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = &cols[q * p..(q + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.out_w + ox];
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Accumulates, for every output position, the kernel taps in
/// (channel, row, column) order.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (q, p) = (g.patch_len(), g.out_pixels());
    let img_len = g.in_channels * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * p];
    let mut cols = vec![T::zero(); q * p];
    for n in 0..g.batch {
        im2col(&x[n * img_len..(n + 1) * img_len], g, &mut cols);
        let out_img = &mut out[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        for o in 0..g.out_channels {
            let out_row = &mut out_img[o * p..(o + 1) * p];
            let w_row = &w[o * q..(o + 1) * q];
            for (qi, &wv) in w_row.iter().enumerate() {
                axpy(wv, &cols[qi * p..(qi + 1) * p], out_row);
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. its input and weights; either side can be
/// skipped when it does not require a gradient.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (q, p) = (g.patch_len(), g.out_pixels());
    let img_len = g.in_channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); q * p];
    let mut dcols = vec![T::zero(); q * p];
    for n in 0..g.batch {
        let dout_img = &dout[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * img_len..(n + 1) * img_len], g, &mut cols);
            for o in 0..g.out_channels {
                let d_row = &dout_img[o * p..(o + 1) * p];
                for qi in 0..q {
                    dw[o * q + qi] = dw[o * q + qi] + dot(d_row, &cols[qi * p..(qi + 1) * p]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            for o in 0..g.out_channels {
                let d_row = &dout_img[o * p..(o + 1) * p];
                for qi in 0..q {
                    axpy(w[o * q + qi], d_row, &mut dcols[qi * p..(qi + 1) * p]);
                }
            }
            col2im_add(&dcols, g, &mut dx[n * img_len..(n + 1) * img_len]);
        }
    }
    (dx, dw)
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], out_row);
        }
    }
    out
}

pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dc: &[T],
    (m, k, n): (usize, usize, usize),
    need_da: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_da.then(|| {
        let mut da = vec![T::zero(); m * k];
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                da[i * k + p] = dot(dc_row, &b[p * n..(p + 1) * n]);
            }
        }
        da
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); k * n];
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(a[i * k + p], dc_row, &mut db[p * n..(p + 1) * n]);
            }
        }
        db
    });
    (da, db)
}

/// Non-overlapping `size x size` max pooling. Returns pooled values and the
/// flat input index that won each window (first maximum on ties).
pub fn max_pool<T: Real>(x: &[T], shape: &[usize], size: usize) -> (Vec<T>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Row-wise numerically stable log-softmax over the last axis.
pub fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    out
}
