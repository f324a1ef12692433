//! Forward and backward kernels for the layers used by the backbones.
//!
//! Activations are NCHW `Array4`s. Every training-mode forward returns a cache
//! holding what its backward needs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::Real;

/// Upper bound on im2col buffer size, in elements, before a batch is split.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Output indices `[lo, hi)` along one axis whose input index
/// `o·stride + kk − pad` lies in `[0, size)`.
fn valid_range(shape: &ConvShape, kk: usize, size: usize, out: usize) -> (usize, usize) {
    let (s, pad) = (shape.stride, shape.pad);
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(s) };
    let hi = if size + pad > kk { ((size + pad - kk - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold images `[first, first+count)` of `x` into `cols` (patch × count·Ho·Wo).
fn im2col<T: Real>(x: &Array4<T>, first: usize, count: usize, shape: &ConvShape, cols: &mut [T]) {
    let (_, c_in, h, w) = x.dim();
    let (ho, wo) = shape.out_size(h, w);
    let (k, st, pad) = (shape.kernel, shape.stride, shape.pad);
    let row_len = count * ho * wo;
    let xs = x.as_slice().expect("contiguous input");
    cols[..shape.patch() * row_len].fill(T::zero());
    for c in 0..c_in {
        for ki in 0..k {
            let (ylo, yhi) = valid_range(shape, ki, h, ho);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(shape, kj, w, wo);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for n in 0..count {
                    let img = &xs[((first + n) * c_in + c) * h * w..][..h * w];
                    for oy in ylo..yhi {
                        let src = &img[(oy * st + ki - pad) * w + xlo * st + kj - pad..];
                        let out = &mut dst[(n * ho + oy) * wo + xlo..][..xhi - xlo];
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = src[j * st];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into images `[first, first+count)` of `dx`.
fn col2im<T: Real>(cols: &[T], first: usize, count: usize, shape: &ConvShape, dx: &mut Array4<T>) {
    let (_, c_in, h, w) = dx.dim();
    let (ho, wo) = shape.out_size(h, w);
    let (k, st, pad) = (shape.kernel, shape.stride, shape.pad);
    let row_len = count * ho * wo;
    let dxs = dx.as_slice_mut().expect("contiguous gradient");
    for c in 0..c_in {
        for ki in 0..k {
            let (ylo, yhi) = valid_range(shape, ki, h, ho);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(shape, kj, w, wo);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * row_len..(row + 1) * row_len];
                for n in 0..count {
                    let img = &mut dxs[((first + n) * c_in + c) * h * w..][..h * w];
                    for oy in ylo..yhi {
                        let dst = &mut img[(oy * st + ki - pad) * w + xlo * st + kj - pad..];
                        let vals = &src[(n * ho + oy) * wo + xlo..][..xhi - xlo];
                        for (j, &v) in vals.iter().enumerate() {
                            dst[j * st] += v;
                        }
                    }
                }
            }
        }
    }
}

fn chunk_size(shape: &ConvShape, ho: usize, wo: usize, n: usize) -> usize {
    (COLS_BUDGET / (shape.patch() * ho * wo).max(1)).clamp(1, n.max(1))
}

/// `weight` is `(out_ch, in_ch·k·k)`.
pub fn conv_forward<T: Real>(x: &Array4<T>, weight: ArrayView2<T>, shape: &ConvShape) -> Array4<T> {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = shape.out_size(h, w);
    let mut y = Array4::<T>::zeros((n, shape.out_ch, ho, wo));
    let chunk = chunk_size(shape, ho, wo, n);
    let mut cols = vec![T::zero(); shape.patch() * chunk * ho * wo];
    let mut out = vec![T::zero(); shape.out_ch * chunk * ho * wo];
    let mut first = 0;
    while first < n {
        let count = chunk.min(n - first);
        let len = count * ho * wo;
        im2col(x, first, count, shape, &mut cols);
        let cols_v = ArrayView2::from_shape((shape.patch(), len), &cols[..shape.patch() * len]).unwrap();
        let mut out_v = ArrayViewMut2::from_shape((shape.out_ch, len), &mut out[..shape.out_ch * len]).unwrap();
        general_mat_mul(T::one(), &weight, &cols_v, T::zero(), &mut out_v);
        let ys = y.as_slice_mut().unwrap();
        for o in 0..shape.out_ch {
            for i in 0..count {
                let src = &out[o * len + i * ho * wo..][..ho * wo];
                ys[((first + i) * shape.out_ch + o) * ho * wo..][..ho * wo].copy_from_slice(src);
            }
        }
        first += count;
    }
    y
}

/// Accumulates the weight gradient into `dweight` and returns the input gradient
/// when `need_input_grad` is set.
pub fn conv_backward<T: Real>(
    x: &Array4<T>,
    weight: ArrayView2<T>,
    shape: &ConvShape,
    dy: &Array4<T>,
    mut dweight: ArrayViewMut2<T>,
    need_input_grad: bool,
) -> Option<Array4<T>> {
    let (n, c_in, h, w) = x.dim();
    let (ho, wo) = shape.out_size(h, w);
    let chunk = chunk_size(shape, ho, wo, n);
    let mut cols = vec![T::zero(); shape.patch() * chunk * ho * wo];
    let mut dy_cols = vec![T::zero(); shape.out_ch * chunk * ho * wo];
    let mut dx = need_input_grad.then(|| Array4::<T>::zeros((n, c_in, h, w)));
    let dys = dy.as_slice().expect("contiguous output gradient");
    let mut first = 0;
    while first < n {
        let count = chunk.min(n - first);
        let len = count * ho * wo;
        for o in 0..shape.out_ch {
            for i in 0..count {
                let src = &dys[((first + i) * shape.out_ch + o) * ho * wo..][..ho * wo];
                dy_cols[o * len + i * ho * wo..][..ho * wo].copy_from_slice(src);
            }
        }
        let dy_v = ArrayView2::from_shape((shape.out_ch, len), &dy_cols[..shape.out_ch * len]).unwrap();
        im2col(x, first, count, shape, &mut cols);
        {
            let cols_v = ArrayView2::from_shape((shape.patch(), len), &cols[..shape.patch() * len]).unwrap();
            general_mat_mul(T::one(), &dy_v, &cols_v.t(), T::one(), &mut dweight);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols =
                ArrayViewMut2::from_shape((shape.patch(), len), &mut cols[..shape.patch() * len]).unwrap();
            general_mat_mul(T::one(), &weight.t(), &dy_v, T::zero(), &mut dcols);
            col2im(&cols[..shape.patch() * len], first, count, shape, dx);
        }
        first += count;
    }
    dx
}

pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

pub const BN_EPS: f64 = 1e-3;

/// Normalize with batch statistics. Returns output, cache, batch mean and
/// unbiased batch variance (for the running estimates).
pub fn bn_forward_train<T: Real>(
    x: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
) -> (Array4<T>, BnCache<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let m = n * hw;
    let mf = T::from(m).unwrap();
    let eps = T::from(BN_EPS).unwrap();
    let xs = x.as_slice().expect("contiguous input");
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    for (i, plane) in xs.chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().copied().sum::<T>();
    }
    mean.mapv_inplace(|v| v / mf);
    for (i, plane) in xs.chunks_exact(hw).enumerate() {
        let mu = mean[i % c];
        var[i % c] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    var.mapv_inplace(|v| v / mf);
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut xhat = Array4::<T>::zeros((n, c, h, w));
    let mut y = Array4::<T>::zeros((n, c, h, w));
    let planes = xs
        .chunks_exact(hw)
        .zip(xhat.as_slice_mut().unwrap().chunks_exact_mut(hw))
        .zip(y.as_slice_mut().unwrap().chunks_exact_mut(hw));
    for (i, ((src, xh), yv)) in planes.enumerate() {
        let ch = i % c;
        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for ((&v, xh), yv) in src.iter().zip(xh).zip(yv) {
            *xh = (v - mu) * is;
            *yv = g * *xh + b;
        }
    }
    let unbiased = if m > 1 {
        var.mapv(|v| v * mf / T::from(m - 1).unwrap())
    } else {
        var
    };
    (y, BnCache { xhat, inv_std }, mean, unbiased)
}

pub fn bn_forward_eval<T: Real>(
    x: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    mean: &Array1<T>,
    var: &Array1<T>,
) -> Array4<T> {
    let eps = T::from(BN_EPS).unwrap();
    let mut y = x.clone();
    for ch in 0..x.dim().1 {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Returns dx; accumulates dgamma and dbeta.
pub fn bn_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Array1<T>,
    dy: &Array4<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let hw = h * w;
    let mf = T::from(n * hw).unwrap();
    let dys = dy.as_slice().expect("contiguous output gradient");
    let xhs = cache.xhat.as_slice().expect("contiguous cache");
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xh = vec![T::zero(); c];
    for (i, (d, x)) in dys.chunks_exact(hw).zip(xhs.chunks_exact(hw)).enumerate() {
        sum_dy[i % c] += d.iter().copied().sum::<T>();
        sum_dy_xh[i % c] += d.iter().zip(x).fold(T::zero(), |acc, (&d, &x)| acc + d * x);
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xh[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let planes = dx
        .as_slice_mut()
        .unwrap()
        .chunks_exact_mut(hw)
        .zip(dys.chunks_exact(hw))
        .zip(xhs.chunks_exact(hw));
    for (i, ((out, d), x)) in planes.enumerate() {
        let ch = i % c;
        let k = gamma[ch] * cache.inv_std[ch] / mf;
        let (sd, sdx) = (sum_dy[ch], sum_dy_xh[ch]);
        for ((o, &g), &xh) in out.iter_mut().zip(d).zip(x) {
            *o = k * (mf * g - sd - xh * sdx);
        }
    }
    dx
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<T: Real>(x: &Array4<T>) -> Array4<T> {
    let slope = T::from(LEAKY_SLOPE).unwrap();
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let slope = T::from(LEAKY_SLOPE).unwrap();
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= T::zero() {
            *d = *d * slope;
        }
    });
    dx
}

pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let area = T::from(h * w).unwrap();
    let mut out = Array2::<T>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            out[[i, ch]] = x.slice(s![i, ch, .., ..]).iter().copied().sum::<T>() / area;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let area = T::from(h * w).unwrap();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let v = dy[[i, ch]] / area;
            dx.slice_mut(s![i, ch, .., ..]).fill(v);
        }
    }
    dx
}

/// `x · Wᵀ + b` for `W` of shape `(out, in)`.
pub fn linear_forward<T: Real>(x: &Array2<T>, weight: ArrayView2<T>, bias: Option<&Array1<T>>) -> Array2<T> {
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        y += b;
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn linear_backward<T: Real>(
    x: &Array2<T>,
    weight: ArrayView2<T>,
    dy: &Array2<T>,
    mut dweight: ArrayViewMut2<T>,
    dbias: Option<&mut Array1<T>>,
) -> Array2<T> {
    general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut dweight);
    if let Some(db) = dbias {
        *db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Array::from_shape_fn((n, o, ho, wo), |(i, oc, y, xx)| {
            let mut acc = 0.0;
            for ic in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (y * stride + ki) as isize - pad as isize;
                        let ix = (xx * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x[[i, ic, iy as usize, ix as usize]] * w[[oc, ic, ki, kj]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3)] {
            let x = random4((3, 2, 7, 6), 1);
            let w = random4((4, 2, k, k), 2);
            let shape = ConvShape {
                in_ch: 2,
                out_ch: 4,
                kernel: k,
                stride,
                pad,
            };
            let wm = w.view().into_shape_with_order((4, 2 * k * k)).unwrap();
            let y = conv_forward(&x, wm, &shape);
            let expect = conv_naive(&x, &w, stride, pad);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint() {
        for (stride, pad, k, hw) in [(1, 1, 3, (7, 6)), (2, 1, 3, (8, 8)), (2, 1, 3, (7, 5)), (2, 0, 1, (6, 6)), (1, 0, 3, (5, 6))] {
            let x = random4((3, 2, hw.0, hw.1), 7);
            let w = random4((4, 2, k, k), 8);
            let shape = ConvShape {
                in_ch: 2,
                out_ch: 4,
                kernel: k,
                stride,
                pad,
            };
            let wm = w.view().into_shape_with_order((4, 2 * k * k)).unwrap();
            let y = conv_forward(&x, wm, &shape);
            let dy = random4(y.dim(), 9);
            let mut dw = Array2::<f64>::zeros((4, 2 * k * k));
            let dx = conv_backward(&x, wm, &shape, &dy, dw.view_mut(), true).unwrap();
            let lhs = (&y * &dy).sum();
            assert!((lhs - (&dx * &x).sum()).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - (&dw * &wm).sum()).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_backward_matches_adjoint() {
        // <dy, conv(x)> is linear in x and in w, so the adjoints are exact.
        let shape = ConvShape {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = random4((2, 2, 5, 5), 3);
        let w = random4((3, 2, 3, 3), 4);
        let wm = w.view().into_shape_with_order((3, 18)).unwrap();
        let y = conv_forward(&x, wm, &shape);
        let dy = random4(y.dim(), 5);
        let mut dw = Array2::<f64>::zeros((3, 18));
        let dx = conv_backward(&x, wm, &shape, &dy, dw.view_mut(), true).unwrap();
        let eps = 1e-6;
        let objective = |x: &Array4<f64>, w: &Array4<f64>| {
            let wm = w.view().into_shape_with_order((3, 18)).unwrap();
            (conv_forward(x, wm, &shape) * &dy).sum()
        };
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-8);
        }
        for (o, col) in [(0, 0), (2, 17), (1, 9)] {
            let (ic, r) = (col / 9, col % 9);
            let idx = [o, ic, r / 3, r % 3];
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wmn = w.clone();
            wmn[idx] -= eps;
            let fd = (objective(&x, &wp) - objective(&x, &wmn)) / (2.0 * eps);
            assert!((fd - dw[[o, col]]).abs() < 1e-8);
        }
    }

    #[test]
    fn batchnorm_normalizes_and_backprops() {
        let x = random4((4, 3, 3, 3), 6);
        let gamma = Array1::from(vec![1.0, 2.0, 0.5]);
        let beta = Array1::from(vec![0.0, -1.0, 0.3]);
        let (y, cache, mean, var) = bn_forward_train(&x, &gamma, &beta);
        for ch in 0..3 {
            let plane = y.index_axis(Axis(1), ch);
            let m = plane.mean().unwrap();
            assert!((m - beta[ch]).abs() < 1e-12);
            let xm = x.index_axis(Axis(1), ch).mean().unwrap();
            assert!((mean[ch] - xm).abs() < 1e-12);
            assert!(var[ch] > 0.0);
        }
        let dy = random4(y.dim(), 7);
        let mut dg = Array1::zeros(3);
        let mut db = Array1::zeros(3);
        let dx = bn_backward(&cache, &gamma, &dy, &mut dg, &mut db);
        let f = |x: &Array4<f64>, g: &Array1<f64>| (bn_forward_train(x, g, &beta).0 * &dy).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [3, 2, 1, 2], [2, 1, 2, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (f(&xp, &gamma) - f(&xm, &gamma)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
        let mut gp = gamma.clone();
        gp[1] += eps;
        let mut gm = gamma.clone();
        gm[1] -= eps;
        let fd = (f(&x, &gp) - f(&x, &gm)) / (2.0 * eps);
        assert!((fd - dg[1]).abs() < 1e-6);
        assert!((db[2] - dy.index_axis(Axis(1), 2).sum()).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_manual_product() {
        let x = Array2::<f64>::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let w = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let b = Array1::from(vec![1.0, -1.0]);
        let y = linear_forward(&x, w.view(), Some(&b));
        assert!((y[[0, 0]] - (0.1 + 0.4 + 0.9 + 1.0)).abs() < 1e-12);
        assert!((y[[1, 1]] - (0.4 + 0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pool_and_activation() {
        let x = random4((2, 3, 4, 4), 8);
        let p = global_avg_pool(&x);
        assert!((p[[1, 2]] - x.slice(s![1, 2, .., ..]).mean().unwrap()).abs() < 1e-12);
        let dx = global_avg_pool_backward(&Array2::<f64>::ones((2, 3)), 4, 4);
        assert!(dx.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let a = leaky_relu(&x);
        for (o, i) in a.iter().zip(x.iter()) {
            assert_eq!(*o, if *i > 0.0 { *i } else { 0.1 * i });
        }
    }
}
