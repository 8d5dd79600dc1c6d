//! Raw forward/backward kernels on contiguous NCHW buffers. Shape validation
//! happens in the tape layer; these functions assume consistent inputs.

use super::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Elem>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let plane = s.out_plane();
    for ci in 0..s.cin {
        let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..s.ho {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    let line = &mut dst[oh * s.wo..(oh + 1) * s.wo];
                    if ih < 0 || ih >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        *v = if iw < 0 || iw >= s.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(col: &[T], s: &ConvShape, dx: &mut [T]) {
    let plane = s.out_plane();
    for ci in 0..s.cin {
        let dxc = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..s.ho {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for ow in 0..s.wo {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        if iw >= 0 && iw < s.w as isize {
                            dst[iw as usize] += src[oh * s.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    s: &ConvShape,
) -> Tensor<T> {
    let plane = s.out_plane();
    let krows = s.col_rows();
    let mut out = vec![T::zero(); s.n * s.cout * plane];
    let mut col = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); krows * plane]
    };
    let in_stride = s.cin * s.h * s.w;
    for b in 0..s.n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let colb: &[T] = if s.is_pointwise() {
            xb
        } else {
            im2col(xb, s, &mut col);
            &col
        };
        let ob = &mut out[b * s.cout * plane..(b + 1) * s.cout * plane];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            s.cout,
            krows,
            plane,
            T::one(),
            weight.data(),
            krows as isize,
            1,
            colb,
            plane as isize,
            1,
            beta,
            ob,
            plane as isize,
            1,
        );
    }
    Tensor::from_vec(vec![s.n, s.cout, s.ho, s.wo], out).expect("conv output dims")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    s: &ConvShape,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let plane = s.out_plane();
    let krows = s.col_rows();
    let in_stride = s.cin * s.h * s.w;
    let out_stride = s.cout * plane;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_db.then(|| vec![T::zero(); s.cout]);
    let mut col = vec![T::zero(); if s.is_pointwise() { 0 } else { krows * plane }];
    let mut dcol = vec![T::zero(); if s.is_pointwise() || !need_dx { 0 } else { krows * plane }];

    for b in 0..s.n {
        let dyb = &dy.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyb.chunks(plane).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
            let colb: &[T] = if s.is_pointwise() {
                xb
            } else {
                im2col(xb, s, &mut col);
                &col
            };
            // dW (Cout×K) += dY (Cout×P) · colᵀ (P×K)
            T::gemm(
                s.cout,
                plane,
                krows,
                T::one(),
                dyb,
                plane as isize,
                1,
                colb,
                1,
                plane as isize,
                T::one(),
                dw,
                krows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            // dcol (K×P) = Wᵀ (K×Cout) · dY (Cout×P)
            if s.is_pointwise() {
                T::gemm(
                    krows,
                    s.cout,
                    plane,
                    T::one(),
                    weight.data(),
                    1,
                    krows as isize,
                    dyb,
                    plane as isize,
                    1,
                    T::zero(),
                    dxb,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    krows,
                    s.cout,
                    plane,
                    T::one(),
                    weight.data(),
                    1,
                    krows as isize,
                    dyb,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                col2im_add(&dcol, s, dxb);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.dims().to_vec(), d).expect("dx dims")),
        dw: dw.map(|d| Tensor::from_vec(weight.dims().to_vec(), d).expect("dw dims")),
        db: db.map(|d| Tensor::from_vec(vec![s.cout], d).expect("db dims")),
    }
}

/// Per-channel statistics of an NCHW buffer, accumulated in f64.
pub(crate) fn channel_mean_var<T: Elem>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += x.data()[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            q += x.data()[base..base + plane]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

pub(crate) struct BnOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Affine normalisation with the supplied per-channel mean/variance.
pub(crate) fn bn_apply<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> BnOut<T> {
    let dims = x.dims().to_vec();
    let (n, c, plane) = (dims[0], dims[1], dims[2] * dims[3]);
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let m = T::of(mean[ch]);
            let (g, bt, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            for i in base..base + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    BnOut {
        y: Tensor::from_vec(dims.clone(), y).expect("bn dims"),
        xhat: Tensor::from_vec(dims, xhat).expect("bn dims"),
        inv_std,
    }
}

/// Backward of batch-statistics normalisation (`batch_stats`) or of the
/// fixed affine map used in eval mode.
pub(crate) fn bn_backward<T: Elem>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dims = dy.dims().to_vec();
    let (n, c, plane) = (dims[0], dims[1], dims[2] * dims[3]);
    let count = (n * plane) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let d = dy.data()[i].as_f64();
                sum_dy += d;
                sum_dy_xh += d * xhat.data()[i].as_f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xh);
        dbeta[ch] = T::of(sum_dy);
        let g = gamma.data()[ch].as_f64() * inv_std[ch].as_f64();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let d = dy.data()[i].as_f64();
                dx[i] = if batch_stats {
                    let xh = xhat.data()[i].as_f64();
                    T::of(g * (d - sum_dy / count - xh * sum_dy_xh / count))
                } else {
                    T::of(g * d)
                };
            }
        }
    }
    (
        Tensor::from_vec(dims, dx).expect("bn dx"),
        Tensor::from_vec(vec![c], dgamma).expect("bn dgamma"),
        Tensor::from_vec(vec![c], dbeta).expect("bn dbeta"),
    )
}

/// Max pooling with implicit -inf padding. Returns the output and, for each
/// output element, the flat input index that won.
pub(crate) fn maxpool_forward<T: Elem>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> (Tensor<T>, Vec<usize>) {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        let v = x.data()[idx];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (Tensor::from_vec(vec![n, c, ho, wo], y).expect("maxpool dims"), arg)
}

/// Mean over H×W blocks of size (h/oh)×(w/ow), accumulated in f64.
pub(crate) fn block_avgpool<T: Elem>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (bh, bw) = (h / oh, w / ow);
    let scale = 1.0 / (bh * bw) as f64;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0f64;
                for r in i * bh..(i + 1) * bh {
                    let row = &x.data()[base + r * w + j * bw..base + r * w + (j + 1) * bw];
                    s += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                y.push(T::of(s * scale));
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], y).expect("avgpool dims")
}

pub(crate) fn block_avgpool_backward<T: Elem>(dy: &Tensor<T>, in_dims: &[usize]) -> Tensor<T> {
    let (h, w) = (in_dims[2], in_dims[3]);
    let (oh, ow) = (dy.dims()[2], dy.dims()[3]);
    let (bh, bw) = (h / oh, w / ow);
    let scale = T::of(1.0 / (bh * bw) as f64);
    let nc = in_dims[0] * in_dims[1];
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for r in 0..h {
            for col in 0..w {
                dx[p * h * w + r * w + col] = dy.data()[p * oh * ow + (r / bh) * ow + col / bw] * scale;
            }
        }
    }
    Tensor::from_vec(in_dims.to_vec(), dx).expect("avgpool dx")
}

/// Row-wise softmax of a `rows × k` buffer after dividing by `temperature`.
pub(crate) fn softmax_rows<T: Elem>(x: &[T], k: usize, temperature: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row
            .iter()
            .map(|v| v.as_f64() / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() / temperature - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / z)));
    }
    out
}

/// Row-wise log-softmax in f64.
pub(crate) fn log_softmax_rows<T: Elem>(x: &[T], k: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(scaled.iter().map(|v| v - lse));
    }
    out
}
