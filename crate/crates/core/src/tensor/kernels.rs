use super::Tensor;
use crate::error::{Error, Result};

/// Output length of a strided window along one spatial axis.
pub fn conv_output_len(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > size + 2 * pad {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m * n <= c.len());
    // SAFETY: the debug assertions above bound every strided access inside
    // the slices; callers construct strides from the same dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        if input.rank() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, input.rank()));
        }
        if weight.rank() != 4 {
            return Err(Error::shape("conv2d", "weight rank", 4, weight.rank()));
        }
        let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (c_out, wc_in, k, k2) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if wc_in != c_in {
            return Err(Error::shape("conv2d", "C_in", wc_in, c_in));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", "kernel width", k, k2));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let h_out = conv_output_len(h, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "H + 2*pad", k, h + 2 * pad))?;
        let w_out = conv_output_len(w, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "W + 2*pad", k, w + 2 * pad))?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, image: &[f32], out: &mut [f32]) {
        let p = self.cols();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = ((ci * self.k + kh) * self.k + kw) * p;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                        let dst = &mut out[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
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

    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let p = self.cols();
        for ci in 0..self.c_in {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = ((ci * self.k + kh) * self.k + kw) * p;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `input: [N, C_in, H, W]`, `weight: [C_out, C_in, k, k]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::shape("conv2d", "bias length", g.c_out, b.numel()));
        }
    }
    let (r, p) = (g.rows(), g.cols());
    let mut cols = vec![0.0f32; r * p];
    let mut out = vec![0.0f32; g.n * g.c_out * p];
    let in_stride = g.c_in * g.h * g.w;
    for n in 0..g.n {
        g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        gemm(
            g.c_out,
            r,
            p,
            weight.data(),
            (r, 1),
            &cols,
            (p, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)?.ensure_finite("conv2d")
}

#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let expected = [g.n, g.c_out, g.h_out, g.w_out];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out numel",
            expected.iter().product(),
            grad_out.numel(),
        ));
    }
    let (r, p) = (g.rows(), g.cols());
    let mut cols = vec![0.0f32; r * p];
    let mut gcols = vec![0.0f32; r * p];
    let mut gin = vec![0.0f32; input.numel()];
    let mut gw = vec![0.0f32; weight.numel()];
    let mut gb = vec![0.0f32; g.c_out];
    let in_stride = g.c_in * g.h * g.w;
    for n in 0..g.n {
        let gout = &grad_out.data()[n * g.c_out * p..(n + 1) * g.c_out * p];
        for (co, row) in gout.chunks(p).enumerate() {
            gb[co] += row.iter().sum::<f32>();
        }
        g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        // gW += gout (C_out x P) * cols^T (P x R)
        gemm(g.c_out, p, r, gout, (p, 1), &cols, (1, p), 1.0, &mut gw);
        // gcols = W^T (R x C_out) * gout (C_out x P)
        gemm(r, g.c_out, p, weight.data(), (1, r), gout, (p, 1), 0.0, &mut gcols);
        g.col2im(&gcols, &mut gin[n * in_stride..(n + 1) * in_stride]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    })
}

fn dense_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 {
        return Err(Error::shape("dense", "input rank", 2, input.rank()));
    }
    if weight.rank() != 2 {
        return Err(Error::shape("dense", "weight rank", 2, weight.rank()));
    }
    if weight.dim(1) != input.dim(1) {
        return Err(Error::shape("dense", "D_in", weight.dim(1), input.dim(1)));
    }
    Ok((input.dim(0), input.dim(1), weight.dim(0)))
}

/// Affine map over rows: `input: [N, D_in]`, `weight: [D_out, D_in]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in, d_out) = dense_dims(input, weight)?;
    let mut out = vec![0.0f32; n * d_out];
    if let Some(b) = bias {
        if b.numel() != d_out {
            return Err(Error::shape("dense", "bias length", d_out, b.numel()));
        }
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        n,
        d_in,
        d_out,
        input.data(),
        (d_in, 1),
        weight.data(),
        (1, d_in),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut out,
    );
    Tensor::new(vec![n, d_out], out)?.ensure_finite("dense")
}

#[derive(Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (n, d_in, d_out) = dense_dims(input, weight)?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape("dense_backward", "grad_out numel", n * d_out, grad_out.numel()));
    }
    let mut gin = vec![0.0f32; n * d_in];
    let mut gw = vec![0.0f32; d_out * d_in];
    gemm(n, d_out, d_in, grad_out.data(), (d_out, 1), weight.data(), (d_in, 1), 0.0, &mut gin);
    gemm(d_out, n, d_in, grad_out.data(), (1, d_out), input.data(), (d_in, 1), 0.0, &mut gw);
    let mut gb = vec![0.0f32; d_out];
    for row in grad_out.data().chunks(d_out) {
        for (acc, g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d_in], gin)?,
        weight: Tensor::new(vec![d_out, d_in], gw)?,
        bias: Tensor::new(vec![d_out], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        if a.rank() != b.rank() {
            return Err(Error::shape("add", "rank", a.rank(), b.rank()));
        }
        let axis = a.shape().iter().zip(b.shape()).position(|(x, y)| x != y).unwrap_or(0);
        return Err(Error::shape("add", format!("axis {axis}"), a.dim(axis), b.dim(axis)));
    }
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]).ensure_finite("add")
}

fn channel_layout(op: &'static str, input: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape(op, "input rank", 2, input.rank()));
    }
    if input.dim(1) != channels {
        return Err(Error::shape(op, "channels", channels, input.dim(1)));
    }
    Ok((input.dim(0), input.shape()[2..].iter().product()))
}

/// Per-channel `scale * x + shift` over axis 1.
pub fn channel_affine(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    if scale.numel() != shift.numel() {
        return Err(Error::shape("channel_affine", "shift length", scale.numel(), shift.numel()));
    }
    let c = scale.numel();
    let (_, inner) = channel_layout("channel_affine", input, c)?;
    Tensor::from_fn(input.shape(), |i| {
        let ch = (i / inner) % c;
        scale.data()[ch] * input.data()[i] + shift.data()[ch]
    })
    .ensure_finite("channel_affine")
}

#[derive(Debug)]
pub struct ChannelAffineGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

pub(crate) fn channel_affine_backward(
    input: &Tensor,
    scale: &Tensor,
    grad_out: &Tensor,
) -> Result<ChannelAffineGrads> {
    let c = scale.numel();
    let (_, inner) = channel_layout("channel_affine", input, c)?;
    let mut gs = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    let gin = Tensor::from_fn(input.shape(), |i| {
        let ch = (i / inner) % c;
        let g = grad_out.data()[i];
        gs[ch] += g * input.data()[i];
        gb[ch] += g;
        g * scale.data()[ch]
    });
    Ok(ChannelAffineGrads {
        input: gin,
        scale: Tensor::new(vec![c], gs)?,
        shift: Tensor::new(vec![c], gb)?,
    })
}

/// `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape("global_avg_pool", "input rank", 4, input.rank()));
    }
    let (n, c) = (input.dim(0), input.dim(1));
    let hw = input.dim(2) * input.dim(3);
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

fn pool_geom(op: &'static str, input: &Tensor, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if input.rank() != 4 {
        return Err(Error::shape(op, "input rank", 4, input.rank()));
    }
    let h_out = conv_output_len(input.dim(2), kernel, stride, 0)
        .ok_or_else(|| Error::invalid(format!("{op}: empty pooling window (kernel {kernel})")))?;
    let w_out = conv_output_len(input.dim(3), kernel, stride, 0)
        .ok_or_else(|| Error::invalid(format!("{op}: empty pooling window (kernel {kernel})")))?;
    Ok((h_out, w_out))
}

pub fn avg_pool(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (h_out, w_out) = pool_geom("avg_pool", input, kernel, stride)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let norm = (kernel * kernel) as f32;
    let mut out = Vec::with_capacity(n * c * h_out * w_out);
    for plane in input.data().chunks(h * w) {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w + ox * stride;
                    acc += plane[row..row + kernel].iter().sum::<f32>();
                }
                out.push(acc / norm);
            }
        }
    }
    Tensor::new(vec![n, c, h_out, w_out], out)
}

/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum (first one on ties).
pub fn max_pool(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h_out, w_out) = pool_geom("max_pool", input, kernel, stride)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let mut out = Vec::with_capacity(n * c * h_out * w_out);
    let mut argmax = Vec::with_capacity(out.capacity());
    for (p, plane) in input.data().chunks(h * w).enumerate() {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(p * h * w + best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, h_out, w_out], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Vec<f32> {
        let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f64; n * co * ho * wo];
        for b_ in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o] as f64;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b_ * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(&[2, 3, 5, 4]);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 20) % 4;
            assert_eq!(*v, b.data()[ch]);
        }
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let reference = naive_conv(&x, &w, b.data(), stride, pad);
            for (a, r) in y.data().iter().zip(&reference) {
                assert!((a - r).abs() <= 1e-6 * r.abs().max(1.0), "{a} vs {r}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 5, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("C_in"), "{err}");
        let w = Tensor::zeros(&[3, 2, 7, 7]);
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, None).unwrap().data(), x.data());
        let b = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        assert_eq!(y.data(), &[0.25, -3.0, 0.25, -3.0]);
    }

    #[test]
    fn dense_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 7], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let y = dense(&x, &w, Some(&b)).unwrap();
        for n in 0..4 {
            for o in 0..5 {
                let dot: f64 = (0..7)
                    .map(|i| x.data()[n * 7 + i] as f64 * w.data()[o * 7 + i] as f64)
                    .sum::<f64>()
                    + b.data()[o] as f64;
                assert!((y.data()[n * 5 + o] as f64 - dot).abs() <= 1e-6 * dot.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pointwise_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let c = Tensor::full(&[1, 1, 4, 2], 3.0);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let neg = Tensor::from_fn(a.shape(), |i| -a.data()[i]);
        assert!(add(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_rejects_empty_window() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(avg_pool(&x, 3, 1).is_err());
        assert!(max_pool(&x, 0, 1).is_err());
        let (m, idx) = max_pool(&Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32), 2, 2).unwrap();
        assert_eq!(m.item(), 3.0);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn affine_requires_matching_channels() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let s = Tensor::zeros(&[2]);
        assert!(channel_affine(&x, &s, &s).is_err());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d(&mix, &w, None, 1, 1).unwrap();
        let cx = conv2d(&x, &w, None, 1, 1).unwrap();
        let cy = conv2d(&y, &w, None, 1, 1).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-5, "{} vs {rhs}", lhs.data()[i]);
        }
    }
}
