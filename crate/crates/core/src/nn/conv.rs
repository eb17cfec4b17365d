use std::ops::Range;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Weights of a 3D convolution.
///
/// For [`conv3d`] the kernel is `[out_ch, in_ch, kD, kH, kW]`. [`deconv3d`] reuses the same
/// tensor as the adjoint map, so there the kernel reads `[in_ch, out_ch, kD, kH, kW]` and the
/// bias has one entry per deconvolution output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dParams<T = f64> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f64> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub fn deconv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * pad).filter(|&n| n >= 1)
}

/// Index bookkeeping of one cross-correlation `out[co, o] = sum w[co, ci, k] * in[ci, o*s + k - p]`.
struct Corr {
    c_in: usize,
    c_out: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Corr {
    fn in_vol(&self) -> usize {
        self.in_sp.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }

    /// Output positions along `axis` whose tap `k` lands inside the unpadded input.
    fn span(&self, axis: usize, k: usize) -> Range<usize> {
        let (s, p, n_in, n_out) = (self.stride[axis], self.pad[axis], self.in_sp[axis], self.out_sp[axis]);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n_in + p > k {
            ((n_in + p - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Visits every (kernel tap, output row) pair, handing over the tap offset, the input and
    /// output row starts and the valid span of output columns.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, &Range<usize>)) {
        let [kd_n, kh_n, kw_n] = self.k;
        let [_, in_h, in_w] = self.in_sp;
        let [_, out_h, out_w] = self.out_sp;
        for kd in 0..kd_n {
            let rd = self.span(0, kd);
            for kh in 0..kh_n {
                let rh = self.span(1, kh);
                for kw in 0..kw_n {
                    let rw = self.span(2, kw);
                    if rw.is_empty() {
                        continue;
                    }
                    let tap = (kd * kh_n + kh) * kw_n + kw;
                    for od in rd.clone() {
                        let id = od * self.stride[0] + kd - self.pad[0];
                        for oh in rh.clone() {
                            let ih = oh * self.stride[1] + kh - self.pad[1];
                            f(tap, (id * in_h + ih) * in_w, (od * out_h + oh) * out_w, kw, &rw);
                        }
                    }
                }
            }
        }
    }

    fn in_col(&self, ow: usize, kw: usize) -> usize {
        ow * self.stride[2] + kw - self.pad[2]
    }

    /// `out += corr(input, kernel)`.
    fn gather<T: Real>(&self, input: &[T], kernel: &[T], out: &mut [T]) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.k_vol());
        for co in 0..self.c_out {
            let o = &mut out[co * ov..(co + 1) * ov];
            for ci in 0..self.c_in {
                let x = &input[ci * iv..(ci + 1) * iv];
                let w = &kernel[(co * self.c_in + ci) * kv..][..kv];
                self.for_each_row(|tap, irow, orow, kw, rw| {
                    let wt = w[tap];
                    for ow in rw.clone() {
                        o[orow + ow] = o[orow + ow] + wt * x[irow + self.in_col(ow, kw)];
                    }
                });
            }
        }
    }

    /// `grad_in += corr^T(grad_out, kernel)`.
    fn scatter<T: Real>(&self, grad_out: &[T], kernel: &[T], grad_in: &mut [T]) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.k_vol());
        for co in 0..self.c_out {
            let g = &grad_out[co * ov..(co + 1) * ov];
            for ci in 0..self.c_in {
                let dx = &mut grad_in[ci * iv..(ci + 1) * iv];
                let w = &kernel[(co * self.c_in + ci) * kv..][..kv];
                self.for_each_row(|tap, irow, orow, kw, rw| {
                    let wt = w[tap];
                    for ow in rw.clone() {
                        let i = irow + self.in_col(ow, kw);
                        dx[i] = dx[i] + wt * g[orow + ow];
                    }
                });
            }
        }
    }

    /// `grad_kernel += d corr / d kernel` contracted with `grad_out`.
    fn kernel_grad<T: Real>(&self, input: &[T], grad_out: &[T], grad_kernel: &mut [T]) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.k_vol());
        for co in 0..self.c_out {
            let g = &grad_out[co * ov..(co + 1) * ov];
            for ci in 0..self.c_in {
                let x = &input[ci * iv..(ci + 1) * iv];
                let dw = &mut grad_kernel[(co * self.c_in + ci) * kv..][..kv];
                self.for_each_row(|tap, irow, orow, kw, rw| {
                    let mut acc = T::zero();
                    for ow in rw.clone() {
                        acc = acc + g[orow + ow] * x[irow + self.in_col(ow, kw)];
                    }
                    dw[tap] = dw[tap] + acc;
                });
            }
        }
    }
}

fn spatial(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [_, d, h, w] => Ok([*d, *h, *w]),
        s => Err(Error::Shape {
            context: format!("{what} must be [C, D, H, W]"),
            expected: vec![0; 4],
            actual: s.to_vec(),
        }),
    }
}

fn kernel_dims<T: Real>(p: &Conv3dParams<T>) -> Result<([usize; 2], [usize; 3])> {
    match p.kernel.shape() {
        &[a, b, kd, kh, kw] if kd > 0 && kh > 0 && kw > 0 => Ok(([a, b], [kd, kh, kw])),
        s => Err(Error::Shape {
            context: "kernel must be [C0, C1, kD, kH, kW]".into(),
            expected: vec![0; 5],
            actual: s.to_vec(),
        }),
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], vol: usize) {
    for (c, chunk) in out.chunks_exact_mut(vol).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Real>(grad_out: &[T], channels: usize, vol: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels], |c| grad_out[c * vol..(c + 1) * vol].iter().copied().sum())
}

fn conv_plan<T: Real>(input: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Corr> {
    let in_sp = spatial(input, "conv3d input")?;
    let ([c_out, c_in], k) = kernel_dims(p)?;
    if input.shape()[0] != c_in {
        return Err(Error::shape(
            "conv3d input channels vs kernel",
            &[c_in],
            &input.shape()[..1],
        ));
    }
    p.bias.expect_shape("conv3d bias", &[c_out])?;
    let mut out_sp = [0; 3];
    for a in 0..3 {
        out_sp[a] = conv_output_len(in_sp[a], k[a], p.stride[a], p.padding[a]).ok_or_else(|| {
            Error::shape(
                format!("conv3d axis {a}: input too small for kernel/padding"),
                &k,
                &in_sp,
            )
        })?;
    }
    Ok(Corr {
        c_in,
        c_out,
        in_sp,
        out_sp,
        k,
        stride: p.stride,
        pad: p.padding,
    })
}

/// Zero-padded 3D cross-correlation plus bias on a `[C_in, D, H, W]` volume.
pub fn conv3d<T: Real>(input: &Tensor<T>, params: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let plan = conv_plan(input, params)?;
    let mut out = vec![T::zero(); plan.c_out * plan.out_vol()];
    plan.gather(input.data(), params.kernel.data(), &mut out);
    add_bias(&mut out, params.bias.data(), plan.out_vol());
    let [d, h, w] = plan.out_sp;
    Tensor::new(&[plan.c_out, d, h, w], out)
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    params: &Conv3dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = conv_plan(input, params)?;
    let [d, h, w] = plan.out_sp;
    grad_out.expect_shape("conv3d upstream gradient", &[plan.c_out, d, h, w])?;
    let mut gin = vec![T::zero(); input.len()];
    plan.scatter(grad_out.data(), params.kernel.data(), &mut gin);
    let mut gk = vec![T::zero(); params.kernel.len()];
    plan.kernel_grad(input.data(), grad_out.data(), &mut gk);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        kernel: Tensor::new(params.kernel.shape(), gk)?,
        bias: bias_grad(grad_out.data(), plan.c_out, plan.out_vol()),
    })
}

/// Plan of the convolution whose adjoint is the requested transposed convolution.
fn deconv_plan<T: Real>(input: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Corr> {
    let in_sp = spatial(input, "deconv3d input")?;
    let ([c_in, c_out], k) = kernel_dims(p)?;
    if input.shape()[0] != c_in {
        return Err(Error::shape(
            "deconv3d input channels vs kernel",
            &[c_in],
            &input.shape()[..1],
        ));
    }
    p.bias.expect_shape("deconv3d bias", &[c_out])?;
    let mut out_sp = [0; 3];
    for a in 0..3 {
        out_sp[a] = deconv_output_len(in_sp[a], k[a], p.stride[a], p.padding[a]).ok_or_else(|| {
            Error::shape(format!("deconv3d axis {a}: empty output"), &k, &in_sp)
        })?;
    }
    Ok(Corr {
        c_in: c_out,
        c_out: c_in,
        in_sp: out_sp,
        out_sp: in_sp,
        k,
        stride: p.stride,
        pad: p.padding,
    })
}

/// Transposed 3D convolution: the adjoint of [`conv3d`] with the same kernel, plus bias.
/// Output size per axis is `(in - 1) * stride + k - 2 * pad`.
pub fn deconv3d<T: Real>(input: &Tensor<T>, params: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let plan = deconv_plan(input, params)?;
    let mut out = vec![T::zero(); plan.c_in * plan.in_vol()];
    plan.scatter(input.data(), params.kernel.data(), &mut out);
    add_bias(&mut out, params.bias.data(), plan.in_vol());
    let [d, h, w] = plan.in_sp;
    Tensor::new(&[plan.c_in, d, h, w], out)
}

pub fn deconv3d_backward<T: Real>(
    input: &Tensor<T>,
    params: &Conv3dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = deconv_plan(input, params)?;
    let [d, h, w] = plan.in_sp;
    grad_out.expect_shape("deconv3d upstream gradient", &[plan.c_in, d, h, w])?;
    let mut gin = vec![T::zero(); input.len()];
    plan.gather(grad_out.data(), params.kernel.data(), &mut gin);
    let mut gk = vec![T::zero(); params.kernel.len()];
    plan.kernel_grad(grad_out.data(), input.data(), &mut gk);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        kernel: Tensor::new(params.kernel.shape(), gk)?,
        bias: bias_grad(grad_out.data(), plan.c_in, plan.in_vol()),
    })
}
