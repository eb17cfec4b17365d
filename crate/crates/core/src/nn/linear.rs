use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearGrads<T = f64> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (&[n, c_in], &[c_out, w_in]) = (input.shape(), weight.shape()) else {
        return Err(Error::shape("linear expects [N, C_in] x [C_out, C_in]", &[0, 0], input.shape()));
    };
    if w_in != c_in {
        return Err(Error::shape("linear inner dimension", &[w_in], &[c_in]));
    }
    bias.expect_shape("linear bias", &[c_out])?;
    Ok((n, c_in, c_out))
}

/// `out[n, o] = bias[o] + sum_i input[n, i] * weight[o, i]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c_in, c_out) = check(input, weight, bias)?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * c_out);
    for row in x.chunks_exact(c_in) {
        for (o, wrow) in w.chunks_exact(c_in).enumerate() {
            out.push(b[o] + row.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<T>());
        }
    }
    Tensor::new(&[n, c_out], out)
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, c_in, c_out) = check(input, weight, bias)?;
    grad_out.expect_shape("linear upstream gradient", &[n, c_out])?;
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * c_in];
    let mut gw = vec![T::zero(); c_out * c_in];
    let mut gb = vec![T::zero(); c_out];
    for r in 0..n {
        let xr = &x[r * c_in..(r + 1) * c_in];
        let gxr = &mut gx[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let go = g[r * c_out + o];
            gb[o] = gb[o] + go;
            let wrow = &w[o * c_in..(o + 1) * c_in];
            let gwrow = &mut gw[o * c_in..(o + 1) * c_in];
            for i in 0..c_in {
                gxr[i] = gxr[i] + go * wrow[i];
                gwrow[i] = gwrow[i] + go * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, c_in], gx)?,
        weight: Tensor::new(&[c_out, c_in], gw)?,
        bias: Tensor::new(&[c_out], gb)?,
    })
}
