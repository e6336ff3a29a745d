use super::params::{ConvKernel, DiscreteSsm};
use crate::error::{Error, Result};
use crate::nn::dot;

/// Left-to-right recurrence from a zero initial state:
/// `h_k = A_bar h_{k-1} + B_bar x_k`, `y_k = C h_k + D x_k`.
pub fn scan_recurrent(d: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = d.state_dim();
    let mut h = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        d.a_bar.mul_vec(&h, &mut next);
        for (hn, b) in next.iter_mut().zip(&d.b_bar) {
            *hn += b * xk;
        }
        std::mem::swap(&mut h, &mut next);
        y.push(dot(&d.c, &h) + d.d * xk);
    }
    Ok(y)
}

/// Kernel of length `m` built by repeated multiplication with `A_bar`.
pub fn compute_kernel(d: &DiscreteSsm, m: usize) -> Result<ConvKernel> {
    if m == 0 {
        return Err(Error::EmptySequence);
    }
    let mut v = d.b_bar.clone();
    let mut next = vec![0.0; v.len()];
    let mut taps = Vec::with_capacity(m);
    for j in 0..m {
        taps.push(dot(&d.c, &v));
        if j + 1 < m {
            d.a_bar.mul_vec(&v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
    }
    Ok(ConvKernel { taps, skip: d.d })
}

/// Causal convolution `y_k = Σ_{j<=k} K[j] x_{k-j} + D x_k`.
pub fn apply_conv(kernel: &ConvKernel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != kernel.len() {
        return Err(Error::dims(format!(
            "sequence length {} vs kernel length {}",
            x.len(),
            kernel.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let y = (0..x.len())
        .map(|k| {
            let mut s = 0.0;
            for j in 0..=k {
                s += kernel.taps[j] * x[k - j];
            }
            s + kernel.skip * x[k]
        })
        .collect();
    Ok(y)
}

/// Directional derivative of `scan_recurrent(d, ·)` at `x` along `v`.
///
/// The fixed-parameter scan is linear, so its Jacobian is the lower
/// triangular Toeplitz matrix of the kernel plus `D I`, independent of `x`.
pub fn scan_input_jacobian(d: &DiscreteSsm, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    if v.len() != x.len() {
        return Err(Error::dims(format!("direction length {} vs input {}", v.len(), x.len())));
    }
    let kernel = compute_kernel(d, x.len())?;
    apply_conv(&kernel, v)
}
