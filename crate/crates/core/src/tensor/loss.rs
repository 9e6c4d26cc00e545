//! Masked reconstruction losses over row-major `N × d` buffers.
//!
//! Only dimensions with `mask == true` enter either loss, and rows whose mask
//! is empty are left out of the node count `N`.

use super::Scalar;
use crate::error::{Error, Result};

fn masked_rows(mask: &[bool], d: usize) -> impl Iterator<Item = (usize, &[bool])> {
    mask.chunks_exact(d.max(1))
        .enumerate()
        .filter(|(_, m)| m.iter().any(|&b| b))
}

fn counted_nodes(mask: &[bool], d: usize) -> Result<usize> {
    let n = masked_rows(mask, d).count();
    if n == 0 {
        return Err(Error::invalid("no masked dimensions"));
    }
    Ok(n)
}

fn check(op: &'static str, pred: usize, target: usize, mask: usize) -> Result<()> {
    if pred != target || pred != mask {
        return Err(Error::shape(
            op,
            format!("prediction {pred}, target {target}, mask {mask} elements"),
        ));
    }
    Ok(())
}

/// Mean over nodes of `(1 − cos(x̂ᴹ, xᴹ; ε))^γ` with the ε-guarded cosine
/// `x̂·x / (‖x̂‖‖x‖ + ε)`. Returns the loss and, if asked, ∂loss/∂x̂.
pub fn scaled_cosine<T: Scalar>(
    pred: &[T],
    target: &[T],
    mask: &[bool],
    d: usize,
    gamma: f64,
    eps: f64,
    with_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    check("scaled_cosine", pred.len(), target.len(), mask.len())?;
    let n = counted_nodes(mask, d)?;
    let (gamma_t, eps_t) = (T::lit(gamma), T::lit(eps));
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = with_grad.then(|| vec![T::zero(); pred.len()]);
    for (i, m) in masked_rows(mask, d) {
        let p = &pred[i * d..(i + 1) * d];
        let x = &target[i * d..(i + 1) * d];
        let (mut dot, mut pp, mut xx) = (T::zero(), T::zero(), T::zero());
        for j in (0..d).filter(|&j| m[j]) {
            dot += p[j] * x[j];
            pp += p[j] * p[j];
            xx += x[j] * x[j];
        }
        let (np, nx) = (pp.sqrt(), xx.sqrt());
        let denom = np * nx + eps_t;
        let cos = dot / denom;
        let one_minus = T::one() - cos;
        total += one_minus.powf(gamma_t);
        if let Some(g) = grad.as_mut() {
            // dℓ/dcos = −γ (1 − cos)^(γ−1)
            let dl_dcos = -gamma_t * one_minus.powf(gamma_t - T::one()) * inv_n;
            let row = &mut g[i * d..(i + 1) * d];
            for j in (0..d).filter(|&j| m[j]) {
                let mut dcos = x[j] / denom;
                if np > T::zero() {
                    dcos -= dot * nx * (p[j] / np) / (denom * denom);
                }
                row[j] = dl_dcos * dcos;
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean over nodes of `‖x̂ᴹ − xᴹ‖²`. Returns the loss and, if asked, ∂loss/∂x̂.
pub fn masked_mse<T: Scalar>(
    pred: &[T],
    target: &[T],
    mask: &[bool],
    d: usize,
    with_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    check("masked_mse", pred.len(), target.len(), mask.len())?;
    let n = counted_nodes(mask, d)?;
    let inv_n = T::one() / T::lit(n as f64);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut grad = with_grad.then(|| vec![T::zero(); pred.len()]);
    for (i, m) in masked_rows(mask, d) {
        for j in (0..d).filter(|&j| m[j]) {
            let k = i * d + j;
            let diff = pred[k] - target[k];
            total += diff * diff;
            if let Some(g) = grad.as_mut() {
                g[k] = two * diff * inv_n;
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean over nodes of `‖x̂ᴹ − xᴹ‖² / |ᴹ|`: squared error per masked dimension.
pub fn masked_mse_per_dim<T: Scalar>(
    pred: &[T],
    target: &[T],
    mask: &[bool],
    d: usize,
) -> Result<f64> {
    check("masked_mse_per_dim", pred.len(), target.len(), mask.len())?;
    let n = counted_nodes(mask, d)?;
    let mut total = 0.0;
    for (i, m) in masked_rows(mask, d) {
        let (mut sse, mut count) = (0.0, 0usize);
        for j in (0..d).filter(|&j| m[j]) {
            let diff = pred[i * d + j].as_f64() - target[i * d + j].as_f64();
            sse += diff * diff;
            count += 1;
        }
        total += sse / count as f64;
    }
    Ok(total / n as f64)
}
