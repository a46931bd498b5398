//! Elementary kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};

/// Exp-normalize over `v`. Entries at `-inf` are excluded from the support
/// and map to exactly zero.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || v.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - max).exp()
        };
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow: `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standardizes `x` with `sqrt(var + eps)` then applies `gamma`, `beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (xhat, _) = standardize(x, eps);
    xhat.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&h, (&g, &b))| h * g + b)
        .collect()
}

/// Returns the standardized vector and `1 / sqrt(var + eps)`.
pub(crate) fn standardize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Indices of the `k` largest entries, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let mut sel = order[..k.min(v.len())].to_vec();
    sel.sort_unstable();
    sel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[f64::NEG_INFINITY, 0.0]).unwrap(), vec![0.0, 1.0]);
        let s = softmax(&[0.5, 0.3]).unwrap();
        assert!((s[0] - 0.5499).abs() < 1e-4 && (s[1] - 0.4501).abs() < 1e-4);
        assert!(matches!(
            softmax(&[f64::NEG_INFINITY; 3]),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let s = softmax(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        let tiny = softplus(-20.0);
        assert!(tiny > 0.0 && (tiny - 2.061_153_6e-9).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0).is_finite());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        assert!(layer_norm(&[3.0; 4], &ones, &zeros, 1e-5)
            .iter()
            .all(|&x| x == 0.0));
        let b = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(layer_norm(&[1.0, 5.0, -2.0, 0.0], &zeros, &b, 1e-5), b);
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-12 && (y[1] + expect).abs() < 1e-12);
        assert!(y[0] > 0.99999 && y[0] < 1.0);
    }

    #[test]
    fn layer_norm_moments() {
        let x = [0.3, -1.7, 2.2, 5.0, 0.0, -0.4];
        let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], 1e-12);
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.1], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.3, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0; 4], 2), vec![0, 1]);
    }
}
