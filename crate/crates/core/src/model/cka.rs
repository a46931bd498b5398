use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn centered(x: &Tensor) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64;
        for i in 0..m {
            out.set(i, j, x.get(i, j) - mean);
        }
    }
    out
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA between `m x d_a` and `m x d_b` representations:
/// `|A^T B|_F^2 / (|A^T A|_F |B^T B|_F)` on column-centered features.
pub fn cka_linear(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = a.rows();
    if m < 2 || b.rows() != m {
        return Err(Error::Shape(format!(
            "CKA needs matching row counts >= 2, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let (ac, bc) = (centered(a), centered(b));
    // zero variance up to rounding of the centering
    let flat = |x: &Tensor, xc: &Tensor| frobenius_sq(xc) <= 1e-24 * (1.0 + frobenius_sq(x));
    if flat(a, &ac) || flat(b, &bc) {
        return Err(Error::DegenerateRepresentation);
    }
    let (act, bct) = (ac.transpose(), bc.transpose());
    let cross = frobenius_sq(&act.matmul(&bc)?);
    let aa = frobenius_sq(&act.matmul(&ac)?).sqrt();
    let bb = frobenius_sq(&bct.matmul(&bc)?).sqrt();
    Ok((cross / (aa * bb)).clamp(0.0, 1.0))
}

/// CKA for the (first, last) pair and every adjacent pair of layers,
/// keyed `"i-j"` with zero-based layer indices. A degenerate pair yields
/// its error without affecting the rest.
pub fn cka_pairs(reps: &[Tensor]) -> Vec<(String, Result<f64>)> {
    let l = reps.len();
    if l == 0 {
        return Vec::new();
    }
    let mut pairs = vec![(0, l - 1)];
    pairs.extend((0..l.saturating_sub(1)).map(|i| (i, i + 1)).filter(|&p| p != (0, l - 1)));
    pairs
        .into_iter()
        .map(|(i, j)| (format!("{i}-{j}"), cka_linear(&reps[i], &reps[j])))
        .collect()
}
