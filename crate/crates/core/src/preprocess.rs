//! Reversible instance normalization, patching and patch embedding.

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub const REVIN_EPS: f64 = 1e-5;

/// Multivariate series: `values` is `N x T`, one row per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub channel_names: Vec<String>,
    /// Row-major `N x T`; `true` marks an observed point.
    pub missing_mask: Option<Vec<bool>>,
}

impl SeriesBatch {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Data(format!(
                "series must be a non-empty N x T matrix, got {:?}",
                values.shape()
            )));
        }
        if channel_names.len() != values.rows() {
            return Err(Error::Data(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.rows()
            )));
        }
        Ok(Self {
            values,
            channel_names,
            missing_mask: None,
        })
    }

    /// Channels named `c0, c1, ...`.
    pub fn unnamed(values: Tensor) -> Result<Self> {
        let names = (0..values.rows()).map(|i| format!("c{i}")).collect();
        Self::new(values, names)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(shape_err(format!(
                "mask of {} entries for {:?} series",
                mask.len(),
                self.values.shape()
            )));
        }
        self.missing_mask = Some(mask);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed(&self, c: usize, t: usize) -> bool {
        self.missing_mask
            .as_ref()
            .is_none_or(|m| m[c * self.len() + t])
    }

    /// Columns `start..end` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Data(format!(
                "slice {start}..{end} of series with {} steps",
                self.len()
            )));
        }
        let n = self.channels();
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        let mut mask = self.missing_mask.as_ref().map(|_| Vec::with_capacity(n * w));
        for c in 0..n {
            data.extend_from_slice(&self.values.row(c)[start..end]);
            if let (Some(out), Some(m)) = (mask.as_mut(), self.missing_mask.as_ref()) {
                out.extend_from_slice(&m[c * self.len() + start..c * self.len() + end]);
            }
        }
        Ok(Self {
            values: Tensor::matrix(n, w, data),
            channel_names: self.channel_names.clone(),
            missing_mask: mask,
        })
    }
}

/// Per-channel statistics of one normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
    pub affine_gamma: Vec<f64>,
    pub affine_beta: Vec<f64>,
}

/// Per-channel mean and population standard deviation over observed points.
pub fn channel_stats(x: &SeriesBatch) -> (Vec<f64>, Vec<f64>) {
    let (n, t) = (x.channels(), x.len());
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for c in 0..n {
        let obs: Vec<f64> = (0..t).filter(|&j| x.observed(c, j)).map(|j| x.values.get(c, j)).collect();
        if obs.is_empty() {
            continue;
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        let v = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
        mean[c] = m;
        std[c] = v.sqrt();
    }
    (mean, std)
}

/// Standardizes each channel over the window, then applies unit affine.
pub fn revin_normalize(x: &SeriesBatch, eps: f64) -> (SeriesBatch, NormStats) {
    let n = x.channels();
    revin_normalize_affine(x, eps, &vec![1.0; n], &vec![0.0; n]).expect("unit affine matches")
}

/// `((x - mean) / (std + eps)) * gamma + beta` per channel. Statistics use
/// observed points only when a mask is present.
pub fn revin_normalize_affine(x: &SeriesBatch, eps: f64, gamma: &[f64], beta: &[f64]) -> Result<(SeriesBatch, NormStats)> {
    let n = x.channels();
    if gamma.len() != n || beta.len() != n {
        return Err(shape_err(format!("affine of {} / {} for {n} channels", gamma.len(), beta.len())));
    }
    let (mean, std) = channel_stats(x);
    let mut out = x.values.clone();
    for c in 0..n {
        let denom = std[c] + eps;
        for v in out.row_mut(c) {
            *v = (*v - mean[c]) / denom * gamma[c] + beta[c];
        }
    }
    let stats = NormStats {
        mean,
        std,
        eps,
        affine_gamma: gamma.to_vec(),
        affine_beta: beta.to_vec(),
    };
    let batch = SeriesBatch {
        values: out,
        channel_names: x.channel_names.clone(),
        missing_mask: x.missing_mask.clone(),
    };
    Ok((batch, stats))
}

/// Exact inverse: `((y - beta) / gamma) * (std + eps) + mean`.
pub fn revin_denormalize(y: &SeriesBatch, stats: &NormStats) -> Result<SeriesBatch> {
    let n = y.channels();
    if stats.mean.len() != n {
        return Err(shape_err(format!(
            "stats for {} channels applied to {n}",
            stats.mean.len()
        )));
    }
    let mut out = y.values.clone();
    for c in 0..n {
        let scale = stats.std[c] + stats.eps;
        for v in out.row_mut(c) {
            *v = (*v - stats.affine_beta[c]) / stats.affine_gamma[c] * scale + stats.mean[c];
        }
    }
    Ok(SeriesBatch {
        values: out,
        channel_names: y.channel_names.clone(),
        missing_mask: y.missing_mask.clone(),
    })
}

/// Geometry of patching a length-`len` series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub n: usize,
    pub pad_len: usize,
}

impl PatchLayout {
    pub fn new(len: usize, patch_len: usize, stride: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 || stride > patch_len || len == 0 {
            return Err(Error::Config(format!(
                "patching needs 1 <= stride <= p and T >= 1 (T={len}, p={patch_len}, stride={stride})"
            )));
        }
        let excess = len.saturating_sub(patch_len);
        let steps = excess.div_ceil(stride);
        let padded = patch_len + steps * stride;
        Ok(Self {
            len,
            patch_len,
            stride,
            n: steps + 1,
            pad_len: padded - len,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.len + self.pad_len
    }

    /// Source time index of element `j` of patch `q`; padding replicates the
    /// final observation.
    pub fn source(&self, q: usize, j: usize) -> usize {
        (q * self.stride + j).min(self.len - 1)
    }

    /// Flat indices into an `N x T` matrix producing the `(N*n) x p` patch
    /// matrix, channel-major.
    pub fn gather_indices(&self, channels: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(channels * self.n * self.patch_len);
        for c in 0..channels {
            for q in 0..self.n {
                for j in 0..self.patch_len {
                    idx.push(c * self.len + self.source(q, j));
                }
            }
        }
        idx
    }
}

/// Patches of every channel: `patches` has shape `N x n x p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    pub patches: Tensor,
    pub patch_len: usize,
    pub stride: usize,
    pub n: usize,
    pub pad_len: usize,
}

pub fn patchify(x: &SeriesBatch, p: usize, stride: usize) -> Result<PatchTensor> {
    let layout = PatchLayout::new(x.len(), p, stride)?;
    let src = x.values.data();
    let data = layout.gather_indices(x.channels()).into_iter().map(|i| src[i]).collect();
    Ok(PatchTensor {
        patches: Tensor::new(vec![x.channels(), layout.n, p], data)?,
        patch_len: p,
        stride,
        n: layout.n,
        pad_len: layout.pad_len,
    })
}

/// Embedded tokens, shape `N x n x d`. Flattened row `c * n + q` holds
/// channel `c`, patch position `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    pub tokens: Tensor,
}

impl TokenTensor {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 3 {
            return Err(shape_err(format!("tokens must be N x n x d, got {:?}", tokens.shape())));
        }
        Ok(Self { tokens })
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn flat_index(&self, channel: usize, patch: usize) -> usize {
        channel * self.patches() + patch
    }

    /// `(N*n) x d` view.
    pub fn flatten(&self) -> Tensor {
        let rows = self.channels() * self.patches();
        self.tokens.clone().reshape(&[rows, self.width()]).expect("token flatten")
    }

    pub fn unflatten(flat: Tensor, channels: usize, patches: usize) -> Result<Self> {
        let d = flat.cols();
        if flat.rows() != channels * patches {
            return Err(shape_err(format!(
                "{} rows cannot hold {channels} x {patches} tokens",
                flat.rows()
            )));
        }
        Self::new(flat.reshape(&[channels, patches, d])?)
    }

    pub fn token(&self, channel: usize, patch: usize) -> &[f64] {
        let d = self.width();
        let i = self.flat_index(channel, patch);
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// `tokens[c][q] = patch[c][q] * weights + bias + pos[q]`.
pub fn embed(xp: &PatchTensor, weights: &Tensor, bias: &[f64], pos: &Tensor) -> Result<TokenTensor> {
    let (n_ch, n, p) = (xp.patches.shape()[0], xp.n, xp.patch_len);
    let d = weights.cols();
    if weights.rows() != p || bias.len() != d || pos.rows() != n || pos.cols() != d {
        return Err(shape_err(format!(
            "embed: patches {:?}, weights {:?}, bias {}, pos {:?}",
            xp.patches.shape(),
            weights.shape(),
            bias.len(),
            pos.shape()
        )));
    }
    let flat = xp.patches.clone().reshape(&[n_ch * n, p])?;
    let mut out = flat.matmul(weights)?;
    for r in 0..n_ch * n {
        let q = r % n;
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += bias[j] + pos.get(q, j);
        }
    }
    TokenTensor::new(out.reshape(&[n_ch, n, d])?)
}
