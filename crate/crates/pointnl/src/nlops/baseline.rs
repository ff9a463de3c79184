//! Full-pairwise non-local baselines.
//!
//! `baseline_full_nonlocal` is the channel-wise operator summed over all N
//! points — N^2 pair interactions — and doubles as the equivalence oracle
//! for the cascade's neighborhood level. `baseline_scalar_nonlocal` is the
//! classic scalar-attention formulation y = softmax(theta phi^T) gamma.

use super::{channel_softmax, LevelWeights};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::stats;

/// Channel-wise non-local features over the whole cloud: row i gathers over
/// all N rows. The pairwise embedding is factored through per-point
/// projections (W^T(f_i - f_j) = theta_i - theta_j), which changes only the
/// floating-point association, not the math.
pub fn baseline_full_nonlocal(features: &Mat, weights: &LevelWeights) -> Result<Mat> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::degenerate("baseline_full_nonlocal: empty feature matrix"));
    }
    if features.cols() != weights.in_dim() {
        return Err(Error::invalid("baseline_full_nonlocal: feature dim != weight rows"));
    }
    let d = weights.out_dim();
    let theta = features.matmul(&weights.w_theta);
    let g = features.matmul(&weights.w_phi);
    let mut out = Mat::zeros(n, d);
    let mut h = Mat::zeros(n, d);
    for i in 0..n {
        stats::count_interactions(n as u64);
        let ti = theta.row(i).to_vec();
        for j in 0..n {
            let tj = theta.row(j);
            let hr = h.row_mut(j);
            for c in 0..d {
                hr[c] = ti[c] - tj[c];
            }
        }
        let a = channel_softmax(&h);
        let orow = out.row_mut(i);
        for j in 0..n {
            let (aj, gj) = (a.row(j), g.row(j));
            for c in 0..d {
                orow[c] += aj[c] * gj[c];
            }
        }
    }
    Ok(out)
}

/// The reshaped embeddings and row-stochastic attention of the scalar
/// baseline.
#[derive(Debug)]
pub struct BaselineEmbeddings {
    pub theta: Mat,
    pub phi: Mat,
    pub gamma: Mat,
    pub attention: Mat,
}

/// theta, phi, gamma projections plus row_softmax(theta phi^T).
pub fn scalar_attention(
    features: &Mat,
    w_theta: &Mat,
    w_phi: &Mat,
    w_gamma: &Mat,
) -> Result<BaselineEmbeddings> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::degenerate("scalar_attention: empty feature matrix"));
    }
    if features.cols() != w_theta.rows()
        || features.cols() != w_phi.rows()
        || features.cols() != w_gamma.rows()
    {
        return Err(Error::invalid("scalar_attention: feature dim != weight rows"));
    }
    if w_theta.cols() != w_phi.cols() {
        return Err(Error::invalid("scalar_attention: theta/phi output dims differ"));
    }
    let theta = features.matmul(w_theta);
    let phi = features.matmul(w_phi);
    let gamma = features.matmul(w_gamma);
    let cp = theta.cols();
    let mut attention = Mat::zeros(n, n);
    for i in 0..n {
        stats::count_interactions(n as u64);
        let ti = theta.row(i);
        // scores, then stabilized row softmax
        let row = attention.row_mut(i);
        for j in 0..n {
            let pj = phi.row(j);
            let mut s = 0.0;
            for c in 0..cp {
                s += ti[c] * pj[c];
            }
            row[j] = s;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        let inv = 1.0 / denom;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(BaselineEmbeddings { theta, phi, gamma, attention })
}

/// y = row_softmax(theta phi^T) gamma, the scalar full non-local baseline.
pub fn baseline_scalar_nonlocal(
    features: &Mat,
    w_theta: &Mat,
    w_phi: &Mat,
    w_gamma: &Mat,
) -> Result<Mat> {
    let emb = scalar_attention(features, w_theta, w_phi, w_gamma)?;
    Ok(emb.attention.matmul(&emb.gamma))
}
