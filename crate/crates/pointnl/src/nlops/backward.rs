//! Exact reverse-mode gradients of the cascade.
//!
//! The softmax backward uses the per-channel Jacobian diag(a) - a a^T; the
//! max-pool backward routes each channel's gradient to the recorded argmax
//! centroid; pass-through levels forward gradients unchanged. All
//! accumulation runs in ascending centroid index so grads are deterministic.

use super::{CascadeParams, CascadeTape, GatherTape, LevelWeights};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Gradients for one level's weight pair.
#[derive(Debug)]
pub struct LevelWeightGrads {
    pub w_theta: Mat,
    pub w_phi: Mat,
}

impl LevelWeightGrads {
    fn zeros_like(w: &LevelWeights) -> Self {
        LevelWeightGrads {
            w_theta: Mat::zeros(w.w_theta.rows(), w.w_theta.cols()),
            w_phi: Mat::zeros(w.w_phi.rows(), w.w_phi.cols()),
        }
    }
}

/// Gradients for every weight of one cascaded module.
#[derive(Debug)]
pub struct CascadeGrads {
    pub level1: LevelWeightGrads,
    pub level2: LevelWeightGrads,
    pub level3: LevelWeightGrads,
    pub w_gamma: Mat,
    pub b_gamma: Vec<f64>,
}

impl CascadeGrads {
    pub fn zeros_like(params: &CascadeParams) -> Self {
        CascadeGrads {
            level1: LevelWeightGrads::zeros_like(&params.level1),
            level2: LevelWeightGrads::zeros_like(&params.level2),
            level3: LevelWeightGrads::zeros_like(&params.level3),
            w_gamma: Mat::zeros(params.w_gamma.rows(), params.w_gamma.cols()),
            b_gamma: vec![0.0; params.b_gamma.len()],
        }
    }
}

/// Backward of one gather. Accumulates weight gradients into the given
/// buffers and returns the center and neighbor feature gradients.
pub fn gather_backward(
    tape: &GatherTape,
    weights: &LevelWeights,
    d_out: &[f64],
    d_wtheta: &mut Mat,
    d_wphi: &mut Mat,
) -> (Vec<f64>, Mat) {
    let k = tape.neighbors.rows();
    let d = weights.out_dim();
    let c_dim = weights.in_dim();
    debug_assert_eq!(d_out.len(), d);

    let mut d_center = vec![0.0; c_dim];
    let mut d_neighbors = Mat::zeros(k, c_dim);

    // out = sum_j a_j * g_j  =>  dG = d_out * A, dA = d_out * G.
    let mut d_a = Mat::zeros(k, d);
    for j in 0..k {
        let (aj, gj) = (tape.a.row(j), tape.g.row(j));
        let mut d_g = vec![0.0; d];
        for c in 0..d {
            d_g[c] = d_out[c] * aj[c];
            d_a.set(j, c, d_out[c] * gj[c]);
        }
        // g_j = W_phi^T n_j
        d_wphi.add_outer(tape.neighbors.row(j), &d_g);
        let t = weights.w_phi.matvec(&d_g);
        let row = d_neighbors.row_mut(j);
        for (r, v) in row.iter_mut().zip(&t) {
            *r += v;
        }
    }

    // Per-channel softmax Jacobian: dH[:,c] = a .* (dA[:,c] - <a, dA[:,c]>).
    let mut d_h = Mat::zeros(k, d);
    for c in 0..d {
        let mut dot = 0.0;
        for j in 0..k {
            dot += tape.a.at(j, c) * d_a.at(j, c);
        }
        for j in 0..k {
            d_h.set(j, c, tape.a.at(j, c) * (d_a.at(j, c) - dot));
        }
    }

    // h_j = W_theta^T (center - n_j)
    let mut diff = vec![0.0; c_dim];
    for j in 0..k {
        let nj = tape.neighbors.row(j);
        for c in 0..c_dim {
            diff[c] = tape.center[c] - nj[c];
        }
        d_wtheta.add_outer(&diff, d_h.row(j));
        let t = weights.w_theta.matvec(d_h.row(j));
        let row = d_neighbors.row_mut(j);
        for c in 0..c_dim {
            d_center[c] += t[c];
            row[c] -= t[c];
        }
    }

    (d_center, d_neighbors)
}

/// Backward of one fused cascade module.
///
/// Returns gradients for every weight plus the gradient with respect to the
/// stage's input feature rows.
pub fn cascaded_backward(
    tape: &CascadeTape,
    params: &CascadeParams,
    grad_fused: &Mat,
) -> Result<(CascadeGrads, Mat)> {
    params.validate()?;
    let m = tape.level1.len();
    let d = params.d();
    let dp = params.d_plus();
    if grad_fused.rows() != m || grad_fused.cols() != dp {
        return Err(Error::invalid(format!(
            "cascaded_backward: grad_fused is {}x{}, expected {m}x{dp}",
            grad_fused.rows(),
            grad_fused.cols()
        )));
    }

    let mut grads = CascadeGrads::zeros_like(params);

    // Fusion: relu then affine.
    let mut d_x = Mat::zeros(m, d);
    let mut d_y = Mat::zeros(m, d);
    let mut d_z = Mat::zeros(m, d);
    for i in 0..m {
        let pre = tape.fuse.pre.row(i);
        let mut d_pre = vec![0.0; dp];
        for c in 0..dp {
            d_pre[c] = if pre[c] > 0.0 { grad_fused.at(i, c) } else { 0.0 };
        }
        grads.w_gamma.add_outer(tape.fuse.concat.row(i), &d_pre);
        for (b, g) in grads.b_gamma.iter_mut().zip(&d_pre) {
            *b += g;
        }
        let d_concat = params.w_gamma.matvec(&d_pre);
        d_x.row_mut(i).copy_from_slice(&d_concat[..d]);
        d_y.row_mut(i).copy_from_slice(&d_concat[d..2 * d]);
        d_z.row_mut(i).copy_from_slice(&d_concat[2 * d..]);
    }

    // Global level (or Z := Y pass-through).
    if tape.levels.global {
        let pool = tape
            .pool
            .as_ref()
            .ok_or_else(|| Error::invalid("cascaded_backward: tape missing pool record"))?;
        let n_rows = pool.sp_ids.len();
        let mut d_v = Mat::zeros(n_rows, d);
        for i in 0..m {
            let (d_center, d_neigh) = gather_backward(
                &tape.level3[i],
                &params.level3,
                d_z.row(i),
                &mut grads.level3.w_theta,
                &mut grads.level3.w_phi,
            );
            let row = d_y.row_mut(i);
            for (r, v) in row.iter_mut().zip(&d_center) {
                *r += v;
            }
            d_v.add_assign(&d_neigh);
        }
        // Max pool routes each channel's gradient to its argmax centroid.
        for r in 0..n_rows {
            for c in 0..d {
                let i = pool.argmax[r][c];
                d_y.set(i, c, d_y.at(i, c) + d_v.at(r, c));
            }
        }
    } else {
        d_y.add_assign(&d_z);
    }

    // Superpoint level (or Y := X pass-through).
    if tape.levels.superpoint {
        for i in 0..m {
            match &tape.level2[i] {
                Some(t) => {
                    let (d_center, d_neigh) = gather_backward(
                        t,
                        &params.level2,
                        d_y.row(i),
                        &mut grads.level2.w_theta,
                        &mut grads.level2.w_phi,
                    );
                    {
                        let row = d_x.row_mut(i);
                        for (r, v) in row.iter_mut().zip(&d_center) {
                            *r += v;
                        }
                    }
                    for (jj, &j) in tape.sample_rows[i].iter().enumerate() {
                        let src = d_neigh.row(jj);
                        let dst = d_x.row_mut(j);
                        for (r, v) in dst.iter_mut().zip(src) {
                            *r += v;
                        }
                    }
                }
                None => {
                    let src = d_y.row(i).to_vec();
                    let dst = d_x.row_mut(i);
                    for (r, v) in dst.iter_mut().zip(&src) {
                        *r += v;
                    }
                }
            }
        }
    } else {
        d_x.add_assign(&d_y);
    }

    // Neighborhood level down to the stage inputs. With relpos the last
    // three components belong to geometry and carry no feature gradient.
    let c_in = tape.in_dim;
    let mut d_input = Mat::zeros(tape.n_points, c_in);
    for i in 0..m {
        let (d_center, d_neigh) = gather_backward(
            &tape.level1[i],
            &params.level1,
            d_x.row(i),
            &mut grads.level1.w_theta,
            &mut grads.level1.w_phi,
        );
        let ci = tape.centroid_indices[i];
        {
            let dst = d_input.row_mut(ci);
            for c in 0..c_in {
                dst[c] += d_center[c];
            }
        }
        for (jj, &j) in tape.neighbor_rows[i].iter().enumerate() {
            let src = d_neigh.row(jj);
            let dst = d_input.row_mut(j);
            for c in 0..c_in {
                dst[c] += src[c];
            }
        }
    }

    Ok((grads, d_input))
}
