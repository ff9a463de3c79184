//! The channel-wise non-local operator and its three-level cascade.
//!
//! One gather computes, for a center feature and K neighbor features,
//!
//!   H[j] = W_theta^T (center - neighbor_j)      pairwise embedding
//!   A    = channel_softmax(H)                   per-channel weights over j
//!   G[j] = W_phi^T neighbor_j                   unary embedding
//!   out  = sum_j A[j] * G[j]                    Hadamard product, ascending j
//!
//! The cascade applies this at the k-NN neighborhood of each centroid, at
//! sampled peer centroids inside the centroid's superpoint, and at max-pooled
//! summaries of all superpoints, then fuses [x; y; z] through an affine map
//! and rectifier. Disabled levels pass features through unchanged so output
//! shapes never depend on the ablation.
//!
//! Every gather bumps the pair-interaction counter by its neighbor count;
//! a full cascade over M centroids performs exactly M*(K + K_sp + N_sp)
//! interactions, against N^2 for the all-pairs baseline.

mod backward;
mod baseline;

pub use backward::{cascaded_backward, gather_backward, CascadeGrads, LevelWeightGrads};
pub use baseline::{baseline_full_nonlocal, baseline_scalar_nonlocal, scalar_attention, BaselineEmbeddings};

use crate::error::{Error, Result};
use crate::geom::{CentroidSet, NeighborTable};
use crate::mat::Mat;
use crate::stats;

/// The (W_theta, W_phi) pair of one non-local level, both C x D.
#[derive(Debug, Clone)]
pub struct LevelWeights {
    pub w_theta: Mat,
    pub w_phi: Mat,
}

impl LevelWeights {
    pub fn new(w_theta: Mat, w_phi: Mat) -> Result<Self> {
        if w_theta.rows() != w_phi.rows() || w_theta.cols() != w_phi.cols() {
            return Err(Error::invalid("level weights must share dimensions"));
        }
        Ok(LevelWeights { w_theta, w_phi })
    }

    pub fn in_dim(&self) -> usize {
        self.w_theta.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_theta.cols()
    }
}

/// Learnable weights of one cascaded module: three level pairs plus the
/// fusion map. `w_gamma` is (3 D) x D_plus, applied after concatenating the
/// three level outputs in x, y, z order.
#[derive(Debug, Clone)]
pub struct CascadeParams {
    pub level1: LevelWeights,
    pub level2: LevelWeights,
    pub level3: LevelWeights,
    pub w_gamma: Mat,
    pub b_gamma: Vec<f64>,
}

impl CascadeParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.level1.out_dim();
        if self.level2.in_dim() != d || self.level3.in_dim() != d {
            return Err(Error::invalid("level 2/3 input dim must equal level 1 output dim"));
        }
        if self.level2.out_dim() != d || self.level3.out_dim() != d {
            return Err(Error::invalid("all levels must share output dim"));
        }
        if self.w_gamma.rows() != 3 * d {
            return Err(Error::invalid("w_gamma row count must equal 3*D"));
        }
        if self.b_gamma.len() != self.w_gamma.cols() {
            return Err(Error::invalid("b_gamma length must equal w_gamma column count"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.level1.out_dim()
    }

    pub fn d_plus(&self) -> usize {
        self.w_gamma.cols()
    }
}

/// Which cascade levels run. The neighborhood level is always on; the
/// superpoint and global levels are the ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Levels {
    pub superpoint: bool,
    pub global: bool,
}

impl Levels {
    pub const ONE: Levels = Levels { superpoint: false, global: false };
    pub const ONE_TWO: Levels = Levels { superpoint: true, global: false };
    pub const ALL: Levels = Levels { superpoint: true, global: true };

    pub fn parse(s: &str) -> Result<Levels> {
        match s {
            "1" => Ok(Levels::ONE),
            "12" => Ok(Levels::ONE_TWO),
            "123" => Ok(Levels::ALL),
            other => Err(Error::Config(format!("levels must be 1, 12 or 123, got {other:?}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.superpoint, self.global) {
            (false, false) => "1",
            (true, false) => "12",
            (true, true) => "123",
            (false, true) => "13",
        }
    }
}

/// Per-centroid features of every cascade level plus the pooled superpoint
/// features. With a level disabled its slot repeats the previous level.
#[derive(Debug)]
pub struct LevelFeatures {
    pub x: Mat,
    pub y: Mat,
    pub z: Mat,
    pub v: Mat,
    pub fused: Mat,
}

/// Forward record of one gather, sufficient for exact backward.
#[derive(Debug)]
pub struct GatherTape {
    pub center: Vec<f64>,
    pub neighbors: Mat,
    pub h: Mat,
    pub a: Mat,
    pub g: Mat,
}

/// Forward record of one max-pool: which superpoint each V row came from and
/// which centroid won each channel.
#[derive(Debug)]
pub struct PoolTape {
    /// Superpoint id per V row (dense re-indexing map, ascending).
    pub sp_ids: Vec<usize>,
    /// argmax[row][d] = centroid index whose Y value won channel d.
    pub argmax: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct FuseTape {
    pub concat: Mat,
    pub pre: Mat,
}

/// Everything cascaded_backward needs: gather tapes per level, routing
/// tables, and the fusion record. Indices are into the stage's point set.
#[derive(Debug)]
pub struct CascadeTape {
    pub centroid_indices: Vec<usize>,
    pub neighbor_rows: Vec<Vec<usize>>,
    pub use_relpos: bool,
    pub in_dim: usize,
    pub n_points: usize,
    pub levels: Levels,
    pub level1: Vec<GatherTape>,
    /// Sorted sample rows actually gathered; empty row = identity pass-through.
    pub sample_rows: Vec<Vec<usize>>,
    pub level2: Vec<Option<GatherTape>>,
    pub pool: Option<PoolTape>,
    pub level3: Vec<GatherTape>,
    pub fuse: FuseTape,
}

/// W_theta^T (f_i - f_j): the channel-wise pairwise embedding.
pub fn pairwise_embed(f_i: &[f64], f_j: &[f64], w_theta: &Mat) -> Result<Vec<f64>> {
    if f_i.len() != f_j.len() || f_i.len() != w_theta.rows() {
        return Err(Error::invalid(format!(
            "pairwise_embed: dims {} / {} vs weight rows {}",
            f_i.len(),
            f_j.len(),
            w_theta.rows()
        )));
    }
    let diff: Vec<f64> = f_i.iter().zip(f_j).map(|(a, b)| a - b).collect();
    Ok(w_theta.matvec_t(&diff))
}

/// W_phi^T f_j: the unary embedding.
pub fn unary_embed(f_j: &[f64], w_phi: &Mat) -> Result<Vec<f64>> {
    if f_j.len() != w_phi.rows() {
        return Err(Error::invalid(format!(
            "unary_embed: dim {} vs weight rows {}",
            f_j.len(),
            w_phi.rows()
        )));
    }
    Ok(w_phi.matvec_t(f_j))
}

/// Column-wise softmax with max subtraction; every column sums to 1.
pub fn channel_softmax(h: &Mat) -> Mat {
    let (k, d) = (h.rows(), h.cols());
    let mut out = Mat::zeros(k, d);
    for c in 0..d {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            max = max.max(h.at(j, c));
        }
        let mut denom = 0.0;
        for j in 0..k {
            let e = (h.at(j, c) - max).exp();
            out.set(j, c, e);
            denom += e;
        }
        let inv = 1.0 / denom;
        for j in 0..k {
            out.set(j, c, out.at(j, c) * inv);
        }
    }
    out
}

/// One non-local gather; see the module docs for the formula. Counts one
/// pair interaction per neighbor. With `record` set, returns the tape needed
/// for backward.
pub fn nonlocal_gather(
    center: &[f64],
    neighbors: &Mat,
    weights: &LevelWeights,
    record: bool,
) -> Result<(Vec<f64>, Option<GatherTape>)> {
    let k = neighbors.rows();
    if k == 0 {
        return Err(Error::degenerate("nonlocal_gather: zero neighbors"));
    }
    if center.len() != weights.in_dim() || neighbors.cols() != weights.in_dim() {
        return Err(Error::invalid(format!(
            "nonlocal_gather: center dim {} / neighbor dim {} vs weight rows {}",
            center.len(),
            neighbors.cols(),
            weights.in_dim()
        )));
    }
    let d = weights.out_dim();
    stats::count_interactions(k as u64);

    let mut h = Mat::zeros(k, d);
    let mut g = Mat::zeros(k, d);
    for j in 0..k {
        let row = neighbors.row(j);
        h.row_mut(j).copy_from_slice(&pairwise_embed(center, row, &weights.w_theta)?);
        g.row_mut(j).copy_from_slice(&unary_embed(row, &weights.w_phi)?);
    }
    let a = channel_softmax(&h);
    let mut out = vec![0.0; d];
    for j in 0..k {
        let (aj, gj) = (a.row(j), g.row(j));
        for c in 0..d {
            out[c] += aj[c] * gj[c];
        }
    }
    let tape = record.then(|| GatherTape {
        center: center.to_vec(),
        neighbors: neighbors.clone(),
        h,
        a,
        g,
    });
    Ok((out, tape))
}

fn augmented(features: &Mat, idx: usize, rel: Option<[f64; 3]>) -> Vec<f64> {
    let base = features.row(idx);
    match rel {
        None => base.to_vec(),
        Some(r) => {
            let mut v = Vec::with_capacity(base.len() + 3);
            v.extend_from_slice(base);
            v.extend_from_slice(&r);
            v
        }
    }
}

/// Neighborhood-level non-local features: one gather per centroid over its
/// k-NN row. With `use_relpos`, each neighbor is augmented with its offset
/// from the centroid and the center with a zero 3-vector.
pub fn neighborhood_level(
    features: &Mat,
    positions: &[[f64; 3]],
    centroids: &CentroidSet,
    table: &NeighborTable,
    weights: &LevelWeights,
    use_relpos: bool,
    record: bool,
) -> Result<(Mat, Option<Vec<GatherTape>>)> {
    let m = centroids.len();
    if table.indices.len() != m {
        return Err(Error::invalid("neighborhood_level: table rows != centroid count"));
    }
    let d = weights.out_dim();
    let mut x = Mat::zeros(m, d);
    let mut tapes = record.then(Vec::new);
    for i in 0..m {
        let ci = centroids.indices[i];
        let pi = centroids.positions[i];
        let center = augmented(features, ci, use_relpos.then_some([0.0; 3]));
        let row = &table.indices[i];
        let mut neighbors = Mat::zeros(row.len(), center.len());
        for (jj, &j) in row.iter().enumerate() {
            let rel = use_relpos.then(|| {
                let p = positions[j];
                [p[0] - pi[0], p[1] - pi[1], p[2] - pi[2]]
            });
            neighbors.row_mut(jj).copy_from_slice(&augmented(features, j, rel));
        }
        let (out, tape) = nonlocal_gather(&center, &neighbors, weights, record)?;
        x.row_mut(i).copy_from_slice(&out);
        if let (Some(ts), Some(t)) = (tapes.as_mut(), tape) {
            ts.push(t);
        }
    }
    Ok((x, tapes))
}

/// Superpoint-level non-local features: each centroid gathers over the
/// sampled peers of its own superpoint. Sample rows are re-sorted ascending
/// before the reduction so row order never changes the result; an empty row
/// passes the input through unchanged.
///
/// Returns the sorted rows actually used alongside the features and tapes.
pub fn superpoint_level(
    x: &Mat,
    sp_samples: &[Vec<usize>],
    weights: &LevelWeights,
    record: bool,
) -> Result<(Mat, Vec<Vec<usize>>, Option<Vec<Option<GatherTape>>>)> {
    let m = x.rows();
    if sp_samples.len() != m {
        return Err(Error::invalid("superpoint_level: sample rows != centroid count"));
    }
    let d = weights.out_dim();
    let mut y = Mat::zeros(m, d);
    let mut rows_used = Vec::with_capacity(m);
    let mut tapes = record.then(Vec::new);
    for i in 0..m {
        let mut row = sp_samples[i].clone();
        row.sort_unstable();
        if row.is_empty() {
            // Degenerate superpoint: identity pass-through.
            if x.cols() != d {
                return Err(Error::invalid(
                    "superpoint_level: pass-through needs matching input/output dims",
                ));
            }
            y.row_mut(i).copy_from_slice(x.row(i));
            rows_used.push(row);
            if let Some(ts) = tapes.as_mut() {
                ts.push(None);
            }
            continue;
        }
        let neighbors = x.gather_rows(&row);
        let (out, tape) = nonlocal_gather(x.row(i), &neighbors, weights, record)?;
        y.row_mut(i).copy_from_slice(&out);
        rows_used.push(row);
        if let Some(ts) = tapes.as_mut() {
            ts.push(tape);
        }
    }
    Ok((y, rows_used, tapes))
}

/// Pooled superpoint features and the pool tape.
pub struct SuperpointPool {
    pub v: Mat,
    pub tape: PoolTape,
}

/// Channel-wise max over the centroids of each superpoint. Superpoints with
/// no centroids are dropped; `tape.sp_ids` is the dense re-indexing map.
/// Ties go to the smallest centroid index.
pub fn superpoint_maxpool(y: &Mat, sp_of_centroid: &[usize], n_sp: usize) -> Result<SuperpointPool> {
    let m = y.rows();
    if sp_of_centroid.len() != m {
        return Err(Error::invalid("superpoint_maxpool: id count != centroid count"));
    }
    let d = y.cols();
    let mut occupied: Vec<Vec<usize>> = vec![Vec::new(); n_sp];
    for (i, &s) in sp_of_centroid.iter().enumerate() {
        if s >= n_sp {
            return Err(Error::invalid(format!("superpoint id {s} out of range")));
        }
        occupied[s].push(i);
    }
    let sp_ids: Vec<usize> = (0..n_sp).filter(|&s| !occupied[s].is_empty()).collect();
    if sp_ids.is_empty() {
        return Err(Error::degenerate("superpoint_maxpool: no superpoint holds a centroid"));
    }
    let mut v = Mat::zeros(sp_ids.len(), d);
    let mut argmax = Vec::with_capacity(sp_ids.len());
    for (row, &s) in sp_ids.iter().enumerate() {
        let mut best_idx = vec![occupied[s][0]; d];
        let mut best = y.row(occupied[s][0]).to_vec();
        for &i in occupied[s].iter().skip(1) {
            let yr = y.row(i);
            for c in 0..d {
                if yr[c] > best[c] {
                    best[c] = yr[c];
                    best_idx[c] = i;
                }
            }
        }
        v.row_mut(row).copy_from_slice(&best);
        argmax.push(best_idx);
    }
    Ok(SuperpointPool { v, tape: PoolTape { sp_ids, argmax } })
}

/// Global-level non-local features: every centroid gathers over all pooled
/// superpoint rows, its own included.
pub fn global_level(
    y: &Mat,
    v: &Mat,
    weights: &LevelWeights,
    record: bool,
) -> Result<(Mat, Option<Vec<GatherTape>>)> {
    if v.rows() == 0 {
        return Err(Error::degenerate("global_level: no superpoint features"));
    }
    let m = y.rows();
    let d = weights.out_dim();
    let mut z = Mat::zeros(m, d);
    let mut tapes = record.then(Vec::new);
    for i in 0..m {
        let (out, tape) = nonlocal_gather(y.row(i), v, weights, record)?;
        z.row_mut(i).copy_from_slice(&out);
        if let (Some(ts), Some(t)) = (tapes.as_mut(), tape) {
            ts.push(t);
        }
    }
    Ok((z, tapes))
}

/// relu(W_gamma^T [x_i; y_i; z_i] + b_gamma) per centroid.
pub fn fuse(
    x: &Mat,
    y: &Mat,
    z: &Mat,
    w_gamma: &Mat,
    b_gamma: &[f64],
) -> Result<(Mat, FuseTape)> {
    let (m, d) = (x.rows(), x.cols());
    if y.rows() != m || z.rows() != m || y.cols() != d || z.cols() != d {
        return Err(Error::invalid("fuse: x/y/z shapes disagree"));
    }
    if w_gamma.rows() != 3 * d || b_gamma.len() != w_gamma.cols() {
        return Err(Error::invalid("fuse: w_gamma/b_gamma shapes disagree"));
    }
    let dp = w_gamma.cols();
    let mut concat = Mat::zeros(m, 3 * d);
    for i in 0..m {
        let row = concat.row_mut(i);
        row[..d].copy_from_slice(x.row(i));
        row[d..2 * d].copy_from_slice(y.row(i));
        row[2 * d..].copy_from_slice(z.row(i));
    }
    let mut pre = Mat::zeros(m, dp);
    let mut out = Mat::zeros(m, dp);
    for i in 0..m {
        let mut p = w_gamma.matvec_t(concat.row(i));
        for (pc, b) in p.iter_mut().zip(b_gamma) {
            *pc += b;
        }
        out.row_mut(i).copy_from_slice(&p.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>());
        pre.row_mut(i).copy_from_slice(&p);
    }
    Ok((out, FuseTape { concat, pre }))
}

/// Stage inputs of one cascaded module. Indices refer to this stage's point
/// set (`features` rows / `positions` entries).
pub struct CascadeInputs<'a> {
    pub features: &'a Mat,
    pub positions: &'a [[f64; 3]],
    pub centroids: &'a CentroidSet,
    pub neighbors: &'a NeighborTable,
    pub sp_samples: &'a [Vec<usize>],
    pub sp_of_centroid: &'a [usize],
    pub n_sp: usize,
}

/// Run the enabled levels in order and fuse. With the superpoint level
/// disabled Y repeats X; with the global level disabled Z repeats Y; fusion
/// always consumes [X; Y; Z], so shapes are ablation-invariant.
pub fn cascaded_forward(
    inp: &CascadeInputs,
    params: &CascadeParams,
    levels: Levels,
    use_relpos: bool,
    record: bool,
) -> Result<(LevelFeatures, Option<CascadeTape>)> {
    params.validate()?;
    let m = inp.centroids.len();
    if inp.sp_of_centroid.len() != m {
        return Err(Error::invalid("cascaded_forward: sp_of_centroid length != centroid count"));
    }

    let (x, l1_tapes) = neighborhood_level(
        inp.features,
        inp.positions,
        inp.centroids,
        inp.neighbors,
        &params.level1,
        use_relpos,
        record,
    )?;

    let (y, sample_rows, l2_tapes) = if levels.superpoint {
        superpoint_level(&x, inp.sp_samples, &params.level2, record)?
    } else {
        (x.clone(), vec![Vec::new(); m], record.then(|| (0..m).map(|_| None).collect()))
    };

    let (z, v, pool, l3_tapes) = if levels.global {
        let pool = superpoint_maxpool(&y, inp.sp_of_centroid, inp.n_sp)?;
        let (z, tapes) = global_level(&y, &pool.v, &params.level3, record)?;
        (z, pool.v, Some(pool.tape), tapes)
    } else {
        (y.clone(), Mat::zeros(0, params.d()), None, record.then(Vec::new))
    };

    let (fused, fuse_tape) = fuse(&x, &y, &z, &params.w_gamma, &params.b_gamma)?;

    let tape = if record {
        Some(CascadeTape {
            centroid_indices: inp.centroids.indices.clone(),
            neighbor_rows: inp.neighbors.indices.clone(),
            use_relpos,
            in_dim: inp.features.cols(),
            n_points: inp.features.rows(),
            levels,
            level1: l1_tapes.unwrap(),
            sample_rows,
            level2: l2_tapes.unwrap(),
            pool,
            level3: l3_tapes.unwrap(),
            fuse: fuse_tape,
        })
    } else {
        None
    };
    Ok((LevelFeatures { x, y, z, v, fused }, tape))
}

/// Analytic pair-interaction count of one cascaded module (the complexity
/// claim): M*(K + K_sp + N_sp). The instrumented counter must match it
/// exactly.
pub fn pair_interaction_count(m: u64, k: u64, k_sp: u64, n_sp: u64) -> u64 {
    m * (k + k_sp + n_sp)
}
