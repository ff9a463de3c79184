//! Encoder and decoder forward passes.
//!
//! The encoder re-samples centroids stage by stage with FPS, builds k-NN
//! tables over the previous stage's points, inherits the superpoint
//! assignment computed once on the raw cloud, and runs one cascaded module
//! per stage. The decoder interpolates features back out with
//! inverse-square-distance weights over the three nearest coarse points,
//! concatenating the matching encoder stage's output at each step.

use super::{AffineParams, NetworkConfig, NetworkParams, SP_SAMPLE_SEED};
use crate::error::{Error, Result};
use crate::geom::{
    canonical_order, farthest_point_sample, knn, sample_superpoint_centroids, voxel_partition,
    PointCloud,
};
use crate::mat::Mat;
use crate::nlops::{cascaded_forward, CascadeInputs, CascadeTape};

/// One encoder stage's outputs.
pub struct EncoderStage {
    /// Centroid indices into the previous stage's point list.
    pub local_indices: Vec<usize>,
    /// Centroid indices into the (canonically ordered) input cloud.
    pub orig_indices: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    /// Fused features, stage_m x stage_dplus.
    pub fused: Mat,
}

/// Forward record of one interpolation + affine block.
pub struct FpTape {
    /// Up to three coarse indices per fine point.
    pub neighbor_idx: Vec<Vec<usize>>,
    /// Matching normalized interpolation weights.
    pub weights: Vec<Vec<f64>>,
    pub concat: Mat,
    pub pre: Mat,
    pub relu: bool,
}

/// Forward record of the whole network.
pub struct NetTape {
    /// Canonical permutation: slot k of the internal ordering held original
    /// point perm[k].
    pub perm: Vec<usize>,
    pub stage_tapes: Vec<CascadeTape>,
    pub fp_tapes: Vec<FpTape>,
    /// Classifier input (decoder output at every point).
    pub cls_input: Mat,
}

/// Run the four-stage encoder over a canonically ordered cloud.
pub fn encoder_forward(
    cloud: &PointCloud,
    config: &NetworkConfig,
    params: &NetworkParams,
    record: bool,
) -> Result<(Vec<EncoderStage>, Option<Vec<CascadeTape>>)> {
    config.validate()?;
    let n = cloud.len();
    if n < config.stage_m[0] {
        return Err(Error::invalid(format!(
            "encoder needs at least stage_m[0] = {} points, got {n}; block-split first",
            config.stage_m[0]
        )));
    }
    if config.stage_k[0] > n {
        return Err(Error::invalid("stage_k[0] exceeds the input point count"));
    }
    let partition = voxel_partition(&cloud.positions, config.cell_size, config.n_sp_cap)?;

    let mut stages: Vec<EncoderStage> = Vec::with_capacity(4);
    let mut tapes = record.then(Vec::new);
    for l in 0..4 {
        let (prev_positions, prev_features, prev_orig): (&[[f64; 3]], &Mat, Option<&[usize]>) =
            if l == 0 {
                (&cloud.positions, &cloud.features, None)
            } else {
                let prev = &stages[l - 1];
                (&prev.positions, &prev.fused, Some(&prev.orig_indices))
            };
        let centroids = farthest_point_sample(prev_positions, config.stage_m[l])?;
        let table = knn(prev_positions, &centroids, config.stage_k[l])?;
        let orig_indices: Vec<usize> = match prev_orig {
            None => centroids.indices.clone(),
            Some(po) => centroids.indices.iter().map(|&i| po[i]).collect(),
        };
        let sp_of_centroid: Vec<usize> =
            orig_indices.iter().map(|&i| partition.assignment[i]).collect();
        let sp_samples = sample_superpoint_centroids(
            &partition,
            &orig_indices,
            config.k_sp,
            SP_SAMPLE_SEED + l as u64,
        )?;
        let inputs = CascadeInputs {
            features: prev_features,
            positions: prev_positions,
            centroids: &centroids,
            neighbors: &table,
            sp_samples: &sp_samples,
            sp_of_centroid: &sp_of_centroid,
            n_sp: partition.n_sp(),
        };
        let (feats, tape) =
            cascaded_forward(&inputs, &params.stages[l], config.levels, config.use_relpos, record)?;
        if let (Some(ts), Some(t)) = (tapes.as_mut(), tape) {
            ts.push(t);
        }
        stages.push(EncoderStage {
            positions: centroids.positions.clone(),
            local_indices: centroids.indices,
            orig_indices,
            fused: feats.fused,
        });
    }
    Ok((stages, tapes))
}

/// Interpolate coarse features onto fine points (inverse-square-distance
/// over the 3 nearest; an exact match is copied verbatim), concatenate the
/// skip features, and apply the block's affine + rectifier.
pub fn feature_propagation(
    fine_pts: &[[f64; 3]],
    coarse_pts: &[[f64; 3]],
    coarse_feats: &Mat,
    skip_feats: &Mat,
    block: &AffineParams,
    relu: bool,
) -> Result<(Mat, FpTape)> {
    if coarse_pts.is_empty() {
        return Err(Error::degenerate("feature_propagation: no coarse points"));
    }
    if coarse_feats.rows() != coarse_pts.len() || skip_feats.rows() != fine_pts.len() {
        return Err(Error::invalid("feature_propagation: row counts disagree"));
    }
    let src_dim = coarse_feats.cols();
    let skip_dim = skip_feats.cols();
    if block.w.rows() != src_dim + skip_dim || block.w.cols() != block.b.len() {
        return Err(Error::invalid("feature_propagation: block shapes disagree"));
    }
    let k = coarse_pts.len().min(3);

    let nf = fine_pts.len();
    let mut neighbor_idx = Vec::with_capacity(nf);
    let mut weights = Vec::with_capacity(nf);
    let mut concat = Mat::zeros(nf, src_dim + skip_dim);
    for (i, p) in fine_pts.iter().enumerate() {
        let mut cand: Vec<(f64, usize)> = coarse_pts
            .iter()
            .enumerate()
            .map(|(j, q)| {
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                (dx * dx + dy * dy + dz * dz, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);

        let (idx, w): (Vec<usize>, Vec<f64>) = if cand[0].0 < 1e-18 {
            // Coincident coarse point: copy its feature exactly.
            (vec![cand[0].1], vec![1.0])
        } else {
            let raw: Vec<f64> = cand.iter().map(|&(d2, _)| 1.0 / (d2 + 1e-8)).collect();
            let total: f64 = raw.iter().sum();
            (cand.iter().map(|&(_, j)| j).collect(), raw.iter().map(|w| w / total).collect())
        };
        {
            let row = concat.row_mut(i);
            for (j, wj) in idx.iter().zip(&w) {
                let src = coarse_feats.row(*j);
                for c in 0..src_dim {
                    row[c] += wj * src[c];
                }
            }
            row[src_dim..].copy_from_slice(skip_feats.row(i));
        }
        neighbor_idx.push(idx);
        weights.push(w);
    }

    let out_dim = block.b.len();
    let mut pre = Mat::zeros(nf, out_dim);
    let mut out = Mat::zeros(nf, out_dim);
    for i in 0..nf {
        let mut p = block.w.matvec_t(concat.row(i));
        for (pc, b) in p.iter_mut().zip(&block.b) {
            *pc += b;
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&p) {
            *o = if relu { v.max(0.0) } else { v };
        }
        pre.row_mut(i).copy_from_slice(&p);
    }
    Ok((out, FpTape { neighbor_idx, weights, concat, pre, relu }))
}

/// Full forward pass: canonical ordering, encoder, four decoder steps back
/// to every point, classifier. Logits come back in the caller's original
/// point order.
pub fn network_forward(
    cloud: &PointCloud,
    config: &NetworkConfig,
    params: &NetworkParams,
    record: bool,
) -> Result<(Mat, Option<NetTape>)> {
    let perm = canonical_order(&cloud.positions);
    let ordered = cloud.permuted(&perm);
    let (stages, stage_tapes) = encoder_forward(&ordered, config, params, record)?;

    let mut fp_tapes = record.then(Vec::new);
    let mut feats = stages[3].fused.clone();
    for j in 0..4 {
        // fine side: stage 2,1,0 then the full cloud
        let (fine_pts, skip): (&[[f64; 3]], &Mat) = if j < 3 {
            let s = &stages[2 - j];
            (&s.positions, &s.fused)
        } else {
            (&ordered.positions, &ordered.features)
        };
        let coarse_pts: &[[f64; 3]] = if j == 0 { &stages[3].positions } else { &stages[3 - j].positions };
        let (out, tape) =
            feature_propagation(fine_pts, coarse_pts, &feats, skip, &params.decoder[j], true)?;
        feats = out;
        if let Some(ts) = fp_tapes.as_mut() {
            ts.push(tape);
        }
    }

    // classifier: plain affine
    let n = ordered.len();
    let classes = config.num_classes;
    let mut logits_canon = Mat::zeros(n, classes);
    for i in 0..n {
        let mut p = params.classifier.w.matvec_t(feats.row(i));
        for (pc, b) in p.iter_mut().zip(&params.classifier.b) {
            *pc += b;
        }
        logits_canon.row_mut(i).copy_from_slice(&p);
    }

    // back to the caller's point order
    let mut logits = Mat::zeros(n, classes);
    for (slot, &orig) in perm.iter().enumerate() {
        logits.row_mut(orig).copy_from_slice(logits_canon.row(slot));
    }

    let tape = if record {
        Some(NetTape {
            perm,
            stage_tapes: stage_tapes.unwrap(),
            fp_tapes: fp_tapes.unwrap(),
            cls_input: feats,
        })
    } else {
        None
    };
    Ok((logits, tape))
}
