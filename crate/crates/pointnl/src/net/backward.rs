//! Reverse-mode pass through classifier, decoder and encoder.
//!
//! Interpolation weights depend only on geometry, so they backpropagate as
//! constants; skip gradients accumulate into the matching encoder stage
//! before that stage's cascade runs backward.

use super::forward::NetTape;
use super::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nlops::{cascaded_backward, CascadeGrads};

#[derive(Debug)]
pub struct AffineGrads {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Gradients for every parameter tensor, shape-congruent with
/// [`NetworkParams`].
#[derive(Debug)]
pub struct NetworkGrads {
    pub stages: Vec<CascadeGrads>,
    pub decoder: Vec<AffineGrads>,
    pub classifier: AffineGrads,
}

impl NetworkGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        NetworkGrads {
            stages: params.stages.iter().map(CascadeGrads::zeros_like).collect(),
            decoder: params
                .decoder
                .iter()
                .map(|d| AffineGrads { w: Mat::zeros(d.w.rows(), d.w.cols()), b: vec![0.0; d.b.len()] })
                .collect(),
            classifier: AffineGrads {
                w: Mat::zeros(params.classifier.w.rows(), params.classifier.w.cols()),
                b: vec![0.0; params.classifier.b.len()],
            },
        }
    }

    /// Flat views in the same canonical order as `NetworkParams::slices`.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for s in &self.stages {
            v.push(s.level1.w_theta.data());
            v.push(s.level1.w_phi.data());
            v.push(s.level2.w_theta.data());
            v.push(s.level2.w_phi.data());
            v.push(s.level3.w_theta.data());
            v.push(s.level3.w_phi.data());
            v.push(s.w_gamma.data());
            v.push(&s.b_gamma);
        }
        for d in &self.decoder {
            v.push(d.w.data());
            v.push(&d.b);
        }
        v.push(self.classifier.w.data());
        v.push(&self.classifier.b);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for s in &mut self.stages {
            v.push(s.level1.w_theta.data_mut());
            v.push(s.level1.w_phi.data_mut());
            v.push(s.level2.w_theta.data_mut());
            v.push(s.level2.w_phi.data_mut());
            v.push(s.level3.w_theta.data_mut());
            v.push(s.level3.w_phi.data_mut());
            v.push(s.w_gamma.data_mut());
            v.push(&mut s.b_gamma);
        }
        for d in &mut self.decoder {
            v.push(d.w.data_mut());
            v.push(&mut d.b);
        }
        v.push(self.classifier.w.data_mut());
        v.push(&mut self.classifier.b);
        v
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Full-network backward from per-point logit gradients (in the caller's
/// original point order) to every parameter gradient.
pub fn network_backward(
    tape: &NetTape,
    config: &NetworkConfig,
    params: &NetworkParams,
    d_logits: &Mat,
) -> Result<NetworkGrads> {
    let n = tape.perm.len();
    if d_logits.rows() != n || d_logits.cols() != config.num_classes {
        return Err(Error::invalid("network_backward: d_logits shape mismatch"));
    }
    let mut grads = NetworkGrads::zeros_like(params);

    // Into canonical order.
    let mut d_canon = Mat::zeros(n, config.num_classes);
    for (slot, &orig) in tape.perm.iter().enumerate() {
        d_canon.row_mut(slot).copy_from_slice(d_logits.row(orig));
    }

    // Classifier (no rectifier).
    let dd = tape.cls_input.cols();
    let mut d_feats = Mat::zeros(n, dd);
    for i in 0..n {
        let d_row = d_canon.row(i);
        grads.classifier.w.add_outer(tape.cls_input.row(i), d_row);
        for (b, g) in grads.classifier.b.iter_mut().zip(d_row) {
            *b += g;
        }
        d_feats.row_mut(i).copy_from_slice(&params.classifier.w.matvec(d_row));
    }

    // Decoder blocks in reverse. d_feats always holds the gradient of the
    // current block's output; skips feed the per-stage fused gradients.
    let mut d_fused: Vec<Mat> = tape
        .stage_tapes
        .iter()
        .enumerate()
        .map(|(l, t)| Mat::zeros(t.centroid_indices.len(), config.stage_dplus[l]))
        .collect();

    for j in (0..4).rev() {
        let fp = &tape.fp_tapes[j];
        let block = &params.decoder[j];
        let src_dim = if j == 0 { config.stage_dplus[3] } else { config.decoder_d[j - 1] };
        let n_coarse = d_fused_coarse_rows(config, j);
        let nf = d_feats.rows();
        let out_dim = block.b.len();

        let mut d_coarse = Mat::zeros(n_coarse, src_dim);
        let mut d_skip_stage: Option<usize> = None;
        if j < 3 {
            d_skip_stage = Some(2 - j);
        }

        for i in 0..nf {
            let mut d_pre = vec![0.0; out_dim];
            let pre = fp.pre.row(i);
            for c in 0..out_dim {
                let g = d_feats.at(i, c);
                d_pre[c] = if fp.relu && pre[c] <= 0.0 { 0.0 } else { g };
            }
            grads.decoder[j].w.add_outer(fp.concat.row(i), &d_pre);
            for (b, g) in grads.decoder[j].b.iter_mut().zip(&d_pre) {
                *b += g;
            }
            let d_concat = block.w.matvec(&d_pre);
            // interpolated part routes to coarse rows with the stored weights
            for (ci, wi) in fp.neighbor_idx[i].iter().zip(&fp.weights[i]) {
                let row = d_coarse.row_mut(*ci);
                for c in 0..src_dim {
                    row[c] += wi * d_concat[c];
                }
            }
            // skip part accumulates into the matching encoder stage (raw
            // input features for the outermost block carry no parameters).
            if let Some(s) = d_skip_stage {
                let row = d_fused[s].row_mut(i);
                for c in 0..row.len() {
                    row[c] += d_concat[src_dim + c];
                }
            }
        }

        if j == 0 {
            d_fused[3].add_assign(&d_coarse);
        } else {
            d_feats = d_coarse;
        }
    }

    // Encoder stages in reverse; each stage's input-feature gradient feeds
    // the previous stage's fused gradient.
    for l in (0..4).rev() {
        let (stage_grads, d_input) =
            cascaded_backward(&tape.stage_tapes[l], &params.stages[l], &d_fused[l])?;
        grads.stages[l] = stage_grads;
        if l > 0 {
            d_fused[l - 1].add_assign(&d_input);
        }
    }

    Ok(grads)
}

fn d_fused_coarse_rows(config: &NetworkConfig, j: usize) -> usize {
    // coarse side of decoder block j
    config.stage_m[3 - j]
}
