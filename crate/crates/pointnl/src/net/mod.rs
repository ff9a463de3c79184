//! Network assembly: four cascaded modules as the encoder, an
//! inverse-distance interpolation decoder with skip connections, a linear
//! classification head, and the training machinery around them.

mod backward;
mod forward;
mod train;

pub use backward::{network_backward, AffineGrads, NetworkGrads};
pub use forward::{
    encoder_forward, feature_propagation, network_forward, EncoderStage, FpTape, NetTape,
};
pub use train::{
    argmax_row, cross_entropy_loss, lr_schedule, sgd_step, train_epoch, EpochStats,
    OptimizerState, TrainConfig,
};

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nlops::{CascadeParams, LevelWeights, Levels};

/// Base seed for the per-stage superpoint sampling inside the forward pass.
/// Fixing it makes the network a pure function of (cloud, params).
const SP_SAMPLE_SEED: u64 = 0x7370_6e6c;

/// Network hyperparameters. Defaults follow the four-stage recipe:
/// 1024/256/64/16 centroids with doubling feature widths.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Raw input feature width (xyz copy included).
    pub in_dim: usize,
    pub num_classes: usize,
    pub stage_m: [usize; 4],
    pub stage_k: [usize; 4],
    pub stage_d: [usize; 4],
    pub stage_dplus: [usize; 4],
    /// Decoder block widths, deepest first; the last feeds the classifier.
    pub decoder_d: [usize; 4],
    pub k_sp: usize,
    pub n_sp_cap: usize,
    pub cell_size: f64,
    pub use_relpos: bool,
    pub levels: Levels,
}

impl NetworkConfig {
    pub fn defaults(in_dim: usize, num_classes: usize) -> Self {
        NetworkConfig {
            in_dim,
            num_classes,
            stage_m: [1024, 256, 64, 16],
            stage_k: [32, 32, 16, 8],
            stage_d: [32, 64, 128, 256],
            stage_dplus: [64, 128, 256, 512],
            decoder_d: [256, 128, 64, 64],
            k_sp: 20,
            n_sp_cap: 32,
            cell_size: 1.0,
            use_relpos: true,
            levels: Levels::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim < 3 {
            return Err(Error::Config("in_dim must be >= 3".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        for w in self
            .stage_d
            .iter()
            .chain(&self.stage_dplus)
            .chain(&self.decoder_d)
            .chain(&self.stage_k)
            .chain(&self.stage_m)
        {
            if *w < 1 {
                return Err(Error::Config("all widths and counts must be >= 1".into()));
            }
        }
        for l in 1..4 {
            if self.stage_m[l] >= self.stage_m[l - 1] {
                return Err(Error::Config("stage_m must be strictly decreasing".into()));
            }
            if self.stage_k[l] > self.stage_m[l - 1] {
                return Err(Error::Config(format!(
                    "stage_k[{l}] = {} exceeds previous stage point count {}",
                    self.stage_k[l],
                    self.stage_m[l - 1]
                )));
            }
        }
        if self.k_sp < 1 || self.n_sp_cap < 1 {
            return Err(Error::Config("k_sp and n_sp_cap must be >= 1".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        Ok(())
    }

    /// Input feature width of stage `l`'s cascade.
    pub fn stage_in_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.in_dim
        } else {
            self.stage_dplus[l - 1]
        }
    }

    fn level1_in_dim(&self, l: usize) -> usize {
        self.stage_in_dim(l) + if self.use_relpos { 3 } else { 0 }
    }

    /// Input width of decoder block `j` (deepest first): interpolated source
    /// concatenated with the skip features.
    fn decoder_in_dim(&self, j: usize) -> usize {
        let src = if j == 0 { self.stage_dplus[3] } else { self.decoder_d[j - 1] };
        let skip = if j == 3 { self.in_dim } else { self.stage_dplus[2 - j] };
        src + skip
    }
}

/// One affine + rectifier block (the rectifier is skipped for the
/// classifier head).
#[derive(Debug, Clone)]
pub struct AffineParams {
    /// in_dim x out_dim.
    pub w: Mat,
    pub b: Vec<f64>,
}

/// All learnable parameters of the network.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub stages: Vec<CascadeParams>,
    pub decoder: Vec<AffineParams>,
    pub classifier: AffineParams,
}

/// Canonical tensor inventory: (name, rows, cols) with cols = 0 for vectors.
/// Everything that walks parameters — init, checkpoints, SGD — follows this
/// order.
fn tensor_plan(config: &NetworkConfig) -> Vec<(String, usize, usize)> {
    let mut plan = Vec::new();
    for s in 0..4 {
        let c1 = config.level1_in_dim(s);
        let d = config.stage_d[s];
        let dp = config.stage_dplus[s];
        plan.push((format!("stage{s}.level1.w_theta"), c1, d));
        plan.push((format!("stage{s}.level1.w_phi"), c1, d));
        for lvl in 2..=3 {
            plan.push((format!("stage{s}.level{lvl}.w_theta"), d, d));
            plan.push((format!("stage{s}.level{lvl}.w_phi"), d, d));
        }
        plan.push((format!("stage{s}.w_gamma"), 3 * d, dp));
        plan.push((format!("stage{s}.b_gamma"), dp, 0));
    }
    for j in 0..4 {
        plan.push((format!("decoder{j}.weight"), config.decoder_in_dim(j), config.decoder_d[j]));
        plan.push((format!("decoder{j}.bias"), config.decoder_d[j], 0));
    }
    plan.push(("classifier.weight".into(), config.decoder_d[3], config.num_classes));
    plan.push(("classifier.bias".into(), config.num_classes, 0));
    plan
}

enum TensorInit<'a> {
    Xavier(&'a mut ChaCha8Rng),
    Values(std::collections::BTreeMap<String, (Vec<u64>, Vec<f64>)>),
}

fn build_params(config: &NetworkConfig, mut init: TensorInit) -> Result<NetworkParams> {
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let len = rows * cols.max(1);
        match &mut init {
            TensorInit::Xavier(rng) => {
                if cols == 0 {
                    Ok(vec![0.0; len]) // biases start at zero
                } else {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Ok((0..len).map(|_| rng.gen_range(-bound..bound)).collect())
                }
            }
            TensorInit::Values(map) => {
                let (dims, data) = map.remove(name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor {name:?}"))
                })?;
                let want: Vec<u64> = if cols == 0 {
                    vec![rows as u64]
                } else {
                    vec![rows as u64, cols as u64]
                };
                if dims != want {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has dims {dims:?}, expected {want:?}"
                    )));
                }
                Ok(data)
            }
        }
    };

    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let c1 = config.level1_in_dim(s);
        let d = config.stage_d[s];
        let dp = config.stage_dplus[s];
        let mut level = |lvl: usize, c: usize| -> Result<LevelWeights> {
            let wt = take(&format!("stage{s}.level{lvl}.w_theta"), c, d)?;
            let wp = take(&format!("stage{s}.level{lvl}.w_phi"), c, d)?;
            LevelWeights::new(Mat::from_vec(c, d, wt), Mat::from_vec(c, d, wp))
        };
        let level1 = level(1, c1)?;
        let level2 = level(2, d)?;
        let level3 = level(3, d)?;
        let w_gamma = Mat::from_vec(3 * d, dp, take(&format!("stage{s}.w_gamma"), 3 * d, dp)?);
        let b_gamma = take(&format!("stage{s}.b_gamma"), dp, 0)?;
        stages.push(CascadeParams { level1, level2, level3, w_gamma, b_gamma });
    }
    let mut decoder = Vec::with_capacity(4);
    for j in 0..4 {
        let (ind, outd) = (config.decoder_in_dim(j), config.decoder_d[j]);
        let w = Mat::from_vec(ind, outd, take(&format!("decoder{j}.weight"), ind, outd)?);
        let b = take(&format!("decoder{j}.bias"), outd, 0)?;
        decoder.push(AffineParams { w, b });
    }
    let w = Mat::from_vec(
        config.decoder_d[3],
        config.num_classes,
        take("classifier.weight", config.decoder_d[3], config.num_classes)?,
    );
    let b = take("classifier.bias", config.num_classes, 0)?;
    if let TensorInit::Values(map) = init {
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
    }
    Ok(NetworkParams { stages, decoder, classifier: AffineParams { w, b } })
}

/// Xavier-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_params(config, TensorInit::Xavier(&mut rng))
}

impl NetworkParams {
    /// Flat views of every tensor, in canonical order.
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

    /// Flat mutable views of every tensor, in canonical order.
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

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CNLCKPT1";

/// Write params as the binary checkpoint format: magic, then per-tensor
/// records (u64 name length, name bytes, u64 rank, u64 dims, f64 values, all
/// little-endian), terminated by a zero-length name.
pub fn save_checkpoint(path: &std::path::Path, config: &NetworkConfig, params: &NetworkParams) -> Result<()> {
    let plan = tensor_plan(config);
    let slices = params.slices();
    debug_assert_eq!(plan.len(), slices.len());
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for ((name, rows, cols), data) in plan.iter().zip(slices) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims: Vec<u64> = if *cols == 0 {
            vec![*rows as u64]
        } else {
            vec![*rows as u64, *cols as u64]
        };
        out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&0u64.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a checkpoint back into params shaped by `config`. Any missing,
/// extra, or misshapen tensor is an error.
pub fn load_checkpoint(path: &std::path::Path, config: &NetworkConfig) -> Result<NetworkParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    let mut tensors = std::collections::BTreeMap::new();
    loop {
        let name_len = read_u64(&mut pos)? as usize;
        if name_len == 0 {
            break;
        }
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut pos)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut pos)?);
        }
        let count = dims.iter().product::<u64>() as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    build_params(config, TensorInit::Values(tensors))
}

#[cfg(test)]
mod net_tests;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let cfg = NetworkConfig {
            stage_m: [16, 8, 4, 2],
            stage_k: [4, 4, 3, 2],
            stage_d: [4, 4, 4, 4],
            stage_dplus: [6, 6, 6, 6],
            decoder_d: [6, 6, 6, 6],
            k_sp: 3,
            n_sp_cap: 4,
            ..NetworkConfig::defaults(6, 3)
        };
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        for (x, y) in a.slices().iter().zip(b.slices().iter()) {
            assert_eq!(x, y);
        }
        for s in &a.stages {
            assert!(s.b_gamma.iter().all(|&v| v == 0.0));
        }
        for d in &a.decoder {
            assert!(d.b.iter().all(|&v| v == 0.0));
        }
        assert!(a.classifier.b.iter().all(|&v| v == 0.0));
        let c = init_params(&cfg, 8).unwrap();
        assert!(a.slices().iter().zip(c.slices().iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_mean_is_small_for_large_blocks() {
        // 256x256 draws under the symmetric bound should have tiny mean.
        let mut cfg = NetworkConfig::defaults(6, 4);
        cfg.stage_d = [256, 64, 128, 256];
        cfg.stage_m = [64, 32, 16, 8];
        cfg.stage_k = [8, 8, 8, 8];
        let params = init_params(&cfg, 3).unwrap();
        let w = &params.stages[0].level2.w_theta; // 256x256
        assert_eq!((w.rows(), w.cols()), (256, 256));
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            stage_m: [16, 8, 4, 2],
            stage_k: [4, 4, 3, 2],
            stage_d: [4, 5, 6, 7],
            stage_dplus: [6, 7, 8, 9],
            decoder_d: [8, 7, 6, 5],
            k_sp: 3,
            n_sp_cap: 4,
            ..NetworkConfig::defaults(6, 3)
        };
        let params = init_params(&cfg, 42).unwrap();
        let dir = std::env::temp_dir().join("pointnl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let loaded = load_checkpoint(&path, &cfg).unwrap();
        for (a, b) in params.slices().iter().zip(loaded.slices().iter()) {
            assert_eq!(a, b);
        }
        // byte-identical on re-save
        save_checkpoint(&dir.join("rt2.ckpt"), &cfg, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.join("rt2.ckpt")).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_shape() {
        let cfg = NetworkConfig {
            stage_m: [16, 8, 4, 2],
            stage_k: [4, 4, 3, 2],
            stage_d: [4, 4, 4, 4],
            stage_dplus: [6, 6, 6, 6],
            decoder_d: [6, 6, 6, 6],
            k_sp: 3,
            n_sp_cap: 4,
            ..NetworkConfig::defaults(6, 3)
        };
        let params = init_params(&cfg, 1).unwrap();
        let dir = std::env::temp_dir().join("pointnl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, &cfg), Err(Error::Checkpoint(_))));

        // same file, different expected shapes
        let path2 = dir.join("shape.ckpt");
        save_checkpoint(&path2, &cfg, &params).unwrap();
        let mut other = cfg.clone();
        other.stage_d = [5, 5, 5, 5];
        assert!(matches!(load_checkpoint(&path2, &other), Err(Error::Checkpoint(_))));
    }
}
