//! Command-line entry points: train, eval, bench, and ablation sweeps.
//!
//! Configuration is a line-based `key = value` text file with `#` comments;
//! unknown keys are hard errors. A handful of flags override file values.
//! Exit codes: 0 success, 2 invalid config/data, 3 output IO failure,
//! 4 interaction-count assertion failure in bench.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::data::{block_split, generate_scene, Block, ConfusionMatrix, SceneSpec};
use crate::data::{finalize_metrics, load_cloud, Metrics};
use crate::error::{Error, Result};
use crate::geom::{canonical_order, farthest_point_sample, knn, sample_superpoint_centroids, voxel_partition, PointCloud};
use crate::mat::Mat;
use crate::net::{
    init_params, load_checkpoint, network_forward, save_checkpoint, train_epoch, NetworkConfig,
    NetworkParams, OptimizerState, TrainConfig,
};
use crate::nlops::{
    baseline_full_nonlocal, cascaded_forward, pair_interaction_count, CascadeInputs,
    CascadeParams, LevelWeights, Levels,
};
use crate::stats;

#[derive(Parser, Debug)]
#[command(name = "pointnl", version, about = "Cascaded non-local point cloud segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write per-epoch metrics plus checkpoints.
    Train(CommonArgs),
    /// Evaluate a checkpoint over a block-split dataset.
    Eval(CommonArgs),
    /// Benchmark the cascaded operator against the full non-local baseline.
    Bench(CommonArgs),
    /// Train and evaluate the level ablations 1 / 12 / 123.
    Ablate(CommonArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Path to the `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override total_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override enabled cascade levels: 1, 12 or 123.
    #[arg(long)]
    pub levels: Option<String>,
    /// Override the output path prefix.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the dataset path.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Synthetic-corpus settings used when no dataset path is given.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub points: usize,
    pub classes: usize,
    pub extent: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Union of network, training and data settings parsed from the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub block_size: f64,
    pub n_sample: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkConfig::defaults(9, 4),
            train: TrainConfig::default(),
            data_path: None,
            checkpoint: None,
            out: PathBuf::from("run"),
            block_size: 1.0,
            n_sample: 4096,
            synth: SynthConfig {
                scenes: 4,
                points: 4096,
                classes: 4,
                extent: 8.0,
                noise: 0.01,
                seed: 1,
            },
        }
    }
}

fn parse_list4(v: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("expected 4 comma-separated values, got {v:?}")));
    }
    let mut out = [0usize; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| Error::Config(format!("bad integer {p:?}")))?;
    }
    Ok(out)
}

impl RunConfig {
    /// Parse config text over the defaults. Unknown or duplicate keys are
    /// hard errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno0, raw) in text.lines().enumerate() {
            let lineno = lineno0 + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno, format!("expected `key = value`, got {raw:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::parse(lineno, format!("duplicate key {key:?}")));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer {v:?}")))
        };
        let float = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad float {v:?}")))
        };
        let boolean = |v: &str| -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("bad bool {v:?} (use true/false)"))),
            }
        };
        match key {
            "in_dim" => self.net.in_dim = int(value)?,
            "num_classes" => self.net.num_classes = int(value)?,
            "stage_m" => self.net.stage_m = parse_list4(value)?,
            "stage_k" => self.net.stage_k = parse_list4(value)?,
            "stage_d" => self.net.stage_d = parse_list4(value)?,
            "stage_dplus" => self.net.stage_dplus = parse_list4(value)?,
            "decoder_d" => self.net.decoder_d = parse_list4(value)?,
            "k_sp" => self.net.k_sp = int(value)?,
            "n_sp_cap" => self.net.n_sp_cap = int(value)?,
            "cell_size" => self.net.cell_size = float(value)?,
            "use_relpos" => self.net.use_relpos = boolean(value)?,
            "levels" => self.net.levels = Levels::parse(value)?,
            "base_lr" => self.train.base_lr = float(value)?,
            "batch_size" => self.train.batch_size = int(value)?,
            "momentum" => self.train.momentum = float(value)?,
            "weight_decay" => self.train.weight_decay = float(value)?,
            "decay_factor" => self.train.decay_factor = float(value)?,
            "decay_every" => self.train.decay_every = int(value)?,
            "total_epochs" => self.train.total_epochs = int(value)?,
            "seed" => {
                self.train.seed =
                    value.parse().map_err(|_| Error::Config(format!("bad integer {value:?}")))?
            }
            "data" => self.data_path = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "block_size" => self.block_size = float(value)?,
            "n_sample" => self.n_sample = int(value)?,
            "synth_scenes" => self.synth.scenes = int(value)?,
            "synth_points" => self.synth.points = int(value)?,
            "synth_classes" => self.synth.classes = int(value)?,
            "synth_extent" => self.synth.extent = float(value)?,
            "synth_noise" => self.synth.noise = float(value)?,
            "synth_seed" => {
                self.synth.seed =
                    value.parse().map_err(|_| Error::Config(format!("bad integer {value:?}")))?
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Emit the effective config as parsable `key = value` lines.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize; 4]| v.map(|x| x.to_string()).join(",");
        writeln!(s, "in_dim = {}", self.net.in_dim).unwrap();
        writeln!(s, "num_classes = {}", self.net.num_classes).unwrap();
        writeln!(s, "stage_m = {}", list(&self.net.stage_m)).unwrap();
        writeln!(s, "stage_k = {}", list(&self.net.stage_k)).unwrap();
        writeln!(s, "stage_d = {}", list(&self.net.stage_d)).unwrap();
        writeln!(s, "stage_dplus = {}", list(&self.net.stage_dplus)).unwrap();
        writeln!(s, "decoder_d = {}", list(&self.net.decoder_d)).unwrap();
        writeln!(s, "k_sp = {}", self.net.k_sp).unwrap();
        writeln!(s, "n_sp_cap = {}", self.net.n_sp_cap).unwrap();
        writeln!(s, "cell_size = {}", self.net.cell_size).unwrap();
        writeln!(s, "use_relpos = {}", self.net.use_relpos).unwrap();
        writeln!(s, "levels = {}", self.net.levels.label()).unwrap();
        writeln!(s, "base_lr = {}", self.train.base_lr).unwrap();
        writeln!(s, "batch_size = {}", self.train.batch_size).unwrap();
        writeln!(s, "momentum = {}", self.train.momentum).unwrap();
        writeln!(s, "weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(s, "decay_factor = {}", self.train.decay_factor).unwrap();
        writeln!(s, "decay_every = {}", self.train.decay_every).unwrap();
        writeln!(s, "total_epochs = {}", self.train.total_epochs).unwrap();
        writeln!(s, "seed = {}", self.train.seed).unwrap();
        if let Some(ref p) = self.data_path {
            writeln!(s, "data = {}", p.display()).unwrap();
        }
        if let Some(ref p) = self.checkpoint {
            writeln!(s, "checkpoint = {}", p.display()).unwrap();
        }
        writeln!(s, "out = {}", self.out.display()).unwrap();
        writeln!(s, "block_size = {}", self.block_size).unwrap();
        writeln!(s, "n_sample = {}", self.n_sample).unwrap();
        writeln!(s, "synth_scenes = {}", self.synth.scenes).unwrap();
        writeln!(s, "synth_points = {}", self.synth.points).unwrap();
        writeln!(s, "synth_classes = {}", self.synth.classes).unwrap();
        writeln!(s, "synth_extent = {}", self.synth.extent).unwrap();
        writeln!(s, "synth_noise = {}", self.synth.noise).unwrap();
        writeln!(s, "synth_seed = {}", self.synth.seed).unwrap();
        s
    }

    fn apply_overrides(&mut self, args: &CommonArgs) -> Result<()> {
        if let Some(seed) = args.seed {
            self.train.seed = seed;
        }
        if let Some(epochs) = args.epochs {
            self.train.total_epochs = epochs;
        }
        if let Some(ref levels) = args.levels {
            self.net.levels = Levels::parse(levels)?;
        }
        if let Some(ref out) = args.out {
            self.out = out.clone();
        }
        if let Some(ref data) = args.data {
            self.data_path = Some(data.clone());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if !(self.block_size > 0.0) {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if self.n_sample < self.net.stage_m[0] {
            return Err(Error::Config(format!(
                "n_sample = {} is below stage_m[0] = {}; blocks would be too small to encode",
                self.n_sample, self.net.stage_m[0]
            )));
        }
        if self.net.stage_k[0] > self.n_sample {
            return Err(Error::Config("stage_k[0] exceeds n_sample".into()));
        }
        Ok(())
    }
}

/// One evaluation unit: a source cloud plus its sampled blocks.
pub struct Scene {
    pub cloud: PointCloud,
    pub blocks: Vec<Block>,
}

/// Load the dataset file or generate the synthetic corpus, then block-split.
pub fn build_dataset(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    if let Some(ref path) = cfg.data_path {
        if !path.exists() {
            return Err(Error::Config(format!("dataset {} does not exist", path.display())));
        }
        let cloud = load_cloud(path)?;
        scenes.push(cloud);
    } else {
        for s in 0..cfg.synth.scenes {
            let mut spec = SceneSpec::standard(
                cfg.synth.seed + s as u64,
                cfg.synth.points,
                cfg.synth.extent,
                cfg.synth.classes,
            )?;
            spec.noise_sigma = cfg.synth.noise;
            scenes.push(generate_scene(&spec)?);
        }
    }
    let mut out = Vec::with_capacity(scenes.len());
    for (i, cloud) in scenes.into_iter().enumerate() {
        if cloud.labels.is_none() {
            return Err(Error::Config("dataset has no labels; cannot train or evaluate".into()));
        }
        if cloud.num_classes != cfg.net.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but config expects {}",
                cloud.num_classes, cfg.net.num_classes
            )));
        }
        let blocks = block_split(&cloud, cfg.block_size, cfg.n_sample, cfg.train.seed)?;
        if blocks.is_empty() {
            return Err(Error::Config(format!("scene {i} produced no usable blocks")));
        }
        for b in &blocks {
            if b.cloud.features.cols() != cfg.net.in_dim {
                return Err(Error::Config(format!(
                    "blocks carry {} feature columns but in_dim = {}",
                    b.cloud.features.cols(),
                    cfg.net.in_dim
                )));
            }
        }
        out.push(Scene { cloud, blocks });
    }
    Ok(out)
}

/// Forward every block, merge block predictions back onto source points
/// (later blocks win for points sampled more than once), and reduce to one
/// confusion matrix over all scenes.
pub fn evaluate(
    scenes: &[Scene],
    net: &NetworkConfig,
    params: &NetworkParams,
) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(net.num_classes);
    for scene in scenes {
        let labels = scene.cloud.labels.as_ref().unwrap();
        let mut pred_of: Vec<Option<usize>> = vec![None; scene.cloud.len()];
        for block in &scene.blocks {
            let (logits, _) = network_forward(&block.cloud, net, params, false)?;
            for (row, &src) in block.point_indices.iter().enumerate() {
                pred_of[src] = Some(crate::net::argmax_row(logits.row(row)));
            }
        }
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for (i, p) in pred_of.iter().enumerate() {
            if let Some(pred) = p {
                preds.push(*pred);
                truth.push(labels[i]);
            }
        }
        cm.accumulate(&preds, &truth)?;
    }
    Ok(finalize_metrics(&cm))
}

fn epoch_line(epoch: usize, stats: &crate::net::EpochStats) -> String {
    format!(
        "{{\"epoch\": {}, \"lr\": {}, \"loss\": {}, \"oa\": {}, \"shuffle_hash\": \"{:016x}\"}}",
        epoch, stats.lr, stats.mean_loss, stats.oa, stats.shuffle_hash
    )
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let scenes = build_dataset(cfg)?;
    let blocks: Vec<PointCloud> = scenes.iter().flat_map(|s| s.blocks.iter().map(|b| b.cloud.clone())).collect();
    let mut params = init_params(&cfg.net, cfg.train.seed)?;
    let mut state = OptimizerState::zeros_like(&params);
    let mut metrics_text = String::new();
    for epoch in 0..cfg.train.total_epochs {
        let stats = train_epoch(&blocks, &cfg.net, &cfg.train, &mut params, &mut state, epoch)?;
        let line = epoch_line(epoch, &stats);
        println!("{line}");
        metrics_text.push_str(&line);
        metrics_text.push('\n');
        let done = epoch + 1;
        if done % cfg.train.decay_every == 0 && done < cfg.train.total_epochs {
            let path = cfg.out.with_extension(format!("epoch{done}.ckpt"));
            save_checkpoint(&path, &cfg.net, &params)?;
        }
    }
    save_checkpoint(&cfg.out.with_extension("ckpt"), &cfg.net, &params)?;
    std::fs::write(cfg.out.with_extension("metrics"), metrics_text)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs `checkpoint = path` in the config".into()))?;
    let params = load_checkpoint(ckpt, &cfg.net)?;
    let scenes = build_dataset(cfg)?;
    let metrics = evaluate(&scenes, &cfg.net, &params)?;
    println!("{}", metrics.to_json_line());
    std::fs::write(cfg.out.with_extension("eval"), metrics.to_json_line() + "\n")?;
    Ok(())
}

/// One bench measurement row.
pub struct BenchRow {
    pub n: usize,
    pub variant: &'static str,
    pub interactions: u64,
    pub seconds: f64,
    pub peak_bytes: u64,
}

/// Uniform cloud over an 8 m cube: xyz plus three pseudo-color channels.
fn bench_cloud(n: usize, seed: u64) -> PointCloud {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen::<f64>() * 8.0, rng.gen::<f64>() * 8.0, rng.gen::<f64>() * 8.0])
        .collect();
    let features = Mat::from_fn(n, 6, |i, c| {
        if c < 3 {
            positions[i][c]
        } else {
            rng.gen::<f64>()
        }
    });
    PointCloud::new(positions, features, None, 0).unwrap()
}

/// Run the sweep used by `bench`: cascaded first-stage forward vs. the
/// all-pairs baseline at equal D, with interaction counts checked against
/// the analytic formula.
pub fn bench_sweep(cfg: &RunConfig, sizes: &[usize]) -> Result<Vec<BenchRow>> {
    let d = cfg.net.stage_d[0];
    let k = cfg.net.stage_k[0];
    let k_sp = cfg.net.k_sp;
    let c_in = 6usize;
    let c1 = c_in + if cfg.net.use_relpos { 3 } else { 0 };

    let mut rows = Vec::new();
    for &n in sizes {
        let m = n / 4;
        let cloud = bench_cloud(n, 0xbe5c + n as u64);
        let perm = canonical_order(&cloud.positions);
        let ordered = cloud.permuted(&perm);

        let centroids = farthest_point_sample(&ordered.positions, m)?;
        let table = knn(&ordered.positions, &centroids, k)?;
        let partition = voxel_partition(&ordered.positions, cfg.net.cell_size, cfg.net.n_sp_cap)?;
        let samples =
            sample_superpoint_centroids(&partition, &centroids.indices, k_sp, 0x5eed)?;
        let sp_of: Vec<usize> =
            centroids.indices.iter().map(|&i| partition.assignment[i]).collect();

        let mut seed_rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(7)
        };
        let params = bench_params(&mut seed_rng, c1, d, cfg.net.stage_dplus[0]);
        let inputs = CascadeInputs {
            features: &ordered.features,
            positions: &ordered.positions,
            centroids: &centroids,
            neighbors: &table,
            sp_samples: &samples,
            sp_of_centroid: &sp_of,
            n_sp: partition.n_sp(),
        };

        stats::reset_interactions();
        stats::reset_peak_matrix_bytes();
        let start = Instant::now();
        let (feats, _) =
            cascaded_forward(&inputs, &params, Levels::ALL, cfg.net.use_relpos, false)?;
        let seconds = start.elapsed().as_secs_f64();
        let measured = stats::interactions();
        let peak = stats::peak_matrix_bytes();
        let n_sp_occ = feats.v.rows() as u64;
        let analytic = pair_interaction_count(m as u64, k as u64, k_sp as u64, n_sp_occ);
        if measured != analytic {
            return Err(Error::BenchAssertion(format!(
                "cascaded at n = {n}: measured {measured} interactions, analytic {analytic}"
            )));
        }
        rows.push(BenchRow { n, variant: "cascaded", interactions: measured, seconds, peak_bytes: peak });

        let base_weights = LevelWeights::new(
            Mat::from_fn(c_in, d, |_, _| rand_f(&mut seed_rng)),
            Mat::from_fn(c_in, d, |_, _| rand_f(&mut seed_rng)),
        )?;
        stats::reset_interactions();
        stats::reset_peak_matrix_bytes();
        let start = Instant::now();
        baseline_full_nonlocal(&ordered.features, &base_weights)?;
        let seconds = start.elapsed().as_secs_f64();
        let measured = stats::interactions();
        let peak = stats::peak_matrix_bytes();
        let analytic = (n as u64) * (n as u64);
        if measured != analytic {
            return Err(Error::BenchAssertion(format!(
                "baseline at n = {n}: measured {measured} interactions, expected {analytic}"
            )));
        }
        rows.push(BenchRow { n, variant: "baseline", interactions: measured, seconds, peak_bytes: peak });
    }
    Ok(rows)
}

fn rand_f(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.gen::<f64>() * 0.4 - 0.2
}

fn bench_params(rng: &mut rand_chacha::ChaCha8Rng, c1: usize, d: usize, dp: usize) -> CascadeParams {
    CascadeParams {
        level1: LevelWeights::new(
            Mat::from_fn(c1, d, |_, _| rand_f(rng)),
            Mat::from_fn(c1, d, |_, _| rand_f(rng)),
        )
        .unwrap(),
        level2: LevelWeights::new(
            Mat::from_fn(d, d, |_, _| rand_f(rng)),
            Mat::from_fn(d, d, |_, _| rand_f(rng)),
        )
        .unwrap(),
        level3: LevelWeights::new(
            Mat::from_fn(d, d, |_, _| rand_f(rng)),
            Mat::from_fn(d, d, |_, _| rand_f(rng)),
        )
        .unwrap(),
        w_gamma: Mat::from_fn(3 * d, dp, |_, _| rand_f(rng)),
        b_gamma: vec![0.0; dp],
    }
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let rows = bench_sweep(cfg, &[512, 1024, 2048, 4096])?;
    let mut csv = String::from("n,variant,interactions,seconds,peak_bytes\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.n, r.variant, r.interactions, r.seconds, r.peak_bytes)
            .unwrap();
    }
    print!("{csv}");
    std::fs::write(cfg.out.with_extension("bench.csv"), csv)?;
    Ok(())
}

/// One ablation row.
pub struct AblateRow {
    pub levels: &'static str,
    pub metrics: Metrics,
    pub shuffle_hash: u64,
}

/// Train and evaluate levels 1, 12, 123 with a shared seed and data order.
pub fn ablate_sweep(cfg: &RunConfig) -> Result<Vec<AblateRow>> {
    let scenes = build_dataset(cfg)?;
    let blocks: Vec<PointCloud> =
        scenes.iter().flat_map(|s| s.blocks.iter().map(|b| b.cloud.clone())).collect();
    let mut rows = Vec::new();
    for levels in [Levels::ONE, Levels::ONE_TWO, Levels::ALL] {
        let mut net = cfg.net.clone();
        net.levels = levels;
        let mut params = init_params(&net, cfg.train.seed)?;
        let mut state = OptimizerState::zeros_like(&params);
        let mut shuffle_hash = 0;
        for epoch in 0..cfg.train.total_epochs {
            let stats = train_epoch(&blocks, &net, &cfg.train, &mut params, &mut state, epoch)?;
            if epoch == 0 {
                shuffle_hash = stats.shuffle_hash;
            }
        }
        let metrics = evaluate(&scenes, &net, &params)?;
        rows.push(AblateRow { levels: levels.label(), metrics, shuffle_hash });
    }
    Ok(rows)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let rows = ablate_sweep(cfg)?;
    let mut out = String::new();
    writeln!(out, "levels  miou    macc    oa      shuffle_hash").unwrap();
    for r in &rows {
        writeln!(
            out,
            "{:<7} {:.4}  {:.4}  {:.4}  {:016x}",
            r.levels, r.metrics.miou, r.metrics.macc, r.metrics.oa, r.shuffle_hash
        )
        .unwrap();
    }
    print!("{out}");
    std::fs::write(cfg.out.with_extension("ablate"), out)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 3,
        Error::BenchAssertion(_) => 4,
        _ => 2,
    }
}

/// Run one parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (args, which): (&CommonArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::Bench(a) => (a, cmd_bench),
        Command::Ablate(a) => (a, cmd_ablate),
    };
    let cfg = RunConfig::load(&args.config).and_then(|mut cfg| {
        cfg.apply_overrides(args)?;
        cfg.validate()?;
        Ok(cfg)
    });
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    println!("# effective config");
    print!("{}", cfg.emit());
    match which(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
