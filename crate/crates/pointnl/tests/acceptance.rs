//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test -p pointnl --test acceptance -- --nocapture`.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointnl::cli::{ablate_sweep, bench_sweep, build_dataset, evaluate, RunConfig, SynthConfig};
use pointnl::data::{generate_scene, load_cloud, save_cloud, SceneSpec};
use pointnl::geom::{canonical_order, knn, voxel_partition, CentroidSet, PointCloud};
use pointnl::mat::Mat;
use pointnl::net::{
    cross_entropy_loss, init_params, load_checkpoint, lr_schedule, network_backward,
    network_forward, save_checkpoint, sgd_step, train_epoch, NetworkConfig, NetworkGrads,
    NetworkParams, OptimizerState, TrainConfig,
};
use pointnl::nlops::{
    baseline_full_nonlocal, neighborhood_level, nonlocal_gather, LevelWeights, Levels,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
}

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("pointnl_accept_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// A1: over 1000 randomized gathers (K <= 64, D <= 64), every channel's
/// attention weights sum to 1 within 1e-9. Runtime < 5 s.
#[test]
fn a1_normalization() {
    let start = Instant::now();
    let mut r = rng(0xa1);
    for _ in 0..1000 {
        let k = r.gen_range(1..=64);
        let d = r.gen_range(1..=64);
        let c = r.gen_range(1..=16);
        let w = LevelWeights::new(rand_mat(c, d, &mut r), rand_mat(c, d, &mut r)).unwrap();
        let center: Vec<f64> = (0..c).map(|_| r.gen::<f64>() * 6.0 - 3.0).collect();
        let neighbors = rand_mat(k, c, &mut r);
        let (_, tape) = nonlocal_gather(&center, &neighbors, &w, true).unwrap();
        let a = tape.unwrap().a;
        for col in 0..d {
            let sum: f64 = (0..k).map(|j| a.at(j, col)).sum();
            assert!((sum - 1.0).abs() <= 1e-9, "channel {col} sums to {sum}");
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "A1 took {elapsed:.2} s, budget 5 s");
    println!("A1 normalization: PASS ({elapsed:.2} s)");
}

fn mini_config() -> NetworkConfig {
    NetworkConfig {
        stage_m: [16, 8, 4, 2],
        stage_k: [4, 4, 3, 2],
        stage_d: [3, 3, 3, 3],
        stage_dplus: [4, 4, 4, 4],
        decoder_d: [4, 4, 4, 4],
        k_sp: 3,
        n_sp_cap: 4,
        cell_size: 1.0,
        ..NetworkConfig::defaults(6, 3)
    }
}

fn random_cloud(n: usize, num_classes: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [r.gen::<f64>() * 2.0, r.gen::<f64>() * 2.0, r.gen::<f64>() * 2.0])
        .collect();
    let features = Mat::from_fn(n, 6, |i, c| {
        if c < 3 {
            positions[i][c]
        } else {
            r.gen::<f64>()
        }
    });
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..num_classes)).collect();
    PointCloud::new(positions, features, Some(labels), num_classes).unwrap()
}

fn loss_of(cloud: &PointCloud, cfg: &NetworkConfig, params: &NetworkParams) -> f64 {
    let (logits, _) = network_forward(cloud, cfg, params, false).unwrap();
    cross_entropy_loss(&logits, cloud.labels.as_ref().unwrap()).unwrap().0
}

/// A2: on 20 random miniature networks (N = 64, stages [16,8,4,2], widths
/// <= 8), every parameter gradient matches central finite differences
/// (step 1e-5) with relative error < 1e-4 (absolute 1e-8 floor). < 2 min.
#[test]
fn a2_gradient_exactness() {
    let start = Instant::now();
    let cfg = mini_config();
    let eps = 1e-5;
    let mut checked = 0usize;
    for t in 0..20u64 {
        let cloud = random_cloud(64, 3, 0xd2_00 + t);
        let params = init_params(&cfg, 0xd2_40 + t).unwrap();
        let (logits, tape) = network_forward(&cloud, &cfg, &params, true).unwrap();
        let (_, d_logits) =
            cross_entropy_loss(&logits, cloud.labels.as_ref().unwrap()).unwrap();
        let grads: NetworkGrads =
            network_backward(&tape.unwrap(), &cfg, &params, &d_logits).unwrap();

        let n_tensors = params.slices().len();
        for tensor in 0..n_tensors {
            let len = params.slices()[tensor].len();
            for idx in 0..len {
                let mut plus = params.clone();
                plus.slices_mut()[tensor][idx] += eps;
                let mut minus = params.clone();
                minus.slices_mut()[tensor][idx] -= eps;
                let fd =
                    (loss_of(&cloud, &cfg, &plus) - loss_of(&cloud, &cfg, &minus)) / (2.0 * eps);
                let analytic = grads.slices()[tensor][idx];
                let abs = (analytic - fd).abs();
                let ok = abs <= 1e-8 || abs / analytic.abs().max(fd.abs()) < 1e-4;
                assert!(
                    ok,
                    "net {t}, tensor {tensor}, idx {idx}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "A2 took {elapsed:.1} s, budget 120 s");
    println!("A2 gradient exactness: PASS ({checked} parameters across 20 nets, {elapsed:.1} s)");
}

/// A3: the neighborhood level with K = N and a single superpoint reproduces
/// the full non-local baseline within 1e-10 on 50 random instances (N <= 32).
/// Runtime < 10 s.
#[test]
fn a3_oracle_equivalence() {
    let start = Instant::now();
    let mut r = rng(0xa3);
    for case in 0..50 {
        let n = r.gen_range(2..=32);
        let c = r.gen_range(2..=6);
        let d = r.gen_range(1..=6);
        let positions_raw: Vec<[f64; 3]> =
            (0..n).map(|_| [r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5]).collect();
        let order = canonical_order(&positions_raw);
        let positions: Vec<[f64; 3]> = order.iter().map(|&i| positions_raw[i]).collect();
        // one voxel covers everything: a single superpoint
        let part = voxel_partition(&positions, 10.0, 32).unwrap();
        assert_eq!(part.n_sp(), 1);
        let features = rand_mat(n, c, &mut r);
        let w = LevelWeights::new(rand_mat(c, d, &mut r), rand_mat(c, d, &mut r)).unwrap();

        let centroids = CentroidSet { indices: (0..n).collect(), positions: positions.clone() };
        let table = knn(&positions, &centroids, n).unwrap();
        let (x, _) =
            neighborhood_level(&features, &positions, &centroids, &table, &w, false, false)
                .unwrap();
        let base = baseline_full_nonlocal(&features, &w).unwrap();
        for i in 0..n {
            for j in 0..d {
                let diff = (x.at(i, j) - base.at(i, j)).abs();
                assert!(diff <= 1e-10, "case {case}: ({i},{j}) differs by {diff}");
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "A3 took {elapsed:.2} s, budget 10 s");
    println!("A3 oracle equivalence: PASS ({elapsed:.2} s)");
}

/// A4: stage-1 config (M = 1024, K = 32, K_sp = 20, N_sp = 32) costs exactly
/// 86016 pair interactions; the baseline at N = 4096 costs exactly
/// 16777216; the ratio is >= 150; and the cascaded forward is strictly
/// faster than the baseline at equal D. Runtime < 1 min.
#[test]
fn a4_complexity_claim() {
    let start = Instant::now();
    // paper-scale first stage: K = 32, K_sp = 20, cap = 32, D = 32
    let cfg = RunConfig {
        net: NetworkConfig::defaults(9, 4),
        ..RunConfig::default()
    };
    assert_eq!(cfg.net.stage_k[0], 32);
    assert_eq!(cfg.net.k_sp, 20);
    assert_eq!(cfg.net.n_sp_cap, 32);
    let rows = bench_sweep(&cfg, &[4096]).unwrap();
    let cascaded = rows.iter().find(|r| r.variant == "cascaded").unwrap();
    let baseline = rows.iter().find(|r| r.variant == "baseline").unwrap();
    assert_eq!(cascaded.interactions, 86016, "cascaded interaction count");
    assert_eq!(baseline.interactions, 16777216, "baseline interaction count");
    let ratio = baseline.interactions as f64 / cascaded.interactions as f64;
    assert!(ratio >= 150.0, "ratio {ratio}");
    assert!(
        cascaded.seconds < baseline.seconds,
        "cascaded {} s not faster than baseline {} s",
        cascaded.seconds,
        baseline.seconds
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "A4 took {elapsed:.1} s, budget 60 s");
    println!(
        "A4 complexity claim: PASS (86016 vs 16777216, ratio {ratio:.0}x, {:.3} s vs {:.3} s)",
        cascaded.seconds, baseline.seconds
    );
}

fn a5_run_config(out: PathBuf) -> RunConfig {
    RunConfig {
        net: NetworkConfig {
            stage_m: [128, 32, 8, 4],
            stage_k: [16, 8, 8, 4],
            stage_d: [16, 16, 16, 16],
            stage_dplus: [32, 32, 32, 32],
            decoder_d: [32, 32, 32, 32],
            k_sp: 8,
            n_sp_cap: 16,
            cell_size: 2.0,
            ..NetworkConfig::defaults(9, 4)
        },
        train: TrainConfig {
            base_lr: 0.02,
            decay_every: 50,
            total_epochs: 200,
            seed: 11,
            ..TrainConfig::default()
        },
        out,
        block_size: 100.0,
        n_sample: 2048,
        synth: SynthConfig {
            scenes: 1,
            points: 2048,
            classes: 4,
            extent: 8.0,
            noise: 0.01,
            seed: 1,
        },
        ..RunConfig::default()
    }
}

/// A5: the full pipeline overfits a fixed 2048-point 4-class scene to
/// OA >= 0.95 within 200 epochs on one CPU in under 15 minutes, with loss
/// non-increasing over 5-epoch windows in the first 20 epochs.
#[test]
fn a5_learnability() {
    let start = Instant::now();
    let cfg = a5_run_config(tmpdir("a5").join("a5"));
    let scenes = build_dataset(&cfg).unwrap();
    let blocks: Vec<PointCloud> =
        scenes.iter().flat_map(|s| s.blocks.iter().map(|b| b.cloud.clone())).collect();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0].len(), 2048);

    let mut params = init_params(&cfg.net, cfg.train.seed).unwrap();
    let mut state = OptimizerState::zeros_like(&params);
    let mut losses = Vec::new();
    for epoch in 0..cfg.train.total_epochs {
        let stats =
            train_epoch(&blocks, &cfg.net, &cfg.train, &mut params, &mut state, epoch).unwrap();
        losses.push(stats.mean_loss);
    }
    // 5-epoch windows over the first 20 epochs are non-increasing
    let windows: Vec<f64> =
        (0..4).map(|w| losses[w * 5..(w + 1) * 5].iter().sum::<f64>() / 5.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "loss windows increased: {windows:?}");
    }

    let metrics = evaluate(&scenes, &cfg.net, &params).unwrap();
    assert!(metrics.oa >= 0.95, "overfit OA {} < 0.95", metrics.oa);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 900.0, "A5 took {elapsed:.1} s, budget 900 s");
    println!("A5 learnability: PASS (OA {:.4}, windows {windows:?}, {elapsed:.1} s)", metrics.oa);
}

/// A6: identical (config, seed) runs produce bit-identical checkpoints and
/// metrics; checkpoint and cloud-file round trips are bit-exact.
#[test]
fn a6_determinism_and_formats() {
    let dir = tmpdir("a6");
    let bin = env!("CARGO_BIN_EXE_pointnl");
    let config_path = dir.join("toy.cfg");
    std::fs::write(
        &config_path,
        "in_dim = 9\nnum_classes = 4\nstage_m = 32,8,4,2\nstage_k = 4,4,3,2\n\
         stage_d = 4,4,4,4\nstage_dplus = 6,6,6,6\ndecoder_d = 6,6,6,6\nk_sp = 3\n\
         n_sp_cap = 4\ncell_size = 2\nbase_lr = 0.01\nbatch_size = 2\ntotal_epochs = 2\n\
         seed = 3\nn_sample = 64\nsynth_scenes = 2\nsynth_points = 200\nsynth_classes = 4\n\
         synth_extent = 6\nblock_size = 100\n",
    )
    .unwrap();
    for tag in ["r1", "r2"] {
        let out = dir.join(tag);
        let status = std::process::Command::new(bin)
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
    }
    let ck1 = std::fs::read(dir.join("r1.ckpt")).unwrap();
    let ck2 = std::fs::read(dir.join("r2.ckpt")).unwrap();
    assert_eq!(ck1, ck2, "checkpoints differ between identical runs");
    let m1 = std::fs::read(dir.join("r1.metrics")).unwrap();
    let m2 = std::fs::read(dir.join("r2.metrics")).unwrap();
    assert_eq!(m1, m2, "metrics differ between identical runs");

    // checkpoint round trip through the library
    let cfg = RunConfig::parse(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    let params = load_checkpoint(&dir.join("r1.ckpt"), &cfg.net).unwrap();
    save_checkpoint(&dir.join("resaved.ckpt"), &cfg.net, &params).unwrap();
    assert_eq!(ck1, std::fs::read(dir.join("resaved.ckpt")).unwrap());

    // cloud file round trip
    let spec = SceneSpec::standard(21, 150, 5.0, 4).unwrap();
    let cloud = generate_scene(&spec).unwrap();
    save_cloud(&cloud, &dir.join("scene.txt")).unwrap();
    let loaded = load_cloud(&dir.join("scene.txt")).unwrap();
    save_cloud(&loaded, &dir.join("scene2.txt")).unwrap();
    assert_eq!(
        std::fs::read(dir.join("scene.txt")).unwrap(),
        std::fs::read(dir.join("scene2.txt")).unwrap()
    );
    assert_eq!(loaded.positions, cloud.positions);
    assert_eq!(loaded.features, cloud.features);
    assert_eq!(loaded.labels, cloud.labels);
    println!("A6 determinism & formats: PASS");
}

/// A7: lr at epochs 0/25/60 equals 0.05/0.005/0.0005; a 3-step momentum
/// recurrence matches hand computation to 1e-15.
#[test]
fn a7_schedule_and_optimizer_fidelity() {
    let tc = TrainConfig::default();
    assert_eq!(lr_schedule(0, &tc), 0.05);
    assert!((lr_schedule(25, &tc) - 0.005).abs() <= 1e-15 * 0.005);
    assert!((lr_schedule(60, &tc) - 0.0005).abs() <= 1e-15 * 0.0005);

    let cfg = mini_config();
    let mut params = init_params(&cfg, 0xa7).unwrap();
    let p0 = params.slices()[2][1];
    let g = -0.83;
    let (lr, mom, wd) = (0.05, 0.9, 0.0001);
    let mut hand_p = p0;
    let mut hand_buf = 0.0;
    for _ in 0..3 {
        let gp = g + wd * hand_p;
        hand_buf = mom * hand_buf + gp;
        hand_p -= lr * hand_buf;
    }
    let mut grads = NetworkGrads::zeros_like(&params);
    grads.slices_mut()[2][1] = g;
    let mut state = OptimizerState::zeros_like(&params);
    for _ in 0..3 {
        sgd_step(&mut params, &grads, &mut state, lr, mom, wd).unwrap();
    }
    let diff = (params.slices()[2][1] - hand_p).abs();
    assert!(diff <= 1e-15, "momentum recurrence off by {diff}");
    println!("A7 schedule/optimizer fidelity: PASS");
}

/// A8: levels 1, 12, 123 run end-to-end with identical tensor shapes and
/// shared data order, and a three-row comparison table is emitted. The
/// accuracy ordering is a soft guard only: the cascade must not degrade the
/// neighborhood-only run by more than 0.02 mIoU.
#[test]
fn a8_ablation_plumbing() {
    let cfg = RunConfig {
        net: NetworkConfig {
            stage_m: [64, 16, 8, 4],
            stage_k: [8, 8, 4, 3],
            stage_d: [8, 8, 8, 8],
            stage_dplus: [12, 12, 12, 12],
            decoder_d: [12, 12, 12, 12],
            k_sp: 4,
            n_sp_cap: 16,
            cell_size: 1.5,
            ..NetworkConfig::defaults(9, 4)
        },
        train: TrainConfig {
            base_lr: 0.02,
            batch_size: 4,
            total_epochs: 200,
            decay_every: 150,
            seed: 5,
            ..TrainConfig::default()
        },
        out: tmpdir("a8").join("a8"),
        block_size: 100.0,
        n_sample: 512,
        synth: SynthConfig {
            scenes: 4,
            points: 900,
            classes: 4,
            extent: 6.0,
            noise: 0.01,
            seed: 1,
        },
        ..RunConfig::default()
    };
    let rows = ablate_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 3, "expected exactly 3 ablation rows");
    assert_eq!(rows[0].levels, "1");
    assert_eq!(rows[1].levels, "12");
    assert_eq!(rows[2].levels, "123");
    // shared data order
    assert_eq!(rows[0].shuffle_hash, rows[1].shuffle_hash);
    assert_eq!(rows[1].shuffle_hash, rows[2].shuffle_hash);
    // identical tensor shapes across ablations
    let shapes = |levels: Levels| {
        let mut net = cfg.net.clone();
        net.levels = levels;
        let p = init_params(&net, cfg.train.seed).unwrap();
        p.slices().iter().map(|s| s.len()).collect::<Vec<_>>()
    };
    let s1 = shapes(Levels::ONE);
    assert_eq!(s1, shapes(Levels::ONE_TWO));
    assert_eq!(s1, shapes(Levels::ALL));
    // emit the comparison table
    println!("levels  miou    macc    oa");
    for r in &rows {
        println!(
            "{:<7} {:.4}  {:.4}  {:.4}",
            r.levels, r.metrics.miou, r.metrics.macc, r.metrics.oa
        );
    }
    // soft non-degradation guard
    assert!(
        rows[2].metrics.miou >= rows[0].metrics.miou - 0.02,
        "cascade degraded mIoU: {} vs {}",
        rows[2].metrics.miou,
        rows[0].metrics.miou
    );
    println!("A8 ablation plumbing: PASS");
}
