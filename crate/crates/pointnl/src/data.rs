//! Synthetic labeled scenes, point-cloud text IO, block splitting, and
//! segmentation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::mat::Mat;

/// Labeled surface primitives; points are sampled on each surface in
/// proportion to its area.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Horizontal square of side `side` centered at `center`, at height z.
    Floor { center: [f64; 2], side: f64, z: f64, class: usize },
    /// Axis-aligned box surface.
    BoxSurface { min: [f64; 3], max: [f64; 3], class: usize },
    Sphere { center: [f64; 3], radius: f64, class: usize },
}

impl Primitive {
    pub fn class(&self) -> usize {
        match self {
            Primitive::Floor { class, .. }
            | Primitive::BoxSurface { class, .. }
            | Primitive::Sphere { class, .. } => *class,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Primitive::Floor { side, .. } => side * side,
            Primitive::BoxSurface { min, max, .. } => {
                let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2])
            }
            Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Primitive::Floor { center, side, z, .. } => [
                center[0] + (rng.gen::<f64>() - 0.5) * side,
                center[1] + (rng.gen::<f64>() - 0.5) * side,
                *z,
            ],
            Primitive::BoxSurface { min, max, .. } => {
                let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                let faces = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
                let total = 2.0 * (faces[0] + faces[1] + faces[2]);
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                let mut hi = true;
                'outer: for a in 0..3 {
                    for side in [false, true] {
                        if pick < faces[a] {
                            axis = a;
                            hi = side;
                            break 'outer;
                        }
                        pick -= faces[a];
                    }
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if hi { max[a] } else { min[a] }
                    } else {
                        min[a] + rng.gen::<f64>() * d[a]
                    };
                }
                p
            }
            Primitive::Sphere { center, radius, .. } => {
                let z = rng.gen::<f64>() * 2.0 - 1.0;
                let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                let r_xy = (1.0 - z * z).sqrt();
                [
                    center[0] + radius * r_xy * phi.cos(),
                    center[1] + radius * r_xy * phi.sin(),
                    center[2] + radius * z,
                ]
            }
        }
    }
}

/// Recipe for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_points: usize,
    pub extent: f64,
    pub primitives: Vec<Primitive>,
    /// Isotropic Gaussian position noise, meters.
    pub noise_sigma: f64,
    pub num_classes: usize,
}

impl SceneSpec {
    /// A floor, two boxes and a sphere spread over `extent` meters — one
    /// primitive per class for `num_classes` in 2..=4.
    pub fn standard(seed: u64, n_points: usize, extent: f64, num_classes: usize) -> Result<Self> {
        if !(2..=4).contains(&num_classes) {
            return Err(Error::invalid("standard scene supports 2..=4 classes"));
        }
        let e = extent;
        let mut primitives = vec![
            Primitive::Floor { center: [e / 2.0, e / 2.0], side: e, z: 0.0, class: 0 },
            Primitive::BoxSurface {
                min: [0.15 * e, 0.15 * e, 0.0],
                max: [0.4 * e, 0.4 * e, 0.3 * e],
                class: 1,
            },
        ];
        if num_classes >= 3 {
            primitives.push(Primitive::BoxSurface {
                min: [0.55 * e, 0.5 * e, 0.0],
                max: [0.9 * e, 0.75 * e, 0.2 * e],
                class: 2,
            });
        }
        if num_classes >= 4 {
            primitives.push(Primitive::Sphere {
                center: [0.3 * e, 0.75 * e, 0.2 * e],
                radius: 0.12 * e,
                class: 3,
            });
        }
        Ok(SceneSpec { seed, n_points, extent, primitives, noise_sigma: 0.01, num_classes })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 1 {
            return Err(Error::invalid("scene needs n_points >= 1"));
        }
        if !(self.extent > 0.0) {
            return Err(Error::invalid("scene extent must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("scene needs at least 2 classes"));
        }
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        for p in &self.primitives {
            if p.class() >= self.num_classes {
                return Err(Error::invalid("primitive class out of range"));
            }
        }
        Ok(())
    }
}

/// Fixed palette mapping class ids to color features.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.9, 0.1],
        [0.1, 0.1, 0.9],
        [0.8, 0.8, 0.1],
        [0.8, 0.1, 0.8],
        [0.1, 0.8, 0.8],
        [0.6, 0.4, 0.2],
        [0.5, 0.5, 0.5],
    ];
    PALETTE[class % PALETTE.len()]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both uniforms are drawn even though one output is used,
    // keeping the stream advance rate fixed.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample a labeled cloud from the spec: surfaces weighted by area, noisy
/// positions, features = xyz plus the class color triple.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let areas: Vec<f64> = spec.primitives.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(spec.n_points);
    let mut labels = Vec::with_capacity(spec.n_points);
    let mut colors = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = spec.primitives.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                chosen = i;
                break;
            }
            pick -= a;
        }
        let prim = &spec.primitives[chosen];
        let mut p = prim.sample_point(&mut rng);
        for c in p.iter_mut() {
            *c += spec.noise_sigma * gaussian(&mut rng);
        }
        positions.push(p);
        labels.push(prim.class());
        colors.push(class_color(prim.class()));
    }
    let features = Mat::from_fn(spec.n_points, 6, |i, c| {
        if c < 3 {
            positions[i][c]
        } else {
            colors[i][c - 3]
        }
    });
    PointCloud::new(positions, features, Some(labels), spec.num_classes)
}

// ------------------------------------------------------------------ file IO

/// Write the text format: header `N C num_classes`, then one line per point
/// `x y z f1 .. fC [label]`. Floats print in shortest round-trip form; the
/// label column is present exactly when num_classes > 0.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    let c = cloud.features.cols();
    let labeled = cloud.labels.is_some();
    writeln!(out, "{} {} {}", cloud.len(), c, if labeled { cloud.num_classes } else { 0 })
        .unwrap();
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        for v in cloud.features.row(i) {
            write!(out, " {v}").unwrap();
        }
        if let Some(ref l) = cloud.labels {
            write!(out, " {}", l[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse the text format back; inverse of [`save_cloud`] bit-for-bit.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(Error::parse(1, "header must be `N C num_classes`"));
    }
    let n: usize = head[0].parse().map_err(|_| Error::parse(1, "bad point count"))?;
    let c: usize = head[1].parse().map_err(|_| Error::parse(1, "bad feature count"))?;
    let num_classes: usize = head[2].parse().map_err(|_| Error::parse(1, "bad class count"))?;
    if n == 0 {
        return Err(Error::parse(1, "point count must be >= 1"));
    }
    if c < 3 {
        return Err(Error::parse(1, "feature count must be >= 3"));
    }
    let labeled = num_classes > 0;
    let want_fields = 3 + c + usize::from(labeled);

    let mut positions = Vec::with_capacity(n);
    let mut features = Mat::zeros(n, c);
    let mut labels = labeled.then(|| Vec::with_capacity(n));
    let mut read = 0usize;
    for (lineno0, line) in lines {
        let lineno = lineno0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        if read == n {
            return Err(Error::parse(lineno, "more data lines than the header declares"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want_fields {
            return Err(Error::parse(
                lineno,
                format!("expected {want_fields} fields, found {}", fields.len()),
            ));
        }
        let parse_f = |s: &str| -> Result<f64> {
            let v: f64 =
                s.parse().map_err(|_| Error::parse(lineno, format!("bad float {s:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, "non-finite value"));
            }
            Ok(v)
        };
        let p = [parse_f(fields[0])?, parse_f(fields[1])?, parse_f(fields[2])?];
        for (j, s) in fields[3..3 + c].iter().enumerate() {
            features.set(read, j, parse_f(s)?);
        }
        let frow = features.row(read);
        if frow[0] != p[0] || frow[1] != p[1] || frow[2] != p[2] {
            return Err(Error::parse(lineno, "feature columns 0..3 must copy the position"));
        }
        if let Some(ref mut ls) = labels {
            let l: usize =
                fields[want_fields - 1].parse().map_err(|_| Error::parse(lineno, "bad label"))?;
            if l >= num_classes {
                return Err(Error::parse(
                    lineno,
                    format!("label {l} out of range [0, {num_classes})"),
                ));
            }
            ls.push(l);
        }
        positions.push(p);
        read += 1;
    }
    if read != n {
        return Err(Error::parse(
            read + 2,
            format!("header declares {n} points but file holds {read}"),
        ));
    }
    PointCloud::new(positions, features, labels, num_classes)
}

// ------------------------------------------------------------- block split

/// One training block: a re-rooted sub-cloud plus the identity of each
/// sampled point in the source cloud.
#[derive(Debug, Clone)]
pub struct Block {
    pub cloud: PointCloud,
    /// Source-cloud index per block point (duplicates possible when a cell
    /// was sampled with replacement).
    pub point_indices: Vec<usize>,
    pub cell: [i64; 2],
}

/// Split the xy-plane into `block_size` cells and sample exactly `n_sample`
/// points per non-empty cell (without replacement when the cell is big
/// enough). Cells with fewer than 10 points are discarded. Block positions
/// are re-rooted at the cell's minimum corner; the original coordinates ride
/// along as three extra feature columns.
pub fn block_split(
    cloud: &PointCloud,
    block_size: f64,
    n_sample: usize,
    seed: u64,
) -> Result<Vec<Block>> {
    if !(block_size > 0.0) {
        return Err(Error::invalid("block_split: block_size must be positive"));
    }
    if n_sample < 1 {
        return Err(Error::invalid("block_split: n_sample must be >= 1"));
    }
    let mut cells: BTreeMap<[i64; 2], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [(p[0] / block_size).floor() as i64, (p[1] / block_size).floor() as i64];
        cells.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_orig = cloud.features.cols();
    let mut blocks = Vec::new();
    for (cell, members) in &cells {
        if members.len() < 10 {
            continue;
        }
        let chosen: Vec<usize> = if members.len() >= n_sample {
            let mut copy = members.clone();
            for j in 0..n_sample {
                let swap = rng.gen_range(j..copy.len());
                copy.swap(j, swap);
            }
            copy.truncate(n_sample);
            copy
        } else {
            (0..n_sample).map(|_| members[rng.gen_range(0..members.len())]).collect()
        };
        let min_z =
            members.iter().map(|&i| cloud.positions[i][2]).fold(f64::INFINITY, f64::min);
        let corner = [cell[0] as f64 * block_size, cell[1] as f64 * block_size, min_z];
        let positions: Vec<[f64; 3]> = chosen
            .iter()
            .map(|&i| {
                let p = cloud.positions[i];
                [p[0] - corner[0], p[1] - corner[1], p[2] - corner[2]]
            })
            .collect();
        // features: relative xyz, source attributes beyond xyz, original xyz
        let features = Mat::from_fn(n_sample, c_orig + 3, |r, c| {
            let src = chosen[r];
            if c < 3 {
                positions[r][c]
            } else if c < c_orig {
                cloud.features.at(src, c)
            } else {
                cloud.positions[src][c - c_orig]
            }
        });
        let labels = cloud.labels.as_ref().map(|l| chosen.iter().map(|&i| l[i]).collect());
        blocks.push(Block {
            cloud: PointCloud::new(positions, features, labels, cloud.num_classes)?,
            point_indices: chosen,
            cell: *cell,
        });
    }
    Ok(blocks)
}

// --------------------------------------------------------------- metrics

/// Row = ground truth class, column = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { counts: vec![0; num_classes * num_classes], num_classes }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::invalid("accumulate_metrics: length mismatch"));
        }
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::invalid("accumulate_metrics: class id out of range"));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Final metrics: overall accuracy, mean per-class accuracy over classes
/// present in the ground truth, and mean IoU over classes present in ground
/// truth or predictions. `per_class_iou` is None for classes absent from
/// both.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    /// The one-line structured form: `{"oa": .., "macc": .., "miou": ..,
    /// "per_class_iou": [..]}` with `null` for classes absent everywhere.
    pub fn to_json_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{{\"oa\": {}, \"macc\": {}, \"miou\": {}, \"per_class_iou\": [",
            self.oa, self.macc, self.miou
        )
        .unwrap();
        for (i, v) in self.per_class_iou.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            match v {
                Some(x) => write!(s, "{x}").unwrap(),
                None => s.push_str("null"),
            }
        }
        s.push_str("]}");
        s
    }
}

pub fn finalize_metrics(cm: &ConfusionMatrix) -> Metrics {
    let k = cm.num_classes();
    let total = cm.total();
    let mut trace = 0u64;
    let mut acc_sum = 0.0;
    let mut acc_classes = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_classes = 0usize;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.at(c, c);
        trace += tp;
        let row: u64 = (0..k).map(|j| cm.at(c, j)).sum();
        let col: u64 = (0..k).map(|j| cm.at(j, c)).sum();
        if row > 0 {
            acc_sum += tp as f64 / row as f64;
            acc_classes += 1;
        }
        let denom = row + col - tp; // TP + FP + FN
        if denom > 0 {
            let iou = tp as f64 / denom as f64;
            iou_sum += iou;
            iou_classes += 1;
            per_class.push(Some(iou));
        } else {
            per_class.push(None);
        }
    }
    Metrics {
        oa: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        macc: if acc_classes > 0 { acc_sum / acc_classes as f64 } else { 0.0 },
        miou: if iou_classes > 0 { iou_sum / iou_classes as f64 } else { 0.0 },
        per_class_iou: per_class,
    }
}
