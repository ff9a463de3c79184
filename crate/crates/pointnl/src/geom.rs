//! Deterministic geometric kernels: canonical ordering, farthest point
//! sampling, k-nearest neighbors, voxel-block superpoint partitioning and
//! within-superpoint centroid sampling.
//!
//! Every operation is a pure function of its inputs. Ties anywhere are broken
//! by the smallest index so results are bit-identical across runs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// A point cloud: positions in meters, per-point features (first three
/// columns are a copy of the positions), optional class labels.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    /// Number of classes labels are drawn from; 0 when unlabeled.
    pub num_classes: usize,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        features: Mat,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if features.rows() != n {
            return Err(Error::invalid(format!(
                "feature row count {} != point count {n}",
                features.rows()
            )));
        }
        if features.cols() < 3 {
            return Err(Error::invalid("features must have at least 3 columns (xyz)"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("positions contain non-finite entries"));
        }
        features.check_finite("features")?;
        for (i, p) in positions.iter().enumerate() {
            let f = features.row(i);
            if f[0] != p[0] || f[1] != p[1] || f[2] != p[2] {
                return Err(Error::invalid(format!(
                    "feature columns 0..3 of point {i} do not copy its position"
                )));
            }
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::invalid("label count != point count"));
            }
            if num_classes == 0 {
                return Err(Error::invalid("labeled cloud needs num_classes >= 1"));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range [0, {num_classes})"
                )));
            }
        }
        Ok(PointCloud { positions, features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorder the cloud by `perm`: point k of the result is point `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        let positions: Vec<[f64; 3]> = perm.iter().map(|&i| self.positions[i]).collect();
        let features = self.features.gather_rows(perm);
        let labels = self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect());
        PointCloud { positions, features, labels, num_classes: self.num_classes }
    }
}

/// Points selected by farthest point sampling, in greedy selection order.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    /// Indices into the parent point list.
    pub indices: Vec<usize>,
    /// Copies of the selected positions, row i = parent position at indices[i].
    pub positions: Vec<[f64; 3]>,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-centroid neighbor lists; each row holds K parent-cloud indices sorted
/// ascending (canonical form).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub indices: Vec<Vec<usize>>,
    pub k: usize,
}

/// Total assignment of points to voxel-block superpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointPartition {
    /// Superpoint id per point, ids dense in [0, n_sp).
    pub assignment: Vec<usize>,
    /// Point indices per superpoint; disjoint, covering, each non-empty.
    pub members: Vec<Vec<usize>>,
    pub cell_size: f64,
}

impl SuperpointPartition {
    pub fn n_sp(&self) -> usize {
        self.members.len()
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Permutation sorting points lexicographically by (x, y, z, original index).
///
/// The result maps sorted slot -> original index. Applying it to an already
/// sorted cloud yields the identity.
pub fn canonical_order(positions: &[[f64; 3]]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..positions.len()).collect();
    perm.sort_by(|&a, &b| {
        let pa = &positions[a];
        let pb = &positions[b];
        pa[0].total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
            .then(a.cmp(&b))
    });
    perm
}

/// Greedy farthest point sampling.
///
/// The first centroid is index 0 of the (canonically ordered) input; each
/// subsequent pick maximizes the minimum distance to the chosen set, ties
/// going to the smallest index. Returns exactly `m` distinct indices.
pub fn farthest_point_sample(positions: &[[f64; 3]], m: usize) -> Result<CentroidSet> {
    let n = positions.len();
    if m < 1 || m > n {
        return Err(Error::invalid(format!("fps: m = {m} out of range [1, {n}]")));
    }
    let mut indices = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = 0usize;
    indices.push(cur);
    for _ in 1..m {
        let p = &positions[cur];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = sq_dist(&positions[i], p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
        indices.push(cur);
    }
    let positions_out = indices.iter().map(|&i| positions[i]).collect();
    Ok(CentroidSet { indices, positions: positions_out })
}

/// Exhaustive k-nearest-neighbor search on xyz.
///
/// Distance ties break toward the smaller index; each row is re-sorted
/// ascending by index afterwards. The query point itself is eligible.
pub fn knn(positions: &[[f64; 3]], queries: &CentroidSet, k: usize) -> Result<NeighborTable> {
    let n = positions.len();
    if k < 1 || k > n {
        return Err(Error::invalid(format!("knn: k = {k} out of range [1, {n}]")));
    }
    let mut rows = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in &queries.positions {
        scratch.clear();
        scratch.extend((0..n).map(|i| (sq_dist(&positions[i], q), i)));
        scratch.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut row: Vec<usize> = scratch[..k].iter().map(|&(_, i)| i).collect();
        row.sort_unstable();
        rows.push(row);
    }
    Ok(NeighborTable { indices: rows, k })
}

/// Grid-accelerated kNN, result-identical to [`knn`].
///
/// Buckets points into a uniform grid and expands rings of cells around each
/// query until the k-th best distance cannot improve. Falls back to scanning
/// everything for pathological cell sizes.
pub fn knn_grid(
    positions: &[[f64; 3]],
    queries: &CentroidSet,
    k: usize,
    cell_size: f64,
) -> Result<NeighborTable> {
    let n = positions.len();
    if k < 1 || k > n {
        return Err(Error::invalid(format!("knn: k = {k} out of range [1, {n}]")));
    }
    if !(cell_size > 0.0) {
        return Err(Error::invalid("knn_grid: cell_size must be positive"));
    }
    let key = |p: &[f64; 3]| -> [i64; 3] {
        [
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
            (p[2] / cell_size).floor() as i64,
        ]
    };
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let lo = cells.keys().fold([i64::MAX; 3], |a, k| [a[0].min(k[0]), a[1].min(k[1]), a[2].min(k[2])]);
    let hi = cells.keys().fold([i64::MIN; 3], |a, k| [a[0].max(k[0]), a[1].max(k[1]), a[2].max(k[2])]);

    let mut rows = Vec::with_capacity(queries.len());
    for q in &queries.positions {
        let qk = key(q);
        // Largest Chebyshev ring that can still contain an occupied cell.
        let max_ring = (0..3)
            .map(|a| (qk[a] - lo[a]).abs().max((qk[a] - hi[a]).abs()))
            .max()
            .unwrap();
        // k best (dist, index) pairs kept sorted; k is small here.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let push = |best: &mut Vec<(f64, usize)>, d: f64, i: usize| {
            let entry = (d, i);
            let pos = best
                .binary_search_by(|e| e.0.total_cmp(&entry.0).then(e.1.cmp(&entry.1)))
                .unwrap_err();
            if pos < k {
                best.insert(pos, entry);
                best.truncate(k);
            }
        };
        for ring in 0..=max_ring {
            // Points in rings > ring sit at least ring*cell_size away; stop
            // strictly below that bound so index tie-breaks stay exact.
            if ring > 0 {
                let lower = ((ring - 1) as f64 * cell_size).powi(2);
                if best.len() == k && best[k - 1].0 < lower {
                    break;
                }
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let ck = [qk[0] + dx, qk[1] + dy, qk[2] + dz];
                        if let Some(members) = cells.get(&ck) {
                            for &i in members {
                                push(&mut best, sq_dist(&positions[i], q), i);
                            }
                        }
                    }
                }
            }
        }
        let mut row: Vec<usize> = best.into_iter().map(|(_, i)| i).collect();
        row.sort_unstable();
        rows.push(row);
    }
    Ok(NeighborTable { indices: rows, k })
}

/// Assign every point to the voxel cell floor(position / cell_size).
///
/// Occupied cells become superpoints; when more than `cap` cells are
/// occupied, the `cap` most populous survive (ties to the lexicographically
/// smallest cell coordinate) and every remaining point moves to the kept
/// superpoint with the nearest member-centroid. Ids are dense, ordered by
/// cell coordinate.
pub fn voxel_partition(
    positions: &[[f64; 3]],
    cell_size: f64,
    cap: usize,
) -> Result<SuperpointPartition> {
    if !(cell_size > 0.0) {
        return Err(Error::invalid("voxel_partition: cell_size must be positive"));
    }
    if cap < 1 {
        return Err(Error::invalid("voxel_partition: cap must be >= 1"));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let key = [
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
            (p[2] / cell_size).floor() as i64,
        ];
        cells.entry(key).or_default().push(i);
    }

    let kept: Vec<(&[i64; 3], &Vec<usize>)> = if cells.len() <= cap {
        cells.iter().collect()
    } else {
        let mut ranked: Vec<(&[i64; 3], &Vec<usize>)> = cells.iter().collect();
        // Most populous first; BTreeMap order gives the lexicographic tie-break.
        ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
        ranked.truncate(cap);
        ranked.sort_by(|a, b| a.0.cmp(b.0));
        ranked
    };

    let mut members: Vec<Vec<usize>> = kept.iter().map(|(_, v)| (*v).clone()).collect();
    let kept_keys: std::collections::BTreeSet<[i64; 3]> =
        kept.iter().map(|(k, _)| **k).collect();

    if cells.len() > cap {
        let means: Vec<[f64; 3]> = members
            .iter()
            .map(|m| {
                let mut acc = [0.0; 3];
                for &i in m {
                    for a in 0..3 {
                        acc[a] += positions[i][a];
                    }
                }
                let inv = 1.0 / m.len() as f64;
                [acc[0] * inv, acc[1] * inv, acc[2] * inv]
            })
            .collect();
        for (key, pts) in &cells {
            if kept_keys.contains(key) {
                continue;
            }
            for &i in pts {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (s, mean) in means.iter().enumerate() {
                    let d = sq_dist(&positions[i], mean);
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                members[best].push(i);
            }
        }
        for m in members.iter_mut() {
            m.sort_unstable();
        }
    }

    let mut assignment = vec![usize::MAX; positions.len()];
    for (s, m) in members.iter().enumerate() {
        for &i in m {
            assignment[i] = s;
        }
    }
    debug_assert!(assignment.iter().all(|&s| s != usize::MAX));
    Ok(SuperpointPartition { assignment, members, cell_size })
}

/// For each centroid, draw `k_sp` peer centroids from its own superpoint:
/// without replacement when the superpoint holds at least `k_sp` centroids,
/// with replacement otherwise. Entries index the centroid list, not the
/// parent cloud. Deterministic given `rng_seed`.
///
/// `centroid_point_indices[i]` is the parent-cloud index of centroid i, used
/// to look up its superpoint.
pub fn sample_superpoint_centroids(
    partition: &SuperpointPartition,
    centroid_point_indices: &[usize],
    k_sp: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k_sp < 1 {
        return Err(Error::invalid("sample_superpoint_centroids: k_sp must be >= 1"));
    }
    let mut by_sp: Vec<Vec<usize>> = vec![Vec::new(); partition.n_sp()];
    for (ci, &pi) in centroid_point_indices.iter().enumerate() {
        let sp = *partition
            .assignment
            .get(pi)
            .ok_or_else(|| Error::invalid(format!("centroid {ci} points outside the cloud")))?;
        by_sp[sp].push(ci);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rows = Vec::with_capacity(centroid_point_indices.len());
    for (ci, &pi) in centroid_point_indices.iter().enumerate() {
        let pool = &by_sp[partition.assignment[pi]];
        if pool.is_empty() {
            return Err(Error::degenerate(format!(
                "superpoint of centroid {ci} contains no sampled centroids"
            )));
        }
        let row = if pool.len() >= k_sp {
            // Partial Fisher-Yates: first k_sp slots of a shuffled copy.
            let mut copy = pool.clone();
            for j in 0..k_sp {
                let swap = rng.gen_range(j..copy.len());
                copy.swap(j, swap);
            }
            copy.truncate(k_sp);
            copy
        } else {
            (0..k_sp).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        rows.push(row);
    }
    Ok(rows)
}
