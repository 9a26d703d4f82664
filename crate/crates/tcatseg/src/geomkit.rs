//! Non-differentiable geometric kernels: sampling, neighborhood queries,
//! interpolation weights, and label propagation.
//!
//! Everything here is brute force (O(n*m) scans, no spatial index) — at
//! desk scale that is fast enough and keeps the oracle tests trivial.

use crate::error::{Error, Result};

/// Point coordinates in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Coords {
    pts: Vec<[f64; 3]>,
}

/// Rigid normalization `x' = (x - center) / scale`.
#[derive(Debug, Clone, Copy)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl Coords {
    pub fn new(pts: Vec<[f64; 3]>) -> Self {
        Coords { pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.pts[i]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.pts
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64; 3]> {
        self.pts.iter()
    }

    /// Flat row-major copy, e.g. for tape constants.
    pub fn flat(&self) -> Vec<f64> {
        self.pts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 3, 0);
        Coords {
            pts: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Coords {
        Coords {
            pts: indices.iter().map(|&i| self.pts[i]).collect(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.pts {
            c[0] += p[0];
            c[1] += p[1];
            c[2] += p[2];
        }
        let n = self.pts.len().max(1) as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Per-dimension (min, max) bounds.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.pts {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Center at the centroid and scale the largest radius to 1.
    pub fn normalize(&self) -> (Coords, NormalizeTransform) {
        let center = self.centroid();
        let mut max_r2 = 0.0f64;
        for p in &self.pts {
            max_r2 = max_r2.max(dist2(*p, center));
        }
        let scale = if max_r2 > 0.0 { max_r2.sqrt() } else { 1.0 };
        let t = NormalizeTransform { center, scale };
        let pts = self.pts.iter().map(|&p| t.apply(p)).collect();
        (Coords { pts }, t)
    }

    pub fn all_finite(&self) -> bool {
        self.pts.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Per-query neighbor lists padded to a rectangular K.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    pub k: usize,
    /// q * k indices into the source set; padding repeats the first entry.
    pub indices: Vec<usize>,
    /// Number of genuine (pre-padding) neighbors per query.
    pub counts: Vec<usize>,
    /// True where the radius produced no hits and the nearest point was
    /// substituted.
    pub fallback: Vec<bool>,
}

impl NeighborTable {
    pub fn queries(&self) -> usize {
        self.counts.len()
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    /// Full-attention table: every query lists every source index.
    pub fn full(queries: usize, source_len: usize) -> Self {
        let mut indices = Vec::with_capacity(queries * source_len);
        for _ in 0..queries {
            indices.extend(0..source_len);
        }
        NeighborTable {
            k: source_len,
            indices,
            counts: vec![source_len; queries],
            fallback: vec![false; queries],
        }
    }
}

/// Greedy max-min-distance subset selection. The first pick is
/// `seed_index`; ties resolve to the lowest candidate index.
pub fn farthest_point_sample(c: &Coords, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = c.len();
    if m == 0 || m > n {
        return Err(Error::Size {
            op: "farthest_point_sample",
            msg: format!("requested {m} samples from {n} points"),
        });
    }
    if seed_index >= n {
        return Err(Error::Index {
            op: "farthest_point_sample",
            index: seed_index,
            len: n,
        });
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    chosen.push(current);
    for _ in 1..m {
        let cp = c.get(current);
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for i in 0..n {
            let d2 = dist2(c.get(i), cp);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        current = best_i;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Covering radius of a sample: max distance from any point to its nearest
/// sampled point.
pub fn covering_radius(c: &Coords, sample: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..c.len() {
        let mut best = f64::INFINITY;
        for &s in sample {
            best = best.min(dist2(c.get(i), c.get(s)));
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Fixed-radius neighborhood search capped at K, nearest first. An empty
/// ball falls back to the single nearest source point (flagged); short
/// rows are padded by repeating their first entry.
pub fn ball_query(queries: &Coords, source: &Coords, radius: f64, k: usize) -> Result<NeighborTable> {
    if source.is_empty() {
        return Err(Error::Size {
            op: "ball_query",
            msg: "empty source set".to_string(),
        });
    }
    if radius <= 0.0 || k == 0 {
        return Err(Error::Contract {
            op: "ball_query",
            msg: format!("radius {radius}, k {k}"),
        });
    }
    let r2 = radius * radius;
    let q = queries.len();
    let mut indices = Vec::with_capacity(q * k);
    let mut counts = Vec::with_capacity(q);
    let mut fallback = Vec::with_capacity(q);
    for qi in 0..q {
        let qp = queries.get(qi);
        let mut hits: Vec<(f64, usize)> = Vec::new();
        let mut nearest = (f64::INFINITY, 0usize);
        for si in 0..source.len() {
            let d2 = dist2(qp, source.get(si));
            if d2 < nearest.0 {
                nearest = (d2, si);
            }
            if d2 <= r2 {
                hits.push((d2, si));
            }
        }
        let fell_back = hits.is_empty();
        if fell_back {
            hits.push(nearest);
        }
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        hits.truncate(k);
        counts.push(hits.len());
        fallback.push(fell_back);
        let first = hits[0].1;
        for j in 0..k {
            indices.push(hits.get(j).map_or(first, |h| h.1));
        }
    }
    Ok(NeighborTable {
        k,
        indices,
        counts,
        fallback,
    })
}

/// Exact k nearest neighbors by Euclidean distance, ties by lowest index.
pub fn knn(queries: &Coords, source: &Coords, k: usize) -> Result<NeighborTable> {
    if k == 0 || k > source.len() {
        return Err(Error::Size {
            op: "knn",
            msg: format!("k = {k} with {} source points", source.len()),
        });
    }
    let q = queries.len();
    let mut indices = Vec::with_capacity(q * k);
    for qi in 0..q {
        let qp = queries.get(qi);
        let mut all: Vec<(f64, usize)> = (0..source.len())
            .map(|si| (dist2(qp, source.get(si)), si))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for j in 0..k {
            indices.push(all[j].1);
        }
    }
    Ok(NeighborTable {
        k,
        indices,
        counts: vec![k; q],
        fallback: vec![false; q],
    })
}

/// Inverse-distance weights for three interpolation neighbors, summing to
/// one. A query coincident with a neighbor (d < 1e-8) takes weight 1 there.
pub fn idw_weights(query: [f64; 3], neighbors: &[[f64; 3]; 3]) -> [f64; 3] {
    let d: Vec<f64> = neighbors.iter().map(|&n| dist2(query, n).sqrt()).collect();
    for (i, &di) in d.iter().enumerate() {
        if di < 1e-8 {
            let mut w = [0.0; 3];
            w[i] = 1.0;
            return w;
        }
    }
    let inv: Vec<f64> = d.iter().map(|&di| 1.0 / (di + 1e-8)).collect();
    let s: f64 = inv.iter().sum();
    [inv[0] / s, inv[1] / s, inv[2] / s]
}

/// Majority label among the 5 nearest labeled points (fewer when the
/// labeled set is smaller); ties resolve to the smallest label id.
pub fn propagate_labels(labeled: &Coords, labels: &[usize], targets: &Coords) -> Result<Vec<usize>> {
    if labeled.is_empty() {
        return Err(Error::Size {
            op: "propagate_labels",
            msg: "empty labeled set".to_string(),
        });
    }
    if labeled.len() != labels.len() {
        return Err(Error::Contract {
            op: "propagate_labels",
            msg: format!("{} points vs {} labels", labeled.len(), labels.len()),
        });
    }
    let k = 5.min(labeled.len());
    let table = knn(targets, labeled, k)?;
    let mut out = Vec::with_capacity(targets.len());
    for qi in 0..targets.len() {
        let mut votes: Vec<(usize, usize)> = Vec::new(); // (label, count)
        for &ni in table.row(qi) {
            let l = labels[ni];
            match votes.iter_mut().find(|(vl, _)| *vl == l) {
                Some((_, c)) => *c += 1,
                None => votes.push((l, 1)),
            }
        }
        votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(votes[0].0);
    }
    Ok(out)
}
