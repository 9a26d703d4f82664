//! Channel-Wise Attention: vector attention producing a separate softmax
//! weight per feature channel between a query and its keys.
//!
//! Weights: `C(q,k) = softmax_k( w_gate( (f_q - f_k) + w_pos(x_q - x_k) ) )`,
//! taken over keys independently per channel. Updates:
//! `f_q' = sum_k C(q,k) ⊙ (f_q - f_k)` — the value path is the plain
//! feature difference, with no positional term.

use rand::Rng;

use crate::diffcore::{Mlp, ParamBinding, ParamStore, TensorId};
use crate::error::{Error, Result};
use crate::geomkit::{Coords, NeighborTable};

/// Learnable pieces of one CWA operator: a positional encoder R^3 -> R^C
/// and the channel-weight map R^C -> R^C.
#[derive(Debug, Clone)]
pub struct CwaParams {
    pub w_pos: Mlp,
    pub w_gate: Mlp,
    pub width: usize,
}

impl CwaParams {
    /// Standard form: both branches are 2-layer MLPs with hidden width C.
    pub fn new(prefix: &str, width: usize) -> Self {
        CwaParams {
            w_pos: Mlp::new(format!("{prefix}.pos"), vec![3, width, width]),
            w_gate: Mlp::new(format!("{prefix}.gate"), vec![width, width, width]),
            width,
        }
    }

    /// Custom branch layouts (used by tests with single-layer maps).
    pub fn with_mlps(w_pos: Mlp, w_gate: Mlp, width: usize) -> Self {
        CwaParams { w_pos, w_gate, width }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.w_pos.register(store, rng)?;
        self.w_gate.register(store, rng)
    }
}

/// A point set bound on the tape: coordinates, features, and the plain
/// coordinate values for geometry queries.
#[derive(Debug, Clone)]
pub struct PointSet {
    /// Coordinates, shape [n, 3]. Constant for real points, differentiable
    /// for superpoints.
    pub x: TensorId,
    /// Features, shape [n, C].
    pub f: TensorId,
    /// Coordinate values mirroring `x`.
    pub coords: Coords,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Binds plain coordinates + features as constants/tensors on the tape.
    pub fn from_coords(b: &mut ParamBinding, coords: &Coords, f: TensorId) -> Result<PointSet> {
        let x = b.tape.constant(&[coords.len(), 3], coords.flat())?;
        Ok(PointSet {
            x,
            f,
            coords: coords.clone(),
        })
    }
}

fn width_of(b: &ParamBinding, f: TensorId) -> usize {
    *b.tape.shape(f).last().unwrap_or(&0)
}

fn check_widths(b: &ParamBinding, params: &CwaParams, q: &PointSet, k: &PointSet) -> Result<()> {
    let qw = width_of(b, q.f);
    let kw = width_of(b, k.f);
    if qw != kw || qw != params.width {
        return Err(Error::Dimension {
            op: "cwa",
            lhs: b.tape.shape(q.f).to_vec(),
            rhs: b.tape.shape(k.f).to_vec(),
        });
    }
    Ok(())
}

/// Deduplicated key list per query; keeps first-occurrence (nearest-first)
/// order so ball-query padding cannot skew the softmax.
fn dedup_lists(table: &NeighborTable, key_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut lists = Vec::with_capacity(table.queries());
    for qi in 0..table.queries() {
        let mut seen = Vec::new();
        for &idx in table.row(qi) {
            if idx >= key_len {
                return Err(Error::Index {
                    op: "cwa_update_masked",
                    index: idx,
                    len: key_len,
                });
            }
            if !seen.contains(&idx) {
                seen.push(idx);
            }
        }
        lists.push(seen);
    }
    Ok(lists)
}

/// Shared core: builds the flattened (query, key) pair batch, evaluates
/// gate logits, segment-softmaxes per channel, and reduces. Returns the
/// per-pair weights and the per-query update.
fn cwa_core(
    b: &mut ParamBinding,
    params: &CwaParams,
    q: &PointSet,
    k: &PointSet,
    lists: &[Vec<usize>],
) -> Result<(TensorId, TensorId)> {
    let mut flat_q = Vec::new();
    let mut flat_k = Vec::new();
    let mut segments = Vec::with_capacity(lists.len());
    for (qi, list) in lists.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Size {
                op: "cwa",
                msg: format!("query {qi} has no keys"),
            });
        }
        segments.push(list.len());
        for &ki in list {
            flat_q.push(qi);
            flat_k.push(ki);
        }
    }

    let qf = b.tape.gather_rows(q.f, &flat_q)?;
    let kf = b.tape.gather_rows(k.f, &flat_k)?;
    let df = b.tape.sub(qf, kf)?;

    let qx = b.tape.gather_rows(q.x, &flat_q)?;
    let kx = b.tape.gather_rows(k.x, &flat_k)?;
    let dx = b.tape.sub(qx, kx)?;

    let pos = params.w_pos.apply(b, dx)?;
    let mixed = b.tape.add(df, pos)?;
    let logits = params.w_gate.apply(b, mixed)?;
    let weights = b.tape.segment_softmax(logits, &segments)?;

    let weighted = b.tape.mul(weights, df)?;
    let out = b.tape.segment_sum(weighted, &segments)?;
    Ok((weights, out))
}

/// Channel weights of one query against every key: shape [k, C], each
/// channel's column summing to 1.
pub fn cwa_weights(
    b: &mut ParamBinding,
    params: &CwaParams,
    q: &PointSet,
    query_row: usize,
    k: &PointSet,
) -> Result<TensorId> {
    if k.is_empty() {
        return Err(Error::Size {
            op: "cwa_weights",
            msg: "empty key set".to_string(),
        });
    }
    if query_row >= q.len() {
        return Err(Error::Index {
            op: "cwa_weights",
            index: query_row,
            len: q.len(),
        });
    }
    check_widths(b, params, q, k)?;
    let single = PointSet {
        x: b.tape.gather_rows(q.x, &[query_row])?,
        f: b.tape.gather_rows(q.f, &[query_row])?,
        coords: q.coords.gather(&[query_row]),
    };
    let lists = vec![(0..k.len()).collect::<Vec<_>>()];
    let (weights, _) = cwa_core(b, params, &single, k, &lists)?;
    Ok(weights)
}

/// Cross-attention update of every query against every key: [q, C].
pub fn cwa_update(
    b: &mut ParamBinding,
    params: &CwaParams,
    q: &PointSet,
    k: &PointSet,
) -> Result<TensorId> {
    if k.is_empty() {
        return Err(Error::Size {
            op: "cwa_update",
            msg: "empty key set".to_string(),
        });
    }
    check_widths(b, params, q, k)?;
    let lists: Vec<Vec<usize>> = (0..q.len()).map(|_| (0..k.len()).collect()).collect();
    let (_, out) = cwa_core(b, params, q, k, &lists)?;
    Ok(out)
}

/// Neighborhood-restricted update: each query attends only to its listed
/// neighbors; repeated indices from padding contribute once.
pub fn cwa_update_masked(
    b: &mut ParamBinding,
    params: &CwaParams,
    q: &PointSet,
    k: &PointSet,
    table: &NeighborTable,
) -> Result<TensorId> {
    if k.is_empty() {
        return Err(Error::Size {
            op: "cwa_update_masked",
            msg: "empty key set".to_string(),
        });
    }
    if table.queries() != q.len() {
        return Err(Error::Contract {
            op: "cwa_update_masked",
            msg: format!("{} table rows for {} queries", table.queries(), q.len()),
        });
    }
    check_widths(b, params, q, k)?;
    let lists = dedup_lists(table, k.len())?;
    let (_, out) = cwa_core(b, params, q, k, &lists)?;
    Ok(out)
}
