//! Superpoint Guided Dual Attention: per-point fusion of a ball-query
//! neighborhood branch (LocA) with attention over the level's superpoints
//! (SG), mixed by a learnable sigmoid-bounded alpha per encoder level.

use rand::Rng;

use crate::attention::{cwa_update, cwa_update_masked, CwaParams, PointSet};
use crate::diffcore::{ParamBinding, ParamStore, TensorId};
use crate::dpda::Superpoints;
use crate::error::{Error, Result};
use crate::geomkit::ball_query;

/// Learnable pieces of one SGDA block.
#[derive(Debug, Clone)]
pub struct SgdaParams {
    pub loc: CwaParams,
    pub sg: CwaParams,
    /// Raw fusion scalar; alpha = sigmoid(raw).
    pub alpha: String,
    pub radius: f64,
    pub k: usize,
}

impl SgdaParams {
    pub fn new(prefix: &str, width: usize, radius: f64, k: usize) -> Self {
        SgdaParams {
            loc: CwaParams::new(&format!("{prefix}.loc"), width),
            sg: CwaParams::new(&format!("{prefix}.sg"), width),
            alpha: format!("{prefix}.alpha"),
            radius,
            k,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.loc.register(store, rng)?;
        self.sg.register(store, rng)?;
        store.register_scalar(&self.alpha, 0.0) // sigmoid(0) = 0.5
    }
}

/// LocA: each downsampled point attends to its ball-query neighborhood in
/// the previous level. `p_prev` must already carry lifted (width-matched)
/// features.
pub fn local_branch(
    b: &mut ParamBinding,
    params: &SgdaParams,
    p_i: &PointSet,
    p_prev: &PointSet,
) -> Result<TensorId> {
    let table = ball_query(&p_i.coords, &p_prev.coords, params.radius, params.k)?;
    cwa_update_masked(b, &params.loc, p_i, p_prev, &table)
}

/// SG: each point attends to all M superpoints of the level.
pub fn global_branch(
    b: &mut ParamBinding,
    params: &SgdaParams,
    p_i: &PointSet,
    z: &Superpoints,
) -> Result<TensorId> {
    cwa_update(b, &params.sg, p_i, &z.as_point_set())
}

/// `fuse = alpha * global + (1 - alpha) * local` with alpha = sigmoid(raw).
pub fn sgda_fuse(
    b: &mut ParamBinding,
    alpha_param: &str,
    local: TensorId,
    global: TensorId,
) -> Result<TensorId> {
    if b.tape.shape(local) != b.tape.shape(global) {
        return Err(Error::Dimension {
            op: "sgda_fuse",
            lhs: b.tape.shape(local).to_vec(),
            rhs: b.tape.shape(global).to_vec(),
        });
    }
    let raw = b.param(alpha_param)?;
    let alpha = b.tape.sigmoid(raw);
    let one_minus = b.tape.affine_scalar(alpha, -1.0, 1.0);
    let g = b.tape.scale_by(global, alpha)?;
    let l = b.tape.scale_by(local, one_minus)?;
    b.tape.add(g, l)
}
