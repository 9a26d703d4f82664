//! Dental Perception Dual Attention: per-level superpoints (TCP) whose
//! positions are softmax-interpolated from the level's points and whose
//! features mix global aggregation (GA, superpoints attending to points)
//! with layer attention (LayA, superpoints attending to the previous
//! level's superpoints) through a learnable sigmoid-bounded beta.
//!
//! Level 1 has no previous layer and uses the GA term alone.

use rand::Rng;

use crate::attention::{cwa_update, CwaParams, PointSet};
use crate::diffcore::{Affine, ParamBinding, ParamStore, TensorId};
use crate::error::{Error, Result};
use crate::geomkit::Coords;

pub const LEVELS: usize = 4;

/// Superpoints of one encoder level: positions [M, 3] and features [M, C],
/// both on the tape, plus the extracted position values.
#[derive(Debug, Clone)]
pub struct Superpoints {
    pub y: TensorId,
    pub h: TensorId,
    pub coords: Coords,
    pub level: usize,
    pub width: usize,
}

impl Superpoints {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn as_point_set(&self) -> PointSet {
        PointSet {
            x: self.y,
            f: self.h,
            coords: self.coords.clone(),
        }
    }
}

/// Learnable pieces of one DPDA block.
#[derive(Debug, Clone)]
pub struct DpdaParams {
    pub level: usize,
    pub width: usize,
    pub m: usize,
    /// Name of the learnable TCP feature embedding, [M, C].
    pub h_init: String,
    pub ga: CwaParams,
    /// Absent at level 1.
    pub laya: Option<CwaParams>,
    /// Projects previous-level superpoint features to this level's width.
    pub prev_proj: Option<Affine>,
    /// Raw mixing scalar; beta = sigmoid(raw). Absent at level 1.
    pub beta: Option<String>,
}

impl DpdaParams {
    pub fn new(
        prefix: &str,
        level: usize,
        width: usize,
        prev_width: Option<usize>,
        m: usize,
    ) -> Result<Self> {
        if !(1..=LEVELS).contains(&level) {
            return Err(Error::Contract {
                op: "dpda",
                msg: format!("level {level} outside 1..={LEVELS}"),
            });
        }
        if level > 1 && prev_width.is_none() {
            return Err(Error::Contract {
                op: "dpda",
                msg: format!("level {level} needs the previous level's width"),
            });
        }
        let with_prev = level > 1;
        Ok(DpdaParams {
            level,
            width,
            m,
            h_init: format!("{prefix}.h_init"),
            ga: CwaParams::new(&format!("{prefix}.ga"), width),
            laya: with_prev.then(|| CwaParams::new(&format!("{prefix}.laya"), width)),
            prev_proj: with_prev
                .then(|| Affine::new(format!("{prefix}.proj"), prev_width.unwrap(), width)),
            beta: with_prev.then(|| format!("{prefix}.beta")),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        // TCP embeddings start small so the interpolation softmax begins
        // near uniform.
        let bound = 0.1 * (1.0 / self.width as f64).sqrt();
        let h0: Vec<f64> = (0..self.m * self.width)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        store.register(&self.h_init, &[self.m, self.width], h0)?;
        self.ga.register(store, rng)?;
        if let Some(laya) = &self.laya {
            laya.register(store, rng)?;
        }
        if let Some(proj) = &self.prev_proj {
            proj.register(store, rng)?;
        }
        if let Some(beta) = &self.beta {
            store.register_scalar(beta, 0.0)?; // sigmoid(0) = 0.5
        }
        Ok(())
    }
}

/// TCP positions from features: `Y = softmax(H F^T) X`, a row-wise convex
/// combination of the point coordinates. Differentiable in H and F.
pub fn interpolate_positions(
    b: &mut ParamBinding,
    h: TensorId,
    f: TensorId,
    x: TensorId,
) -> Result<TensorId> {
    let (hs, fs) = (b.tape.shape(h).to_vec(), b.tape.shape(f).to_vec());
    if hs.len() != 2 || fs.len() != 2 || hs[1] != fs[1] {
        return Err(Error::Dimension {
            op: "interpolate_positions",
            lhs: hs,
            rhs: fs,
        });
    }
    let ft = b.tape.transpose(f)?;
    let logits = b.tape.matmul(h, ft)?;
    let w = b.tape.softmax(logits, 1)?;
    b.tape.matmul(w, x)
}

/// One DPDA step: initialize TCP from the level embedding, interpolate
/// positions, mix GA and LayA features, and re-interpolate.
pub fn dpda_step(
    b: &mut ParamBinding,
    params: &DpdaParams,
    z_prev: Option<&Superpoints>,
    p: &PointSet,
) -> Result<Superpoints> {
    if p.is_empty() {
        return Err(Error::Size {
            op: "dpda_step",
            msg: "empty point set".to_string(),
        });
    }
    if params.level > 1 && z_prev.is_none() {
        return Err(Error::Contract {
            op: "dpda_step",
            msg: format!("level {} requires previous superpoints", params.level),
        });
    }

    let h0 = b.param(&params.h_init)?;
    let y0 = interpolate_positions(b, h0, p.f, p.x)?;
    let z0 = Superpoints {
        y: y0,
        h: h0,
        coords: Coords::from_flat(b.tape.value(y0)),
        level: params.level,
        width: params.width,
    };

    let ga = cwa_update(b, &params.ga, &z0.as_point_set(), p)?;

    let h_new = match (&params.laya, &params.beta, z_prev) {
        (Some(laya), Some(beta_name), Some(prev)) => {
            let proj = params.prev_proj.as_ref().expect("projection registered");
            let prev_f = proj.apply(b, prev.h)?;
            let prev_set = PointSet {
                x: prev.y,
                f: prev_f,
                coords: prev.coords.clone(),
            };
            let laya_out = cwa_update(b, laya, &z0.as_point_set(), &prev_set)?;
            let raw = b.param(beta_name)?;
            let beta = b.tape.sigmoid(raw);
            let one_minus = b.tape.affine_scalar(beta, -1.0, 1.0);
            let ga_term = b.tape.scale_by(ga, beta)?;
            let laya_term = b.tape.scale_by(laya_out, one_minus)?;
            b.tape.add(ga_term, laya_term)?
        }
        _ => ga,
    };

    let y_new = interpolate_positions(b, h_new, p.f, p.x)?;
    Ok(Superpoints {
        y: y_new,
        h: h_new,
        coords: Coords::from_flat(b.tape.value(y_new)),
        level: params.level,
        width: params.width,
    })
}

/// Refined TCP coordinates of every level, in level order.
pub fn tcp_all_levels(levels: &[Superpoints]) -> Vec<Coords> {
    levels.iter().map(|z| z.coords.clone()).collect()
}

/// Writes superpoint dump lines `level m y0 y1 y2`, one per superpoint.
pub fn render_tcp_dump(levels: &[Coords]) -> String {
    let mut out = String::from("# level m y0 y1 y2\n");
    for (li, coords) in levels.iter().enumerate() {
        for (mi, p) in coords.iter().enumerate() {
            out.push_str(&format!("{} {} {} {} {}\n", li + 1, mi, p[0], p[1], p[2]));
        }
    }
    out
}
