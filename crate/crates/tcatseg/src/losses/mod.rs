//! Training losses: Hungarian-matched smooth-L1 superpoint supervision,
//! symmetric Chamfer offset loss, cross-entropy segmentation loss, and
//! their unweighted sum.
//!
//! Assignment pairs and Chamfer nearest-neighbor indices are computed from
//! forward values and treated as constants during backward.

pub mod hungarian;

pub use hungarian::{hungarian, Assignment};

use crate::diffcore::{ParamBinding, TensorId};
use crate::error::{Error, Result};
use crate::geomkit::{dist2, Coords};

/// Which encoder levels contribute to the superpoint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpLossLevels {
    All,
    Last,
}

/// Per-component loss values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub seg: f64,
    pub tcp: f64,
    pub offset: f64,
    pub total: f64,
}

/// Smooth-L1 magnitude summed over coordinates (threshold 1).
pub fn smooth_l1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

/// Hungarian-matched smooth-L1 between predicted TCP positions and
/// ground-truth tooth centroids, summed over the configured levels.
/// `tcp_levels` pairs each level's position tensor [M, 3] with its values.
pub fn loss_tcp(
    b: &mut ParamBinding,
    tcp_levels: &[(TensorId, Coords)],
    gt_centroids: &Coords,
    mode: TcpLossLevels,
) -> Result<TensorId> {
    if tcp_levels.is_empty() {
        return Err(Error::Validation("loss_tcp: no TCP levels".to_string()));
    }
    let t = gt_centroids.len();
    if t == 0 {
        return Err(Error::Validation("loss_tcp: no ground-truth centroids".to_string()));
    }
    let selected: Vec<&(TensorId, Coords)> = match mode {
        TcpLossLevels::All => tcp_levels.iter().collect(),
        TcpLossLevels::Last => vec![tcp_levels.last().unwrap()],
    };

    let mut total: Option<TensorId> = None;
    for (y, coords) in selected {
        let m = coords.len();
        if t > m {
            return Err(Error::Validation(format!(
                "loss_tcp: more teeth than superpoints ({t} > {m})"
            )));
        }
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..t)
                    .map(|j| dist2(coords.get(i), gt_centroids.get(j)).sqrt())
                    .collect()
            })
            .collect();
        let assignment = hungarian(&cost)?;
        let pred_idx: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let gt_rows: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, g)| gt_centroids.get(g))
            .collect();
        let pred = b.tape.gather_rows(*y, &pred_idx)?;
        let gt_t = b.tape.constant(&[pred_idx.len(), 3], gt_rows)?;
        let diff = b.tape.sub(pred, gt_t)?;
        let level_loss = b.tape.huber_sum(diff);
        total = Some(match total {
            Some(acc) => b.tape.add(acc, level_loss)?,
            None => level_loss,
        });
    }
    Ok(total.unwrap())
}

/// Symmetric Chamfer distance between predicted and ground-truth offset
/// vectors, normalized by the ground-truth count:
/// `(1/|O|) (sum_o min_p |o-p|^2 + sum_p min_o |p-o|^2)`.
pub fn loss_offset(b: &mut ParamBinding, pred: TensorId, gt: &[[f64; 3]]) -> Result<TensorId> {
    let ps = b.tape.shape(pred).to_vec();
    if ps.len() != 2 || ps[1] != 3 {
        return Err(Error::Dimension {
            op: "loss_offset",
            lhs: ps,
            rhs: vec![0, 3],
        });
    }
    let n_pred = ps[0];
    let n_gt = gt.len();
    if n_pred == 0 || n_gt == 0 {
        return Err(Error::Validation("loss_offset: empty offset set".to_string()));
    }
    let pv: Vec<[f64; 3]> = b
        .tape
        .value(pred)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let nearest = |from: &[f64; 3], among: &[[f64; 3]]| -> usize {
        let mut best = (f64::INFINITY, 0usize);
        for (i, cand) in among.iter().enumerate() {
            let d = dist2(*from, *cand);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    };

    // Term 1: each ground-truth offset to its nearest prediction.
    let idx1: Vec<usize> = gt.iter().map(|o| nearest(o, &pv)).collect();
    let pred1 = b.tape.gather_rows(pred, &idx1)?;
    let gt1 = b.tape.constant(&[n_gt, 3], gt.iter().flatten().copied().collect())?;
    let d1 = b.tape.sub(gt1, pred1)?;
    let sq1 = b.tape.mul(d1, d1)?;
    let t1 = b.tape.sum_all(sq1);

    // Term 2: each prediction to its nearest ground-truth offset.
    let idx2: Vec<usize> = pv.iter().map(|p| nearest(p, gt)).collect();
    let gt2_rows: Vec<f64> = idx2.iter().flat_map(|&i| gt[i]).collect();
    let gt2 = b.tape.constant(&[n_pred, 3], gt2_rows)?;
    let d2 = b.tape.sub(pred, gt2)?;
    let sq2 = b.tape.mul(d2, d2)?;
    let t2 = b.tape.sum_all(sq2);

    let sum = b.tape.add(t1, t2)?;
    Ok(b.tape.affine_scalar(sum, 1.0 / n_gt as f64, 0.0))
}

/// Mean cross-entropy over points, stabilized via log-sum-exp.
pub fn loss_seg(b: &mut ParamBinding, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let ls = b.tape.shape(logits).to_vec();
    if ls.len() != 2 {
        return Err(Error::Dimension {
            op: "loss_seg",
            lhs: ls,
            rhs: vec![0, 0],
        });
    }
    let (n, c) = (ls[0], ls[1]);
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "loss_seg: {} labels for {} points",
            labels.len(),
            n
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::Validation(format!(
                "loss_seg: label {l} out of range for {c} classes"
            )));
        }
    }
    let logp = b.tape.log_softmax(logits, 1)?;
    let picked = b.tape.gather_elems(logp, labels)?;
    let mean = b.tape.mean_all(picked);
    Ok(b.tape.affine_scalar(mean, -1.0, 0.0))
}

/// Unweighted sum of the three losses, plus the recorded breakdown.
pub fn loss_total(
    b: &mut ParamBinding,
    seg: TensorId,
    tcp: TensorId,
    offset: TensorId,
) -> Result<(TensorId, LossBreakdown)> {
    let st = b.tape.add(seg, tcp)?;
    let total = b.tape.add(st, offset)?;
    let breakdown = LossBreakdown {
        seg: b.tape.value(seg)[0],
        tcp: b.tape.value(tcp)[0],
        offset: b.tape.value(offset)[0],
        total: b.tape.value(total)[0],
    };
    Ok((total, breakdown))
}
