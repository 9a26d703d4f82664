//! Evaluation metrics: point-wise OA/DSC/SEN/PPV plus the instance-level
//! TIR/TLA/TSA triple and their mean Score.
//!
//! The instance-level definitions are artifact-defined operationalizations
//! (majority-vote identification, bbox-diagonal-normalized localization,
//! tooth-point accuracy); every rendered report says so in its header.
//! Gingiva (class 0) is excluded from macro averages; OA covers all points.

use crate::data::LabeledCloud;
use crate::error::{Error, Result};
use crate::geomkit::{dist2, Coords};
use crate::losses::hungarian;

/// Gingiva carries class id and instance id 0 throughout.
pub const GINGIVA: usize = 0;

/// One ground-truth tooth: its points, centroid, and bbox diagonal.
#[derive(Debug, Clone)]
pub struct ToothInstance {
    pub instance_id: usize,
    pub class_id: usize,
    pub point_indices: Vec<usize>,
    pub centroid: [f64; 3],
    pub bbox_diagonal: f64,
}

/// Per-class tallies for one tooth class present in the ground truth.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub sen: f64,
    pub ppv: f64,
    pub dsc: f64,
}

/// Per-instance identification / localization detail.
#[derive(Debug, Clone)]
pub struct ToothReport {
    pub instance_id: usize,
    pub class_id: usize,
    pub majority_label: usize,
    pub identified: bool,
    pub tla: f64,
}

/// The seven evaluation scalars plus per-tooth breakdowns. All values lie
/// in [0, 1]; reports render them x100.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub oa: f64,
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
    pub tir: f64,
    pub tla: f64,
    pub tsa: f64,
    pub score: f64,
    pub per_class: Vec<ClassMetrics>,
    pub per_tooth: Vec<ToothReport>,
}

/// Tooth instances of a labeled cloud, sorted by instance id.
pub fn extract_instances(cloud: &LabeledCloud) -> Vec<ToothInstance> {
    let mut ids: Vec<usize> = cloud
        .instances
        .iter()
        .copied()
        .filter(|&i| i != GINGIVA)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let point_indices: Vec<usize> = (0..cloud.len())
                .filter(|&p| cloud.instances[p] == id)
                .collect();
            let member = cloud.points.gather(&point_indices);
            let centroid = member.centroid();
            let (lo, hi) = member.bounds();
            let bbox_diagonal = dist2(lo, hi).sqrt();
            ToothInstance {
                instance_id: id,
                class_id: cloud.labels[point_indices[0]],
                point_indices,
                centroid,
                bbox_diagonal,
            }
        })
        .collect()
}

/// Confusion counts indexed `[ground truth][prediction]`.
pub fn confusion(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "confusion: {} predictions vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Validation(format!(
                "confusion: label out of range ({p} or {g} >= {n_classes})"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// OA over all points; SEN/PPV/DSC macro-averaged over tooth classes
/// present in the ground truth (gingiva excluded). Zero denominators
/// contribute zero.
pub fn point_metrics(conf: &[Vec<u64>]) -> (f64, f64, f64, f64, Vec<ClassMetrics>) {
    let c = conf.len();
    let total: u64 = conf.iter().map(|r| r.iter().sum::<u64>()).sum();
    let trace: u64 = (0..c).map(|i| conf[i][i]).sum();
    let oa = if total > 0 { trace as f64 / total as f64 } else { 0.0 };

    let mut per_class = Vec::new();
    for k in 0..c {
        if k == GINGIVA {
            continue;
        }
        let row: u64 = conf[k].iter().sum();
        if row == 0 {
            continue; // class absent from ground truth
        }
        let tp = conf[k][k];
        let fn_ = row - tp;
        let col: u64 = (0..c).map(|g| conf[g][k]).sum();
        let fp = col - tp;
        let sen = tp as f64 / (tp + fn_) as f64;
        let ppv = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let denom = 2 * tp + fp + fn_;
        let dsc = if denom > 0 { 2.0 * tp as f64 / denom as f64 } else { 0.0 };
        per_class.push(ClassMetrics {
            class_id: k,
            tp,
            fp,
            fn_,
            sen,
            ppv,
            dsc,
        });
    }
    let n = per_class.len() as f64;
    let (mut sen, mut ppv, mut dsc) = (0.0, 0.0, 0.0);
    if n > 0.0 {
        sen = per_class.iter().map(|m| m.sen).sum::<f64>() / n;
        ppv = per_class.iter().map(|m| m.ppv).sum::<f64>() / n;
        dsc = per_class.iter().map(|m| m.dsc).sum::<f64>() / n;
    }
    (oa, dsc, sen, ppv, per_class)
}

fn majority_label(pred: &[usize], members: &[usize]) -> usize {
    let mut votes: Vec<(usize, usize)> = Vec::new();
    for &p in members {
        let l = pred[p];
        match votes.iter_mut().find(|(vl, _)| *vl == l) {
            Some((_, c)) => *c += 1,
            None => votes.push((l, 1)),
        }
    }
    votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    votes[0].0
}

/// Fraction of ground-truth teeth whose majority predicted label matches
/// their class (ties toward the smaller label).
pub fn identification_rate(pred: &[usize], instances: &[ToothInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hit = instances
        .iter()
        .filter(|t| majority_label(pred, &t.point_indices) == t.class_id)
        .count();
    hit as f64 / instances.len() as f64
}

/// Hungarian-matches predicted TCP positions to ground-truth centroids and
/// scores each pair `max(0, 1 - d / rho)` with rho the tooth's bbox
/// diagonal; mean over ground-truth teeth.
pub fn localization_accuracy(
    pred_tcp: &Coords,
    instances: &[ToothInstance],
) -> Result<(f64, Vec<(usize, f64)>)> {
    if instances.is_empty() {
        return Err(Error::Validation(
            "localization_accuracy: no ground-truth instances".to_string(),
        ));
    }
    let m = pred_tcp.len();
    let t = instances.len();
    if t > m {
        return Err(Error::Validation(format!(
            "localization_accuracy: more teeth than superpoints ({t} > {m})"
        )));
    }
    let cost: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..t)
                .map(|j| dist2(pred_tcp.get(i), instances[j].centroid).sqrt())
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost)?;
    let mut per_tooth = Vec::with_capacity(t);
    let mut sum = 0.0;
    for &(pi, ti) in &assignment.pairs {
        let d = dist2(pred_tcp.get(pi), instances[ti].centroid).sqrt();
        let rho = instances[ti].bbox_diagonal;
        let acc = if rho > 1e-12 {
            (1.0 - d / rho).max(0.0)
        } else if d <= 1e-12 {
            1.0
        } else {
            0.0
        };
        per_tooth.push((instances[ti].instance_id, acc));
        sum += acc;
    }
    per_tooth.sort_by_key(|&(id, _)| id);
    Ok((sum / t as f64, per_tooth))
}

/// Point-wise accuracy restricted to ground-truth tooth points.
pub fn segmentation_accuracy(pred: &[usize], gt: &[usize], instances: &[ToothInstance]) -> f64 {
    let mut total = 0u64;
    let mut hit = 0u64;
    for inst in instances {
        for &p in &inst.point_indices {
            total += 1;
            if pred[p] == gt[p] {
                hit += 1;
            }
        }
    }
    if total > 0 {
        hit as f64 / total as f64
    } else {
        0.0
    }
}

/// Full evaluation of predicted labels + TCP positions against a labeled
/// cloud. `pred_tcp` must be expressed in the same coordinate frame as the
/// cloud.
pub fn evaluate(
    pred: &[usize],
    pred_tcp: &Coords,
    cloud: &LabeledCloud,
    n_classes: usize,
) -> Result<MetricsReport> {
    let instances = extract_instances(cloud);
    let conf = confusion(pred, &cloud.labels, n_classes)?;
    let (oa, dsc, sen, ppv, per_class) = point_metrics(&conf);
    let tir = identification_rate(pred, &instances);
    let (tla, tla_per_tooth) = localization_accuracy(pred_tcp, &instances)?;
    let tsa = segmentation_accuracy(pred, &cloud.labels, &instances);
    let score = (tla + tsa + tir) / 3.0;

    let per_tooth = instances
        .iter()
        .map(|t| {
            let maj = majority_label(pred, &t.point_indices);
            let tla_t = tla_per_tooth
                .iter()
                .find(|&&(id, _)| id == t.instance_id)
                .map(|&(_, v)| v)
                .unwrap_or(0.0);
            ToothReport {
                instance_id: t.instance_id,
                class_id: t.class_id,
                majority_label: maj,
                identified: maj == t.class_id,
                tla: tla_t,
            }
        })
        .collect();

    Ok(MetricsReport {
        oa,
        dsc,
        sen,
        ppv,
        tir,
        tla,
        tsa,
        score,
        per_class,
        per_tooth,
    })
}

impl MetricsReport {
    /// Field-wise mean of several reports (per-tooth detail dropped).
    pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            oa: mean(|r| r.oa),
            dsc: mean(|r| r.dsc),
            sen: mean(|r| r.sen),
            ppv: mean(|r| r.ppv),
            tir: mean(|r| r.tir),
            tla: mean(|r| r.tla),
            tsa: mean(|r| r.tsa),
            score: mean(|r| r.score),
            per_class: Vec::new(),
            per_tooth: Vec::new(),
        }
    }

    /// Human-readable table, values x100 with 2 decimals.
    pub fn render_human(&self, title: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("# {title} (artifact-defined metric variants)\n"));
        s.push_str("metric   value\n");
        for (name, v) in [
            ("OA", self.oa),
            ("DSC", self.dsc),
            ("SEN", self.sen),
            ("PPV", self.ppv),
            ("TIR", self.tir),
            ("TLA", self.tla),
            ("TSA", self.tsa),
            ("Score", self.score),
        ] {
            s.push_str(&format!("{name:<8} {:>6.2}\n", v * 100.0));
        }
        if !self.per_tooth.is_empty() {
            s.push_str("tooth  class  majority  identified  tla\n");
            for t in &self.per_tooth {
                s.push_str(&format!(
                    "{:<6} {:<6} {:<9} {:<11} {:.2}\n",
                    t.instance_id,
                    t.class_id,
                    t.majority_label,
                    t.identified,
                    t.tla * 100.0
                ));
            }
        }
        s
    }

    /// Machine-readable flat key-value lines, values x100 with 2 decimals.
    pub fn render_kv(&self) -> String {
        let mut s = String::from("# artifact-defined metric variants\n");
        for (name, v) in [
            ("oa", self.oa),
            ("dsc", self.dsc),
            ("sen", self.sen),
            ("ppv", self.ppv),
            ("tir", self.tir),
            ("tla", self.tla),
            ("tsa", self.tsa),
            ("score", self.score),
        ] {
            s.push_str(&format!("{name} = {:.2}\n", v * 100.0));
        }
        s
    }
}
