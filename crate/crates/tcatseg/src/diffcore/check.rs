//! Finite-difference gradient verification.
//!
//! Central differences (f(p+eps) - f(p-eps)) / (2 eps) per parameter entry,
//! compared against tape gradients. Relative error uses
//! |num - ana| / max(|num|, |ana|, 1).

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub eps: f64,
    pub tol: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.pass)
            .map(|g| g.group.as_str())
            .collect()
    }
}

fn group_of(name: &str) -> String {
    match name.rfind('.') {
        Some(i) => name[..i].to_string(),
        None => name.to_string(),
    }
}

fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / num.abs().max(ana.abs()).max(1.0)
}

/// Checks `analytic` (one gradient vector per store entry, in store order)
/// against central differences of `value_fn` over every parameter entry.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    analytic: &[Vec<f64>],
    value_fn: F,
    eps: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync,
{
    if eps <= 0.0 {
        return Err(Error::Contract {
            op: "finite_diff_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    if analytic.len() != store.len() {
        return Err(Error::Contract {
            op: "finite_diff_check",
            msg: format!(
                "{} gradient vectors for {} parameters",
                analytic.len(),
                store.len()
            ),
        });
    }

    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for p in 0..store.len() {
        if analytic[p].len() != store.array(p).numel() {
            return Err(Error::Contract {
                op: "finite_diff_check",
                msg: format!("gradient length mismatch for {:?}", store.name(p)),
            });
        }
        for e in 0..store.array(p).numel() {
            jobs.push((p, e));
        }
    }

    let results: Vec<Result<(usize, usize, f64)>> = jobs
        .par_iter()
        .map_init(
            || store.clone(),
            |local, &(p, e)| {
                let orig = local.array(p).data[e];
                local.array_mut(p).data[e] = orig + eps;
                let fp = value_fn(local)?;
                local.array_mut(p).data[e] = orig - eps;
                let fm = value_fn(local)?;
                local.array_mut(p).data[e] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite value while perturbing {}[{}]",
                        local.name(p),
                        e
                    )));
                }
                let num = (fp - fm) / (2.0 * eps);
                Ok((p, e, rel_err(num, analytic[p][e])))
            },
        )
        .collect();

    use std::collections::BTreeMap;
    let mut by_group: BTreeMap<String, GroupReport> = BTreeMap::new();
    let mut max_rel = 0.0f64;
    for r in results {
        let (p, e, rel) = r?;
        max_rel = max_rel.max(rel);
        let name = store.name(p);
        let g = by_group.entry(group_of(name)).or_insert_with(|| GroupReport {
            group: group_of(name),
            max_rel_err: -1.0,
            worst_param: String::new(),
            entries: 0,
            pass: true,
        });
        g.entries += 1;
        if rel > g.max_rel_err {
            g.max_rel_err = rel;
            g.worst_param = format!("{name}[{e}]");
        }
    }
    let mut groups: Vec<GroupReport> = by_group.into_values().collect();
    for g in &mut groups {
        g.pass = g.max_rel_err <= tol;
    }
    let pass = groups.iter().all(|g| g.pass);
    Ok(CheckReport {
        eps,
        tol,
        groups,
        max_rel_err: max_rel,
        pass,
    })
}

/// Randomized single-op gradient checks; low-level cousin of
/// [`finite_diff_check`] used by the grad-check command so a corrupted
/// backward rule is reported by op name.
pub fn per_op_suite(seed: u64, trials: usize, eps: f64, tol: f64) -> Vec<GroupReport> {
    use super::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Builder = fn(&mut Tape, super::tape::TensorId) -> super::tape::TensorId;
    let ops: Vec<(&str, Vec<usize>, Builder)> = vec![
        ("add", vec![2, 3], |t, x| {
            let y = t.affine_scalar(x, 0.5, 1.0);
            t.add(x, y).unwrap()
        }),
        ("sub", vec![2, 3], |t, x| {
            let y = t.affine_scalar(x, 0.5, 1.0);
            t.sub(x, y).unwrap()
        }),
        ("mul", vec![2, 3], |t, x| {
            let y = t.affine_scalar(x, 0.5, 1.0);
            t.mul(x, y).unwrap()
        }),
        ("affine_scalar", vec![4], |t, x| t.affine_scalar(x, -1.5, 0.25)),
        ("matmul", vec![2, 3], |t, x| {
            let y = t.transpose(x).unwrap();
            t.matmul(x, y).unwrap()
        }),
        ("transpose", vec![3, 2], |t, x| t.transpose(x).unwrap()),
        ("reshape", vec![2, 3], |t, x| t.reshape(x, &[3, 2]).unwrap()),
        ("relu", vec![2, 3], |t, x| t.relu(x)),
        ("sigmoid", vec![2, 3], |t, x| t.sigmoid(x)),
        ("softmax", vec![2, 3], |t, x| t.softmax(x, 1).unwrap()),
        ("log_softmax", vec![2, 4], |t, x| t.log_softmax(x, 1).unwrap()),
        ("sum_all", vec![2, 3], |t, x| t.sum_all(x)),
        ("mean_all", vec![2, 3], |t, x| t.mean_all(x)),
        ("max_all", vec![5], |t, x| t.max_all(x)),
        ("sum_axis", vec![2, 3, 2], |t, x| t.sum_axis(x, 1).unwrap()),
        ("gather_rows", vec![4, 2], |t, x| t.gather_rows(x, &[3, 0, 3, 1]).unwrap()),
        ("scatter_add_rows", vec![3, 2], |t, x| {
            t.scatter_add_rows(x, &[1, 0, 1], 2).unwrap()
        }),
        ("gather_elems", vec![3, 4], |t, x| t.gather_elems(x, &[1, 3, 0]).unwrap()),
        ("concat_cols", vec![3, 2], |t, x| {
            let y = t.affine_scalar(x, 2.0, 0.1);
            t.concat_cols(x, y).unwrap()
        }),
        ("weighted_gather", vec![4, 3], |t, x| {
            t.weighted_gather(x, &[0, 1, 2, 3, 3, 1], &[0.2, 0.3, 0.5, 0.1, 0.6, 0.3], 3)
                .unwrap()
        }),
        ("scale_by", vec![4], |t, x| {
            let s = t.sum_all(x);
            let sc = t.sigmoid(s);
            t.scale_by(x, sc).unwrap()
        }),
        ("add_row_vec", vec![9], |t, x| {
            let m = t.reshape(x, &[3, 3]).unwrap();
            let first = t.gather_rows(m, &[0]).unwrap();
            let bias = t.reshape(first, &[3]).unwrap();
            t.add_row_vec(m, bias).unwrap()
        }),
        ("huber_sum", vec![5], |t, x| t.huber_sum(x)),
        ("segment_softmax", vec![5, 2], |t, x| {
            t.segment_softmax(x, &[2, 3]).unwrap()
        }),
        ("segment_sum", vec![5, 2], |t, x| t.segment_sum(x, &[2, 3]).unwrap()),
    ];

    let mut reports = Vec::new();
    for (name, shape, build) in ops {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name.len() as u64);
        let numel: usize = shape.iter().product();
        let mut worst = 0.0f64;
        let mut worst_label = String::new();
        for trial in 0..trials {
            // Keep inputs away from ReLU/|x|=1 kinks and near-ties.
            let x0: Vec<f64> = (0..numel)
                .map(|_| {
                    let mut v: f64 = rng.gen_range(0.05..2.0);
                    if (v - 1.0).abs() < 0.05 {
                        v += 0.1;
                    }
                    if rng.gen_bool(0.5) {
                        v = -v;
                    }
                    v
                })
                .collect();
            let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |xs: &[f64]| -> (f64, Vec<f64>) {
                let mut t = Tape::new();
                let x = t.leaf(&shape, xs.to_vec()).unwrap();
                let out = build(&mut t, x);
                let n = t.numel(out);
                let wts = t.constant(&[n], w[..n].to_vec()).unwrap();
                let flat = t.reshape(out, &[n]).unwrap();
                let prod = t.mul(flat, wts).unwrap();
                let s = t.sum_all(prod);
                let v = t.value(s)[0];
                t.backward(s).unwrap();
                (v, t.grad(x).unwrap().to_vec())
            };
            let (_, grad) = eval(&x0);
            for e in 0..numel {
                let mut xp = x0.clone();
                xp[e] = x0[e] + eps;
                let (fp, _) = eval(&xp);
                xp[e] = x0[e] - eps;
                let (fm, _) = eval(&xp);
                let num = (fp - fm) / (2.0 * eps);
                let rel = rel_err(num, grad[e]);
                if rel > worst {
                    worst = rel;
                    worst_label = format!("{name} trial {trial} entry {e}");
                }
            }
        }
        reports.push(GroupReport {
            group: format!("op:{name}"),
            max_rel_err: worst,
            worst_param: worst_label,
            entries: trials * numel,
            pass: worst <= tol,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;

    #[test]
    fn quadratic_gradient_matches_analytic() {
        // f = theta^2 at theta = 3: analytic 6.
        let mut store = ParamStore::new();
        store.register("theta", &[1], vec![3.0]).unwrap();
        let analytic = vec![vec![6.0]];
        let report = finite_diff_check(
            &store,
            &analytic,
            |s| Ok(s.get("theta").unwrap().data[0].powi(2)),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.register("theta", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        let analytic = vec![vec![0.0; 3]];
        let report =
            finite_diff_check(&store, &analytic, |_| Ok(42.0), 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        // f = -log softmax(w)[1] for a 3-way logit vector.
        let mut store = ParamStore::new();
        store.register("w", &[3], vec![0.2, -0.4, 1.1]).unwrap();

        let value = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut t = Tape::new();
            let w = t.leaf(&[1, 3], s.get("w").unwrap().data.clone())?;
            let ls = t.log_softmax(w, 1)?;
            let picked = t.gather_elems(ls, &[1])?;
            let loss = t.affine_scalar(picked, -1.0, 0.0);
            let out = t.sum_all(loss);
            Ok(t.value(out)[0])
        };

        // Analytic gradient via the tape itself.
        let mut t = Tape::new();
        let w = t.leaf(&[1, 3], store.get("w").unwrap().data.clone()).unwrap();
        let ls = t.log_softmax(w, 1).unwrap();
        let picked = t.gather_elems(ls, &[1]).unwrap();
        let loss = t.affine_scalar(picked, -1.0, 0.0);
        let out = t.sum_all(loss);
        t.backward(out).unwrap();
        let analytic = vec![t.grad(w).unwrap().to_vec()];

        let report = finite_diff_check(&store, &analytic, value, 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn rejects_bad_eps() {
        let store = ParamStore::new();
        let r = finite_diff_check(&store, &[], |_| Ok(0.0), 0.0, 1e-4);
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_value_names_perturbed_parameter() {
        let mut store = ParamStore::new();
        store.register("bad", &[1], vec![1.0]).unwrap();
        let analytic = vec![vec![0.0]];
        let err = finite_diff_check(
            &store,
            &analytic,
            |s| {
                let v = s.get("bad").unwrap().data[0];
                if (v - 1.0).abs() > 1e-9 {
                    Ok(f64::NAN)
                } else {
                    Ok(1.0)
                }
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
    }

    #[test]
    fn per_op_suite_passes_and_detects_corruption() {
        let reports = per_op_suite(7, 10, 1e-5, 1e-4);
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");

        crate::diffcore::tape::set_backward_corruption(Some("sigmoid"));
        let reports = per_op_suite(7, 10, 1e-5, 1e-4);
        crate::diffcore::tape::set_backward_corruption(None);
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.group.as_str())
            .collect();
        assert!(failing.contains(&"op:sigmoid"), "{failing:?}");
    }
}
