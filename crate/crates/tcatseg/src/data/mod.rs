//! Synthetic dental-arch generation, ground-truth derivation, resampling,
//! and cloud file I/O.
//!
//! Arches are parabolic: teeth are jittered ellipsoids placed along
//! `y = a x^2` with analytic surface normals, and the gingiva is the lower
//! half of a tube swept along the same curve. Tooth slot ids double as
//! semantic class ids and instance ids; gingiva is class/instance 0.

pub mod io;

pub use io::{read_cloud, write_cloud};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geomkit::{farthest_point_sample, Coords, NormalizeTransform};

/// One ground-truth tooth centroid; `class_id` equals the instance id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub class_id: usize,
    pub pos: [f64; 3],
}

/// Raw-resolution labeled points with normals and the centroid table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: Coords,
    pub normals: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
    pub instances: Vec<usize>,
    pub centroids: Vec<Centroid>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean position per instance id > 0, sorted by id.
    pub fn recompute_centroids(&self) -> Vec<(usize, [f64; 3])> {
        let mut ids: Vec<usize> = self.instances.iter().copied().filter(|&i| i > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let idx: Vec<usize> = (0..self.len()).filter(|&p| self.instances[p] == id).collect();
                (id, self.points.gather(&idx).centroid())
            })
            .collect()
    }

    /// Ground-truth tooth centroid coordinates in table order.
    pub fn centroid_coords(&self) -> Coords {
        Coords::new(self.centroids.iter().map(|c| c.pos).collect())
    }

    /// Cloud mapped into normalized model units (unit max radius, centroid
    /// at the origin); the centroid table is recomputed after the map so
    /// the mean identity stays exact.
    pub fn normalized(&self) -> (LabeledCloud, NormalizeTransform) {
        let (points, t) = self.points.normalize();
        let mut out = LabeledCloud {
            points,
            normals: self.normals.clone(),
            labels: self.labels.clone(),
            instances: self.instances.clone(),
            centroids: Vec::new(),
        };
        out.centroids = out
            .recompute_centroids()
            .into_iter()
            .map(|(class_id, pos)| Centroid { class_id, pos })
            .collect();
        (out, t)
    }

    /// Structural consistency: table covers exactly the instance ids
    /// present, and each entry sits at the member mean.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.normals.len() != n || self.labels.len() != n || self.instances.len() != n {
            return Err(Error::Validation(format!(
                "cloud field lengths disagree: {n} points, {} normals, {} labels, {} instances",
                self.normals.len(),
                self.labels.len(),
                self.instances.len()
            )));
        }
        if !self.points.all_finite() {
            return Err(Error::Validation("non-finite coordinate".to_string()));
        }
        let derived = self.recompute_centroids();
        if derived.len() != self.centroids.len() {
            return Err(Error::Validation(format!(
                "centroid table has {} rows, cloud has {} instances",
                self.centroids.len(),
                derived.len()
            )));
        }
        for (c, (id, pos)) in self.centroids.iter().zip(&derived) {
            if c.class_id != *id {
                return Err(Error::Validation(format!(
                    "centroid table id {} does not match instance id {id}",
                    c.class_id
                )));
            }
            for d in 0..3 {
                if (c.pos[d] - pos[d]).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "centroid {} is not the mean of its instance points",
                        c.class_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Geometry of one tooth slot.
#[derive(Debug, Clone, Copy)]
pub struct ToothSpec {
    /// Slot 1..=16; doubles as class and instance id.
    pub slot: usize,
    /// Position along the arch in (-1, 1).
    pub arch_t: f64,
    /// Ellipsoid semi-axes.
    pub radii: [f64; 3],
}

/// Full description of one synthetic arch.
#[derive(Debug, Clone)]
pub struct ArchSpec {
    pub teeth: Vec<ToothSpec>,
    /// Parabola coefficient of the arch curve `y = a x^2`.
    pub curvature: f64,
    /// 0 = evenly spaced; 1 = strongly compressed spacing.
    pub crowding: f64,
    /// Slots removed from the arch.
    pub missing: Vec<usize>,
    /// Center perturbation scale in model units.
    pub jitter: f64,
    pub points_per_tooth: usize,
    pub gingiva_points: usize,
    pub seed: u64,
}

impl ArchSpec {
    /// Evenly spaced arch with molar-to-incisor size variation.
    pub fn standard(tooth_count: usize, seed: u64) -> Result<ArchSpec> {
        if !(1..=16).contains(&tooth_count) {
            return Err(Error::Validation(format!(
                "tooth count {tooth_count} outside 1..=16"
            )));
        }
        let teeth = (1..=tooth_count)
            .map(|slot| {
                let arch_t = -1.0 + 2.0 * (slot as f64 - 0.5) / tooth_count as f64;
                let base = 0.055 * (1.0 + 0.6 * arch_t.abs());
                ToothSpec {
                    slot,
                    arch_t,
                    radii: [base, base * 0.9, base * 0.6],
                }
            })
            .collect();
        Ok(ArchSpec {
            teeth,
            curvature: 0.9,
            crowding: 0.0,
            missing: Vec::new(),
            jitter: 0.01,
            points_per_tooth: 64,
            gingiva_points: 128,
            seed,
        })
    }

    /// Teeth remaining after the missing mask.
    pub fn present_teeth(&self) -> Vec<&ToothSpec> {
        self.teeth
            .iter()
            .filter(|t| !self.missing.contains(&t.slot))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.teeth.is_empty() || self.teeth.len() > 16 {
            return Err(Error::Validation(format!(
                "{} teeth outside 1..=16",
                self.teeth.len()
            )));
        }
        for t in &self.teeth {
            if t.radii.iter().any(|&r| r <= 0.0) {
                return Err(Error::Validation(format!(
                    "degenerate radii {:?} on slot {}",
                    t.radii, t.slot
                )));
            }
        }
        if self.present_teeth().is_empty() {
            return Err(Error::Validation(
                "missing mask removes every tooth".to_string(),
            ));
        }
        if self.points_per_tooth == 0 {
            return Err(Error::Validation("points_per_tooth must be positive".to_string()));
        }
        Ok(())
    }
}

const ARCH_HALF_SPAN: f64 = 0.85;
const GINGIVA_TUBE_RADIUS: f64 = 0.05;
const TOOTH_HEIGHT: f64 = 0.01;

fn unit_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = p.iter().map(|v| v * v).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

/// Samples tooth points on jittered ellipsoids along the parabolic arch and
/// gingiva points on a half-tube beneath, with analytic unit normals.
pub fn generate_arch(spec: &ArchSpec) -> Result<LabeledCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let squeeze = 1.0 - 0.3 * spec.crowding.clamp(0.0, 1.0);

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();

    for tooth in spec.present_teeth() {
        let x = tooth.arch_t * ARCH_HALF_SPAN * squeeze;
        let mut center = [x, spec.curvature * x * x, TOOTH_HEIGHT];
        for d in 0..3 {
            center[d] += rng.gen_range(-1.0..1.0) * spec.jitter;
        }
        let [rx, ry, rz] = tooth.radii;
        for _ in 0..spec.points_per_tooth {
            let u = unit_sphere(&mut rng);
            points.push([
                center[0] + rx * u[0],
                center[1] + ry * u[1],
                center[2] + rz * u[2],
            ]);
            // Ellipsoid surface normal: grad of the implicit form.
            let g = [u[0] / rx, u[1] / ry, u[2] / rz];
            let gl = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            normals.push([g[0] / gl, g[1] / gl, g[2] / gl]);
            labels.push(tooth.slot);
            instances.push(tooth.slot);
        }
    }

    for _ in 0..spec.gingiva_points {
        let t: f64 = rng.gen_range(-1.0..1.0);
        let x = t * ARCH_HALF_SPAN * squeeze;
        let gamma = [x, spec.curvature * x * x, 0.0];
        // Frame of the curve: tangent in the xy-plane, binormal +z.
        let (tx, ty) = (1.0, 2.0 * spec.curvature * x);
        let tl = (tx * tx + ty * ty).sqrt();
        let nrm = [-ty / tl, tx / tl, 0.0];
        let phi: f64 = rng.gen_range(std::f64::consts::PI..2.0 * std::f64::consts::PI);
        let (c, s) = (phi.cos(), phi.sin());
        let dir = [nrm[0] * c, nrm[1] * c, s];
        points.push([
            gamma[0] + GINGIVA_TUBE_RADIUS * dir[0],
            gamma[1] + GINGIVA_TUBE_RADIUS * dir[1],
            gamma[2] + GINGIVA_TUBE_RADIUS * dir[2],
        ]);
        normals.push(dir);
        labels.push(0);
        instances.push(0);
    }

    let mut cloud = LabeledCloud {
        points: Coords::new(points),
        normals,
        labels,
        instances,
        centroids: Vec::new(),
    };
    cloud.centroids = cloud
        .recompute_centroids()
        .into_iter()
        .map(|(class_id, pos)| Centroid { class_id, pos })
        .collect();
    Ok(cloud)
}

/// Per-point regression targets: instance centroid minus point position for
/// tooth points, zero for gingiva.
pub fn derive_offsets(cloud: &LabeledCloud) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let inst = cloud.instances[i];
        if inst == 0 {
            out.push([0.0; 3]);
            continue;
        }
        let c = cloud
            .centroids
            .iter()
            .find(|c| c.class_id == inst)
            .ok_or_else(|| {
                Error::Validation(format!("instance {inst} missing from the centroid table"))
            })?;
        let p = cloud.points.get(i);
        out.push([c.pos[0] - p[0], c.pos[1] - p[1], c.pos[2] - p[2]]);
    }
    Ok(out)
}

/// Canonical lexicographic point order (by x, then y, then z, then original
/// index), applied before FPS so file row order cannot change sampling.
pub fn canonical_order(points: &Coords) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (points.get(a), points.get(b));
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    idx
}

fn gather_cloud(cloud: &LabeledCloud, idx: &[usize]) -> LabeledCloud {
    let mut out = LabeledCloud {
        points: cloud.points.gather(idx),
        normals: idx.iter().map(|&i| cloud.normals[i]).collect(),
        labels: idx.iter().map(|&i| cloud.labels[i]).collect(),
        instances: idx.iter().map(|&i| cloud.instances[i]).collect(),
        centroids: Vec::new(),
    };
    out.centroids = out
        .recompute_centroids()
        .into_iter()
        .map(|(class_id, pos)| Centroid { class_id, pos })
        .collect();
    out
}

/// FPS-based subset of `n_target` points carrying all labels; the centroid
/// table is recomputed on the subset. Upsampling duplicates seeded random
/// rows (with a warning) when `n_target` exceeds the cloud size.
pub fn resample(cloud: &LabeledCloud, n_target: usize, seed: u64) -> Result<LabeledCloud> {
    if cloud.is_empty() {
        return Err(Error::Validation("resample: empty cloud".to_string()));
    }
    if n_target == 0 {
        return Err(Error::Validation("resample: zero target size".to_string()));
    }
    let order = canonical_order(&cloud.points);
    let sorted = gather_cloud(cloud, &order);
    if n_target <= sorted.len() {
        let picks = farthest_point_sample(&sorted.points, n_target, 0)?;
        Ok(gather_cloud(&sorted, &picks))
    } else {
        eprintln!(
            "warning: upsampling {} points to {} by duplication",
            sorted.len(),
            n_target
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..sorted.len()).collect();
        while idx.len() < n_target {
            idx.push(rng.gen_range(0..sorted.len()));
        }
        Ok(gather_cloud(&sorted, &idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomkit::dist2;

    #[test]
    fn single_tooth_centroid_near_ellipsoid_center() {
        let mut spec = ArchSpec::standard(1, 9).unwrap();
        spec.jitter = 0.0;
        spec.points_per_tooth = 2000;
        spec.gingiva_points = 0;
        let cloud = generate_arch(&spec).unwrap();
        cloud.validate().unwrap();
        assert_eq!(cloud.centroids.len(), 1);
        // Tooth 1 center: arch_t = 0 -> (0, 0, TOOTH_HEIGHT), no jitter.
        let c = cloud.centroids[0].pos;
        let r = spec.teeth[0].radii[0];
        let d = dist2(c, [0.0, 0.0, TOOTH_HEIGHT]).sqrt();
        assert!(d < 0.02 * r.max(1.0), "centroid drift {d}");
    }

    #[test]
    fn missing_mask_removes_label_and_centroid_row() {
        let mut spec = ArchSpec::standard(5, 4).unwrap();
        spec.missing = vec![3];
        let cloud = generate_arch(&spec).unwrap();
        assert!(!cloud.labels.contains(&3));
        assert_eq!(cloud.centroids.len(), 4);
        assert!(cloud.centroids.iter().all(|c| c.class_id != 3));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = ArchSpec::standard(6, 123).unwrap();
        let a = generate_arch(&spec).unwrap();
        let b = generate_arch(&spec).unwrap();
        assert_eq!(a, b);
        let spec2 = ArchSpec::standard(6, 124).unwrap();
        let c = generate_arch(&spec2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_radii_rejected() {
        let mut spec = ArchSpec::standard(2, 0).unwrap();
        spec.teeth[1].radii = [0.05, 0.0, 0.05];
        assert!(matches!(generate_arch(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn normals_unit_and_outward() {
        let spec = ArchSpec::standard(4, 7).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        for n in &cloud.normals {
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((l - 1.0).abs() < 1e-6);
        }
        // Tooth normals point away from their instance centroid.
        for i in 0..cloud.len() {
            if cloud.instances[i] == 0 {
                continue;
            }
            let c = cloud
                .centroids
                .iter()
                .find(|c| c.class_id == cloud.instances[i])
                .unwrap()
                .pos;
            let p = cloud.points.get(i);
            let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let dot = v[0] * cloud.normals[i][0] + v[1] * cloud.normals[i][1] + v[2] * cloud.normals[i][2];
            assert!(dot > 0.0);
        }
    }

    #[test]
    fn centroids_follow_arch_order() {
        let mut spec = ArchSpec::standard(8, 3).unwrap();
        spec.jitter = 0.0;
        let cloud = generate_arch(&spec).unwrap();
        // Slot order is arch order; x must increase strictly along it.
        let xs: Vec<f64> = cloud.centroids.iter().map(|c| c.pos[0]).collect();
        for w in xs.windows(2) {
            assert!(w[1] > w[0], "{xs:?}");
        }
    }

    #[test]
    fn offsets_point_to_centroids() {
        let spec = ArchSpec::standard(3, 11).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        let offsets = derive_offsets(&cloud).unwrap();
        for i in 0..cloud.len() {
            let p = cloud.points.get(i);
            if cloud.instances[i] == 0 {
                assert_eq!(offsets[i], [0.0; 3]);
            } else {
                let c = cloud
                    .centroids
                    .iter()
                    .find(|c| c.class_id == cloud.instances[i])
                    .unwrap()
                    .pos;
                for d in 0..3 {
                    assert!((p[d] + offsets[i][d] - c[d]).abs() < 1e-12);
                }
            }
        }
        // Offsets within one instance sum to ~0 (centroid identity).
        for inst in cloud.centroids.iter().map(|c| c.class_id) {
            let mut s = [0.0f64; 3];
            for i in 0..cloud.len() {
                if cloud.instances[i] == inst {
                    for d in 0..3 {
                        s[d] += offsets[i][d];
                    }
                }
            }
            for d in 0..3 {
                assert!(s[d].abs() < 1e-9, "instance {inst}: {s:?}");
            }
        }
    }

    #[test]
    fn offsets_require_consistent_instances() {
        let spec = ArchSpec::standard(2, 1).unwrap();
        let mut cloud = generate_arch(&spec).unwrap();
        cloud.centroids.remove(0);
        assert!(matches!(derive_offsets(&cloud), Err(Error::Validation(_))));
    }

    #[test]
    fn resample_identity_up_to_canonical_order() {
        let spec = ArchSpec::standard(3, 5).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        let n = cloud.len();
        let r = resample(&cloud, n, 0).unwrap();
        assert_eq!(r.len(), n);
        let mut a: Vec<_> = cloud.points.points().to_vec();
        let mut b: Vec<_> = r.points.points().to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        r.validate().unwrap();
    }

    #[test]
    fn resample_halving_keeps_coverage() {
        let mut spec = ArchSpec::standard(4, 6).unwrap();
        spec.points_per_tooth = 100;
        spec.gingiva_points = 100;
        let cloud = generate_arch(&spec).unwrap();
        let half = resample(&cloud, cloud.len() / 2, 0).unwrap();
        // FPS coverage: worst gap stays within a few nearest-neighbor scales.
        let order = canonical_order(&cloud.points);
        let sorted = cloud.points.gather(&order);
        let mut worst = 0.0f64;
        for i in 0..sorted.len() {
            let mut best = f64::INFINITY;
            for j in 0..half.len() {
                best = best.min(dist2(sorted.get(i), half.points.get(j)));
            }
            worst = worst.max(best.sqrt());
        }
        assert!(worst < 0.2, "covering radius {worst}");
    }

    #[test]
    fn resample_is_deterministic_and_invariant_to_row_order() {
        let spec = ArchSpec::standard(3, 8).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        let a = resample(&cloud, 64, 0).unwrap();
        let b = resample(&cloud, 64, 0).unwrap();
        assert_eq!(a, b);

        // Permute the rows; resampling still yields the same cloud.
        let n = cloud.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = gather_cloud(&cloud, &perm);
        let c = resample(&permuted, 64, 0).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn resample_upsamples_by_duplication() {
        let mut spec = ArchSpec::standard(1, 2).unwrap();
        spec.points_per_tooth = 10;
        spec.gingiva_points = 0;
        let cloud = generate_arch(&spec).unwrap();
        let up = resample(&cloud, 25, 3).unwrap();
        assert_eq!(up.len(), 25);
        up.validate().unwrap();
    }
}
