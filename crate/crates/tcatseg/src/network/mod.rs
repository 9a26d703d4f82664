//! The full segmentation network: featurization stem, four downsampling
//! encoder stages (FPS + DPDA superpoints + SGDA fusion + residual),
//! skip-connected interpolating decoders, and the two output heads.

pub mod config;

pub use config::{level_sizes, load_config, parse_config, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PointSet;
use crate::data::LabeledCloud;
use crate::diffcore::{Affine, Mlp, ParamBinding, ParamStore, TensorId};
use crate::dpda::{dpda_step, DpdaParams, Superpoints};
use crate::error::{Error, Result};
use crate::geomkit::{dist2, farthest_point_sample, knn, propagate_labels, Coords, NormalizeTransform};
use crate::sgda::{global_branch, local_branch, sgda_fuse, SgdaParams};

/// One encoder level's output, kept for inspection and decoder skips.
#[derive(Debug, Clone)]
pub struct LevelSummary {
    pub n: usize,
    pub width: usize,
    pub coords: Coords,
    pub feats: TensorId,
}

/// Everything one forward pass produces.
pub struct ForwardPass {
    /// Segmentation logits, [n_input, n_classes].
    pub logits: TensorId,
    /// Offset regression, [n_input, 3].
    pub offsets: TensorId,
    /// Refined TCP per level: position tensor [M, 3] plus its values.
    pub tcp: Vec<(TensorId, Coords)>,
    pub superpoints: Vec<Superpoints>,
    pub levels: Vec<LevelSummary>,
    /// The cloud in model units (normalized), with a recomputed centroid
    /// table; supervision targets are derived from this.
    pub normalized: LabeledCloud,
    pub transform: NormalizeTransform,
    /// Decoder output at input resolution, [n_input, level_widths[0]].
    pub decoded: TensorId,
}

impl ForwardPass {
    /// Refined TCP coordinates per level, in model units.
    pub fn tcp_all_levels(&self) -> Vec<Coords> {
        self.tcp.iter().map(|(_, c)| c.clone()).collect()
    }
}

/// Parameter layout of the full network for one [`ModelConfig`].
pub struct Model {
    pub config: ModelConfig,
    stem: Affine,
    lifts: Vec<Affine>,
    dpda: Vec<DpdaParams>,
    sgda: Vec<SgdaParams>,
    enc_out: Vec<Affine>,
    /// Decoder fusers, coarse to fine; the last one lands at input
    /// resolution with the stem features as skip.
    dec_fuse: Vec<Affine>,
    head_seg: Mlp,
    head_off: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let w = &config.level_widths;
        let depth = config.depth();
        let stem_width = w[0];

        let stem = Affine::new("stem", 6, stem_width);
        let mut lifts = Vec::with_capacity(depth);
        let mut dpda = Vec::with_capacity(depth);
        let mut sgda = Vec::with_capacity(depth);
        let mut enc_out = Vec::with_capacity(depth);
        let mut prev_width = stem_width;
        for i in 0..depth {
            let level = i + 1;
            let width = w[i];
            lifts.push(Affine::new(format!("enc{level}.lift"), prev_width, width));
            dpda.push(DpdaParams::new(
                &format!("enc{level}.dpda"),
                level,
                width,
                (level > 1).then(|| w[i - 1]),
                config.m,
            )?);
            sgda.push(SgdaParams::new(
                &format!("enc{level}"),
                width,
                config.ball_radii[i],
                config.k,
            ));
            enc_out.push(Affine::new(format!("enc{level}.out"), width, width));
            prev_width = width;
        }

        let mut dec_fuse = Vec::with_capacity(depth);
        for target in (1..depth).rev() {
            // Fusing level target+1 (width w[target]) into level target.
            dec_fuse.push(Affine::new(
                format!("dec.to{}", target),
                w[target] + w[target - 1],
                w[target - 1],
            ));
        }
        dec_fuse.push(Affine::new("dec.to0", w[0] + stem_width, stem_width));

        let head_seg = Mlp::new("head.seg", vec![stem_width, stem_width, config.n_classes]);
        let head_off = Mlp::new("head.off", vec![stem_width, stem_width, 3]);

        Ok(Model {
            config,
            stem,
            lifts,
            dpda,
            sgda,
            enc_out,
            dec_fuse,
            head_seg,
            head_off,
        })
    }

    /// Fresh parameters from the config seed, in fixed registration order.
    pub fn init_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.stem.register(&mut store, &mut rng)?;
        for i in 0..self.config.depth() {
            self.lifts[i].register(&mut store, &mut rng)?;
            self.dpda[i].register(&mut store, &mut rng)?;
            self.sgda[i].register(&mut store, &mut rng)?;
            self.enc_out[i].register(&mut store, &mut rng)?;
        }
        for f in &self.dec_fuse {
            f.register(&mut store, &mut rng)?;
        }
        self.head_seg.register(&mut store, &mut rng)?;
        self.head_off.register(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Normalizes coordinates, validates unit normals, and lifts the
    /// 6-channel (xyz, normal) input through the affine+ReLU stem.
    pub fn featurize(
        &self,
        b: &mut ParamBinding,
        cloud: &LabeledCloud,
    ) -> Result<(PointSet, LabeledCloud, NormalizeTransform)> {
        for (i, n) in cloud.normals.iter().enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-3 {
                return Err(Error::Validation(format!(
                    "normal {i} has length {len}, expected unit"
                )));
            }
        }
        let (normalized, transform) = cloud.normalized();
        let n = normalized.len();
        let mut feats6 = Vec::with_capacity(n * 6);
        for i in 0..n {
            let p = normalized.points.get(i);
            let nm = normalized.normals[i];
            feats6.extend_from_slice(&[p[0], p[1], p[2], nm[0], nm[1], nm[2]]);
        }
        let input = b.tape.constant(&[n, 6], feats6)?;
        let lifted = self.stem.apply(b, input)?;
        let f0 = b.tape.relu(lifted);
        let pset = PointSet::from_coords(b, &normalized.points, f0)?;
        Ok((pset, normalized, transform))
    }

    /// Full forward pass on a cloud already resampled to `n_input` points.
    pub fn forward_on(&self, b: &mut ParamBinding, cloud: &LabeledCloud) -> Result<ForwardPass> {
        if cloud.len() != self.config.n_input {
            return Err(Error::Contract {
                op: "forward",
                msg: format!(
                    "cloud has {} points, config expects {}",
                    cloud.len(),
                    self.config.n_input
                ),
            });
        }
        let (p0, normalized, transform) = self.featurize(b, cloud)?;
        let stem_feats = p0.f;

        let mut levels: Vec<LevelSummary> = Vec::with_capacity(self.config.depth());
        let mut superpoints: Vec<Superpoints> = Vec::with_capacity(self.config.depth());
        let mut tcp: Vec<(TensorId, Coords)> = Vec::with_capacity(self.config.depth());
        let mut prev = p0.clone();
        let mut z_prev: Option<Superpoints> = None;

        for i in 0..self.config.depth() {
            let lifted = self.lifts[i].apply(b, prev.f)?;
            let prev_lifted = PointSet {
                x: prev.x,
                f: lifted,
                coords: prev.coords.clone(),
            };
            let n_next = prev.coords.len() / 4;
            if n_next == 0 {
                return Err(Error::Contract {
                    op: "encode",
                    msg: format!("level {} would be empty", i + 1),
                });
            }
            let picks = farthest_point_sample(&prev.coords, n_next, 0)?;
            let coords_i = prev.coords.gather(&picks);
            let x_i = b.tape.constant(&[n_next, 3], coords_i.flat())?;
            let f_q = b.tape.gather_rows(lifted, &picks)?;
            let p_i = PointSet {
                x: x_i,
                f: f_q,
                coords: coords_i.clone(),
            };

            let z_i = dpda_step(b, &self.dpda[i], z_prev.as_ref(), &p_i)?;
            let local = local_branch(b, &self.sgda[i], &p_i, &prev_lifted)?;
            let global = global_branch(b, &self.sgda[i], &p_i, &z_i)?;
            let fused = sgda_fuse(b, &self.sgda[i].alpha, local, global)?;
            let projected = self.enc_out[i].apply(b, fused)?;
            let out = b.tape.add(projected, f_q)?;

            levels.push(LevelSummary {
                n: n_next,
                width: self.config.level_widths[i],
                coords: coords_i.clone(),
                feats: out,
            });
            tcp.push((z_i.y, z_i.coords.clone()));
            superpoints.push(z_i.clone());
            z_prev = Some(z_i);
            prev = PointSet {
                x: x_i,
                f: out,
                coords: coords_i,
            };
        }

        // Decoder: interpolate coarse features onto each finer level,
        // concatenate the skip features, and fuse.
        let depth = self.config.depth();
        let mut dec = levels[depth - 1].feats;
        let mut dec_coords = levels[depth - 1].coords.clone();
        for (step, target) in (1..depth).rev().enumerate() {
            let fine = &levels[target - 1];
            let interp = interpolate_features(b, dec, &dec_coords, &fine.coords)?;
            let cat = b.tape.concat_cols(fine.feats, interp)?;
            let fusedaff = self.dec_fuse[step].apply(b, cat)?;
            dec = b.tape.relu(fusedaff);
            dec_coords = fine.coords.clone();
        }
        let interp = interpolate_features(b, dec, &dec_coords, &normalized.points)?;
        let cat = b.tape.concat_cols(stem_feats, interp)?;
        let fusedaff = self.dec_fuse[depth - 1].apply(b, cat)?;
        let decoded = b.tape.relu(fusedaff);

        let logits = self.head_seg.apply(b, decoded)?;
        let offsets = self.head_off.apply(b, decoded)?;

        Ok(ForwardPass {
            logits,
            offsets,
            tcp,
            superpoints,
            levels,
            normalized,
            transform,
            decoded,
        })
    }
}

/// Interpolates coarse features onto target positions using up to 3
/// nearest coarse points with inverse-distance weights (weight 1 on exact
/// coincidence). Weights are constants; features stay differentiable.
pub fn interpolate_features(
    b: &mut ParamBinding,
    coarse_feats: TensorId,
    coarse_coords: &Coords,
    targets: &Coords,
) -> Result<TensorId> {
    let k = 3.min(coarse_coords.len());
    let table = knn(targets, coarse_coords, k)?;
    let mut weights = Vec::with_capacity(targets.len() * k);
    for qi in 0..targets.len() {
        let q = targets.get(qi);
        let row = table.row(qi);
        let d: Vec<f64> = row.iter().map(|&si| dist2(q, coarse_coords.get(si)).sqrt()).collect();
        let mut w = vec![0.0; k];
        match d.iter().position(|&di| di < 1e-8) {
            Some(hit) => w[hit] = 1.0,
            None => {
                let inv: Vec<f64> = d.iter().map(|&di| 1.0 / (di + 1e-8)).collect();
                let s: f64 = inv.iter().sum();
                for (wi, iv) in w.iter_mut().zip(&inv) {
                    *wi = iv / s;
                }
            }
        }
        weights.extend(w);
    }
    b.tape.weighted_gather(coarse_feats, &table.indices, &weights, k)
}

/// Row-wise argmax with ties resolved to the lowest class index.
pub fn predict_labels(logits: &[f64], n: usize, c: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &logits[i * c..(i + 1) * c];
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, j);
                }
            }
            best.1
        })
        .collect()
}

/// Raw-resolution labels: a raw cloud identical to the sampled one takes
/// the sampled labels directly; otherwise each raw point votes over its 5
/// nearest sampled points. Both clouds must share a coordinate frame.
pub fn predict_full(
    raw: &LabeledCloud,
    sampled: &LabeledCloud,
    sampled_labels: &[usize],
) -> Result<Vec<usize>> {
    if raw.len() == sampled.len() && raw.points == sampled.points {
        return Ok(sampled_labels.to_vec());
    }
    propagate_labels(&sampled.points, sampled_labels, &raw.points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_arch, resample, ArchSpec};
    use crate::losses::TcpLossLevels;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_input: 64,
            level_widths: vec![8, 12],
            ball_radii: vec![0.4, 0.8],
            k: 8,
            n_classes: 5,
            m: 16,
            seed: 7,
            tcp_loss_levels: TcpLossLevels::All,
        }
    }

    fn tiny_cloud(n: usize, teeth: usize, seed: u64) -> LabeledCloud {
        let mut spec = ArchSpec::standard(teeth, seed).unwrap();
        spec.points_per_tooth = (n * 3 / 4) / teeth;
        spec.gingiva_points = n - spec.points_per_tooth * teeth;
        let cloud = generate_arch(&spec).unwrap();
        resample(&cloud, n, 0).unwrap()
    }

    #[test]
    fn featurize_shape_and_width() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(64, 3, 1);
        let mut b = ParamBinding::new(&store);
        let (p0, normalized, _) = model.featurize(&mut b, &cloud).unwrap();
        assert_eq!(b.tape.shape(p0.f), &[64, 8]);
        assert_eq!(normalized.len(), 64);
        let c = normalized.points.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn featurize_rejects_non_unit_normals() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let mut cloud = tiny_cloud(64, 3, 1);
        cloud.normals[5] = [2.0, 0.0, 0.0];
        let mut b = ParamBinding::new(&store);
        assert!(matches!(
            model.featurize(&mut b, &cloud),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn featurize_sign_sensitivity_to_flipped_normals() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(64, 3, 1);
        let mut flipped = cloud.clone();
        for n in &mut flipped.normals {
            for d in 0..3 {
                n[d] = -n[d];
            }
        }
        let mut b1 = ParamBinding::new(&store);
        let (p1, _, _) = model.featurize(&mut b1, &cloud).unwrap();
        let mut b2 = ParamBinding::new(&store);
        let (p2, _, _) = model.featurize(&mut b2, &flipped).unwrap();
        // Same coordinates, different stem inputs: outputs must differ.
        assert_eq!(p1.coords, p2.coords);
        assert_ne!(b1.tape.value(p1.f), b2.tape.value(p2.f));
    }

    #[test]
    fn featurize_zero_stem_gives_bias_rows() {
        let model = Model::new(tiny_config()).unwrap();
        let mut store = model.init_params().unwrap();
        store.get_mut("stem.w").unwrap().data = vec![0.0; 6 * 8];
        store.get_mut("stem.b").unwrap().data =
            vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 1.0, 3.0];
        let cloud = tiny_cloud(64, 3, 1);
        let mut b = ParamBinding::new(&store);
        let (p0, _, _) = model.featurize(&mut b, &cloud).unwrap();
        let v = b.tape.value(p0.f);
        let want = [0.5, 0.0, 0.25, 0.0, 2.0, 0.0, 1.0, 3.0]; // after ReLU
        for row in 0..64 {
            for ch in 0..8 {
                assert_eq!(v[row * 8 + ch], want[ch]);
            }
        }
    }

    #[test]
    fn forward_level_cardinalities_and_shapes() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(64, 3, 2);
        let mut b = ParamBinding::new(&store);
        let fwd = model.forward_on(&mut b, &cloud).unwrap();
        assert_eq!(fwd.levels.len(), 2);
        assert_eq!(fwd.levels[0].n, 16);
        assert_eq!(fwd.levels[1].n, 4);
        assert_eq!(b.tape.shape(fwd.logits), &[64, 5]);
        assert_eq!(b.tape.shape(fwd.offsets), &[64, 3]);
        assert_eq!(b.tape.shape(fwd.decoded), &[64, 8]);
        assert_eq!(fwd.tcp.len(), 2);
        for (_, coords) in &fwd.tcp {
            assert_eq!(coords.len(), 16);
        }
        assert!(b.tape.value(fwd.logits).iter().all(|v| v.is_finite()));
        assert!(b.tape.value(fwd.offsets).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_point_count() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(32, 3, 2);
        let mut b = ParamBinding::new(&store);
        assert!(matches!(
            model.forward_on(&mut b, &cloud),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn forward_deterministic_bitwise() {
        let run = || {
            let model = Model::new(tiny_config()).unwrap();
            let store = model.init_params().unwrap();
            let cloud = tiny_cloud(64, 3, 3);
            let mut b = ParamBinding::new(&store);
            let fwd = model.forward_on(&mut b, &cloud).unwrap();
            (
                b.tape.value(fwd.logits).to_vec(),
                b.tape.value(fwd.offsets).to_vec(),
            )
        };
        let (l1, o1) = run();
        let (l2, o2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(o1.iter().zip(&o2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn forward_invariant_to_input_row_permutation() {
        // Canonical ordering inside resample makes file row order moot.
        let mut spec = ArchSpec::standard(3, 9).unwrap();
        spec.points_per_tooth = 20;
        spec.gingiva_points = 20;
        let cloud = generate_arch(&spec).unwrap();
        let n = cloud.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = LabeledCloud {
            points: cloud.points.gather(&perm),
            normals: perm.iter().map(|&i| cloud.normals[i]).collect(),
            labels: perm.iter().map(|&i| cloud.labels[i]).collect(),
            instances: perm.iter().map(|&i| cloud.instances[i]).collect(),
            centroids: cloud.centroids.clone(),
        };

        let mut cfg = tiny_config();
        cfg.n_input = 64;
        let model = Model::new(cfg).unwrap();
        let store = model.init_params().unwrap();
        let run = |c: &LabeledCloud| {
            let r = resample(c, 64, 0).unwrap();
            let mut b = ParamBinding::new(&store);
            let fwd = model.forward_on(&mut b, &r).unwrap();
            b.tape.value(fwd.logits).to_vec()
        };
        let a = run(&cloud);
        let b = run(&permuted);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_information_features_reduce_to_residual_path() {
        // Zero stem, zero lifts, zero TCP embeddings: every branch input is
        // identical, so fused contributions vanish and the encoder output
        // is exactly the enc.out bias.
        let model = Model::new(tiny_config()).unwrap();
        let mut store = model.init_params().unwrap();
        for name in ["stem.w", "stem.b"] {
            let a = store.get_mut(name).unwrap();
            a.data.iter_mut().for_each(|v| *v = 0.0);
        }
        for level in 1..=2 {
            for part in ["lift.w", "lift.b", "dpda.h_init"] {
                let a = store.get_mut(&format!("enc{level}.{part}")).unwrap();
                a.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bias1 = vec![0.25, -0.5, 1.0, 0.0, 0.75, 2.0, -1.0, 0.125];
        store.get_mut("enc1.out.b").unwrap().data = bias1.clone();

        let cloud = tiny_cloud(64, 3, 4);
        let mut b = ParamBinding::new(&store);
        let fwd = model.forward_on(&mut b, &cloud).unwrap();
        let v = b.tape.value(fwd.levels[0].feats);
        for row in 0..16 {
            for ch in 0..8 {
                assert!(
                    (v[row * 8 + ch] - bias1[ch]).abs() < 1e-12,
                    "row {row} ch {ch}"
                );
            }
        }
    }

    #[test]
    fn interpolation_preserves_constants_and_coincidence() {
        let store = ParamStore::new();
        let mut b = ParamBinding::new(&store);
        let coarse_coords = Coords::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        // Constant field interpolates to the same constant anywhere.
        let cf = b
            .tape
            .constant(&[4, 2], vec![[3.5, -1.25]; 4].concat())
            .unwrap();
        let targets = Coords::new(vec![[0.3, 0.4, 0.0], [0.9, 0.1, 0.2], [0.5, 0.5, 0.0]]);
        let out = interpolate_features(&mut b, cf, &coarse_coords, &targets).unwrap();
        for ch in b.tape.value(out).chunks(2) {
            assert!((ch[0] - 3.5).abs() < 1e-12);
            assert!((ch[1] + 1.25).abs() < 1e-12);
        }

        // A target on a coarse point takes that feature exactly.
        let varied = b
            .tape
            .constant(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let on_point = Coords::new(vec![[1.0, 0.0, 0.0]]);
        let out = interpolate_features(&mut b, varied, &coarse_coords, &on_point).unwrap();
        assert_eq!(b.tape.value(out), &[3.0, 4.0]);
    }

    #[test]
    fn two_point_decoder_interpolation_manual_trace() {
        let store = ParamStore::new();
        let mut b = ParamBinding::new(&store);
        let coarse = Coords::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let feats = b.tape.constant(&[2, 1], vec![1.0, 3.0]).unwrap();
        // Target at x = 0.25: distances 0.25 and 0.75, weights 0.75/0.25.
        let targets = Coords::new(vec![[0.25, 0.0, 0.0]]);
        let out = interpolate_features(&mut b, feats, &coarse, &targets).unwrap();
        let want = 0.75 * 1.0 + 0.25 * 3.0;
        assert!((b.tape.value(out)[0] - want).abs() < 1e-7);
    }

    #[test]
    fn heads_zero_weights_give_uniform_logits_and_zero_offsets() {
        let model = Model::new(tiny_config()).unwrap();
        let mut store = model.init_params().unwrap();
        for name in [
            "head.seg.l0.w",
            "head.seg.l0.b",
            "head.seg.l1.w",
            "head.seg.l1.b",
            "head.off.l0.w",
            "head.off.l0.b",
            "head.off.l1.w",
            "head.off.l1.b",
        ] {
            let a = store.get_mut(name).unwrap();
            a.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let cloud = tiny_cloud(64, 3, 5);
        let mut b = ParamBinding::new(&store);
        let fwd = model.forward_on(&mut b, &cloud).unwrap();
        assert!(b.tape.value(fwd.logits).iter().all(|&v| v == 0.0));
        assert!(b.tape.value(fwd.offsets).iter().all(|&v| v == 0.0));
        // Uniform logits: argmax resolves to class 0.
        let labels = predict_labels(b.tape.value(fwd.logits), 64, 5);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bitwise() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(64, 3, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tcat");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert!(store.same_layout(&loaded));

        let run = |s: &ParamStore| {
            let mut b = ParamBinding::new(s);
            let fwd = model.forward_on(&mut b, &cloud).unwrap();
            b.tape.value(fwd.logits).to_vec()
        };
        let a = run(&store);
        let c = run(&loaded);
        assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn predict_full_identity_and_propagation() {
        let cloud = tiny_cloud(64, 3, 7);
        let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
        let out = predict_full(&cloud, &cloud, &labels).unwrap();
        assert_eq!(out, labels);

        // A denser raw cloud goes through 5-NN majority voting.
        let mut spec = ArchSpec::standard(3, 7).unwrap();
        spec.points_per_tooth = 40;
        spec.gingiva_points = 40;
        let raw = generate_arch(&spec).unwrap();
        let out = predict_full(&raw, &cloud, &cloud.labels).unwrap();
        assert_eq!(out.len(), raw.len());
        // Propagated labels only come from the sampled label set.
        let allowed: std::collections::HashSet<usize> = cloud.labels.iter().copied().collect();
        assert!(out.iter().all(|l| allowed.contains(l)));
    }

    #[test]
    fn end_to_end_gradient_on_reduced_model() {
        // Small 1-level model: the full loss gradient against central
        // differences at the looser composite tolerance.
        use crate::data::derive_offsets;
        use crate::diffcore::finite_diff_check;
        use crate::losses::{loss_offset, loss_seg, loss_tcp, loss_total};

        let cfg = ModelConfig {
            n_input: 16,
            level_widths: vec![6],
            ball_radii: vec![0.7],
            k: 4,
            n_classes: 4,
            m: 4,
            seed: 11,
            tcp_loss_levels: TcpLossLevels::All,
        };
        let model = Model::new(cfg).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(16, 2, 8);

        let eval = |s: &ParamStore| -> crate::error::Result<(f64, Vec<Vec<f64>>)> {
            let mut b = ParamBinding::new(s);
            let fwd = model.forward_on(&mut b, &cloud)?;
            let offsets_gt = derive_offsets(&fwd.normalized)?;
            let centroids = fwd.normalized.centroid_coords();
            let lseg = loss_seg(&mut b, fwd.logits, &fwd.normalized.labels)?;
            let ltcp = loss_tcp(&mut b, &fwd.tcp, &centroids, TcpLossLevels::All)?;
            let loff = loss_offset(&mut b, fwd.offsets, &offsets_gt)?;
            let (total, _) = loss_total(&mut b, lseg, ltcp, loff)?;
            let v = b.tape.value(total)[0];
            b.tape.backward(total)?;
            Ok((v, b.collect_grads()))
        };
        let (_, analytic) = eval(&store).unwrap();
        let report =
            finite_diff_check(&store, &analytic, |s| Ok(eval(s)?.0), 1e-5, 1e-3).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn smoke_minimal_model_runs_quickly() {
        use std::time::Instant;
        let cfg = ModelConfig {
            n_input: 256,
            level_widths: vec![16, 24, 32, 48],
            ball_radii: vec![0.2, 0.4, 0.8, 1.2],
            k: 8,
            n_classes: 17,
            m: 16,
            seed: 3,
            tcp_loss_levels: TcpLossLevels::All,
        };
        let model = Model::new(cfg).unwrap();
        let store = model.init_params().unwrap();
        let cloud = tiny_cloud(256, 8, 9);
        let start = Instant::now();
        let mut b = ParamBinding::new(&store);
        let fwd = model.forward_on(&mut b, &cloud).unwrap();
        assert_eq!(fwd.levels.last().unwrap().n, 1);
        assert!(start.elapsed().as_secs_f64() < 5.0);
    }
}
