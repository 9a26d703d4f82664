//! Per-level superpoint diagnostics for a trained checkpoint: Hungarian
//! matched distance from each level's TCP to the ground-truth centroids,
//! plus the structural floor of the final level (the best any convex
//! combination of its points could do).
//!
//! Usage: cargo run --release --example superpoint_probe -- CONFIG CHECKPOINT DATA_DIR

use std::path::Path;

use tcatseg::commands::list_cloud_files;
use tcatseg::data::{read_cloud, resample};
use tcatseg::diffcore::{ParamBinding, ParamStore};
use tcatseg::geomkit::{dist2, Coords};
use tcatseg::losses::hungarian;
use tcatseg::network::{load_config, Model};

fn matched_mean_distance(tcp: &Coords, centroids: &Coords) -> f64 {
    let cost: Vec<Vec<f64>> = (0..tcp.len())
        .map(|i| {
            (0..centroids.len())
                .map(|j| dist2(tcp.get(i), centroids.get(j)).sqrt())
                .collect()
        })
        .collect();
    let a = hungarian(&cost).unwrap();
    a.total_cost / a.pairs.len() as f64
}

/// Distance from `target` to the convex hull of `pts`, via projected
/// gradient descent on the simplex.
fn hull_distance(pts: &Coords, target: [f64; 3]) -> f64 {
    let n = pts.len();
    let mut w = vec![1.0 / n as f64; n];
    for _ in 0..4000 {
        let mut p = [0.0; 3];
        for (i, wp) in w.iter().enumerate() {
            let x = pts.get(i);
            for d in 0..3 {
                p[d] += wp * x[d];
            }
        }
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let x = pts.get(i);
            for d in 0..3 {
                *g += 2.0 * (p[d] - target[d]) * x[d];
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= 0.05 * g;
        }
        // Project back onto the simplex (clip + renormalize).
        let mut s = 0.0;
        for wi in w.iter_mut() {
            *wi = wi.max(0.0);
            s += *wi;
        }
        if s <= 0.0 {
            w = vec![1.0 / n as f64; n];
        } else {
            for wi in w.iter_mut() {
                *wi /= s;
            }
        }
    }
    let mut p = [0.0; 3];
    for (i, wp) in w.iter().enumerate() {
        let x = pts.get(i);
        for d in 0..3 {
            p[d] += wp * x[d];
        }
    }
    dist2(p, target).sqrt()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (cfg_path, ck_path, data_dir) = (&args[1], &args[2], &args[3]);
    let config = load_config(Path::new(cfg_path)).unwrap();
    let model = Model::new(config.clone()).unwrap();
    // "-" probes the untrained model (the hull floor is data-only).
    let store = if ck_path == "-" {
        model.init_params().unwrap()
    } else {
        ParamStore::load(Path::new(ck_path)).unwrap()
    };

    let files = list_cloud_files(Path::new(data_dir)).unwrap();
    let depth = config.depth();
    let mut per_level = vec![0.0f64; depth];
    let mut floor_sum = 0.0f64;
    for path in &files {
        let raw = read_cloud(path).unwrap();
        let sampled = resample(&raw, config.n_input, config.seed).unwrap();
        let mut b = ParamBinding::new(&store);
        let fwd = model.forward_on(&mut b, &sampled).unwrap();
        let centroids = fwd.normalized.centroid_coords();
        for (li, coords) in fwd.tcp_all_levels().iter().enumerate() {
            per_level[li] += matched_mean_distance(coords, &centroids) / files.len() as f64;
        }
        let last = fwd.levels.last().unwrap();
        let mut floor = 0.0;
        if std::env::var("PROBE_VERBOSE").is_ok() {
            for i in 0..last.coords.len() {
                println!("  corner {:?}", last.coords.get(i));
            }
        }
        for j in 0..centroids.len() {
            let d = hull_distance(&last.coords, centroids.get(j));
            if std::env::var("PROBE_VERBOSE").is_ok() {
                println!("  centroid {:?} miss {:.4}", centroids.get(j), d);
            }
            floor += d / centroids.len() as f64;
        }
        floor_sum += floor / files.len() as f64;
        println!(
            "{}: level sizes {:?}, final-level hull floor {:.4}",
            path.file_name().unwrap().to_string_lossy(),
            fwd.levels.iter().map(|l| l.n).collect::<Vec<_>>(),
            floor
        );
    }
    for (li, d) in per_level.iter().enumerate() {
        println!("level {}: mean matched TCP distance {:.4}", li + 1, d);
    }
    println!("mean final-level hull floor: {:.4}", floor_sum);
}
