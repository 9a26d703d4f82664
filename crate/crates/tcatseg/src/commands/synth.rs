//! Synthetic arch generation command: writes cloud files plus a manifest
//! listing the seeds and spec parameters of every file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{generate_arch, write_cloud, ArchSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub teeth: usize,
    pub count: usize,
    pub seed: u64,
    /// Total points per cloud; ~75% go to teeth, the rest to gingiva.
    pub points: usize,
    pub crowding: f64,
    pub missing: Vec<usize>,
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            teeth: 14,
            count: 8,
            seed: 7,
            points: 1024,
            crowding: 0.5,
            missing: Vec::new(),
            jitter: 0.01,
        }
    }
}

/// Builds the per-file arch spec for the i-th cloud of a batch.
pub fn arch_spec_for(opts: &SynthOptions, index: usize) -> Result<ArchSpec> {
    let mut spec = ArchSpec::standard(opts.teeth, opts.seed + index as u64)?;
    spec.crowding = opts.crowding;
    spec.missing = opts.missing.clone();
    spec.jitter = opts.jitter;
    let present = spec.present_teeth().len();
    if present == 0 {
        return Err(Error::Validation("missing mask removes every tooth".to_string()));
    }
    let per_tooth = (opts.points * 3 / 4) / present;
    if per_tooth == 0 {
        return Err(Error::Validation(format!(
            "{} points is too few for {present} teeth",
            opts.points
        )));
    }
    spec.points_per_tooth = per_tooth;
    spec.gingiva_points = opts.points - per_tooth * present;
    Ok(spec)
}

pub fn cmd_synth(opts: &SynthOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !(1..=16).contains(&opts.teeth) {
        return Err(Error::Validation(format!(
            "tooth count {} outside 1..=16",
            opts.teeth
        )));
    }
    if opts.count == 0 {
        return Err(Error::Validation("count must be positive".to_string()));
    }
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(opts.count);
    let mut manifest = String::from("# file seed teeth points crowding jitter missing\n");
    for i in 0..opts.count {
        let spec = arch_spec_for(opts, i)?;
        let cloud = generate_arch(&spec)?;
        let name = format!("arch_{i:03}.cloud");
        let path = out_dir.join(&name);
        write_cloud(&path, &cloud)?;
        let missing = if opts.missing.is_empty() {
            "-".to_string()
        } else {
            opts.missing
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        manifest.push_str(&format!(
            "{name} {} {} {} {} {} {missing}\n",
            spec.seed, opts.teeth, opts.points, opts.crowding, opts.jitter
        ));
        paths.push(path);
    }
    fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(paths)
}
