//! Evaluation command: per-file and aggregate metric reports plus a
//! superpoint dump per file. Ground-truth self-test mode feeds the labels
//! and centroids back as predictions and must score 1.0 everywhere.

use std::fs;
use std::path::Path;

use crate::commands::list_cloud_files;
use crate::data::{read_cloud, resample, LabeledCloud};
use crate::diffcore::{ParamBinding, ParamStore};
use crate::dpda::render_tcp_dump;
use crate::error::{Error, Result};
use crate::geomkit::Coords;
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{predict_full, predict_labels, Model, ModelConfig};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Feed ground truth back as the prediction (metrics oracle).
    pub self_test: bool,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub per_file: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
}

fn load_checked_store(model: &Model, checkpoint: &Path) -> Result<ParamStore> {
    let store = ParamStore::load(checkpoint)?;
    let expected = model.init_params()?;
    if !expected.same_layout(&store) {
        return Err(Error::Validation(format!(
            "checkpoint {} does not match the model config (parameter layout differs)",
            checkpoint.display()
        )));
    }
    Ok(store)
}

/// Model predictions for one raw cloud: raw-resolution labels and the
/// final-level TCP positions mapped back to the cloud's coordinate frame.
fn predict_cloud(
    model: &Model,
    store: &ParamStore,
    raw: &LabeledCloud,
) -> Result<(Vec<usize>, Coords, String)> {
    let sampled = resample(raw, model.config.n_input, model.config.seed)?;
    let mut b = ParamBinding::new(store);
    let fwd = model.forward_on(&mut b, &sampled)?;
    let labels = predict_labels(
        b.tape.value(fwd.logits),
        model.config.n_input,
        model.config.n_classes,
    );
    let raw_labels = predict_full(raw, &sampled, &labels)?;
    let tcp_norm = fwd.tcp_all_levels();
    let last = tcp_norm.last().expect("at least one level");
    let tcp_raw = Coords::new(last.iter().map(|&p| fwd.transform.invert(p)).collect());
    let dump = render_tcp_dump(&tcp_norm);
    Ok((raw_labels, tcp_raw, dump))
}

pub fn cmd_eval(
    config: &ModelConfig,
    checkpoint: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let files = list_cloud_files(data_dir)?;
    fs::create_dir_all(out_dir)?;
    let model = Model::new(config.clone())?;
    let store = match (opts.self_test, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(load_checked_store(&model, p)?),
        (false, None) => {
            return Err(Error::Validation(
                "eval needs --checkpoint (or --self-test)".to_string(),
            ))
        }
    };

    let mut per_file = Vec::with_capacity(files.len());
    for path in &files {
        let raw = read_cloud(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cloud")
            .to_string();
        let (pred, tcp, dump) = match &store {
            Some(store) => predict_cloud(&model, store, &raw)?,
            None => {
                let tcp = raw.centroid_coords();
                let dump = render_tcp_dump(&[tcp.clone()]);
                (raw.labels.clone(), tcp, dump)
            }
        };
        let report = evaluate(&pred, &tcp, &raw, config.n_classes)?;
        fs::write(
            out_dir.join(format!("{stem}.metrics.txt")),
            report.render_human(&stem),
        )?;
        fs::write(out_dir.join(format!("{stem}.metrics.kv")), report.render_kv())?;
        fs::write(out_dir.join(format!("{stem}.tcp")), dump)?;
        per_file.push((stem, report));
    }

    let reports: Vec<MetricsReport> = per_file.iter().map(|(_, r)| r.clone()).collect();
    let aggregate = MetricsReport::aggregate(&reports);
    fs::write(
        out_dir.join("aggregate.metrics.txt"),
        aggregate.render_human("aggregate"),
    )?;
    fs::write(out_dir.join("aggregate.metrics.kv"), aggregate.render_kv())?;
    Ok(EvalOutcome { per_file, aggregate })
}

/// Writes the per-level superpoint dump (`level m y0 y1 y2` lines, model
/// units) for one cloud file.
pub fn cmd_dump_tcp(
    config: &ModelConfig,
    checkpoint: &Path,
    cloud_path: &Path,
    out_path: &Path,
) -> Result<()> {
    let model = Model::new(config.clone())?;
    let store = load_checked_store(&model, checkpoint)?;
    let raw = read_cloud(cloud_path)?;
    let (_, _, dump) = predict_cloud(&model, &store, &raw)?;
    fs::write(out_path, dump)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::synth::{cmd_synth, SynthOptions};
    use crate::commands::train::{cmd_train, TrainOptions};
    use crate::losses::TcpLossLevels;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_input: 64,
            level_widths: vec![8, 12],
            ball_radii: vec![0.4, 0.8],
            k: 6,
            n_classes: 4,
            m: 16,
            seed: 5,
            tcp_loss_levels: TcpLossLevels::All,
        }
    }

    fn small_data(dir: &Path) {
        cmd_synth(
            &SynthOptions {
                teeth: 3,
                count: 2,
                seed: 11,
                points: 64,
                crowding: 0.2,
                missing: vec![],
                jitter: 0.01,
            },
            dir,
        )
        .unwrap();
    }

    #[test]
    fn self_test_scores_all_ones() {
        let data = tempfile::tempdir().unwrap();
        small_data(data.path());
        let out = tempfile::tempdir().unwrap();
        let outcome = cmd_eval(
            &small_config(),
            None,
            data.path(),
            out.path(),
            &EvalOptions { self_test: true },
        )
        .unwrap();
        let a = &outcome.aggregate;
        for v in [a.oa, a.dsc, a.sen, a.ppv, a.tir, a.tla, a.tsa, a.score] {
            assert_eq!(v, 1.0);
        }
        assert!(out.path().join("arch_000.metrics.txt").exists());
        assert!(out.path().join("arch_000.metrics.kv").exists());
        assert!(out.path().join("arch_000.tcp").exists());
        assert!(out.path().join("aggregate.metrics.kv").exists());
    }

    #[test]
    fn missing_checkpoint_is_a_usage_error() {
        let data = tempfile::tempdir().unwrap();
        small_data(data.path());
        let out = tempfile::tempdir().unwrap();
        let err = cmd_eval(
            &small_config(),
            None,
            data.path(),
            out.path(),
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let err = cmd_eval(
            &small_config(),
            Some(Path::new("/nonexistent/ck.tcat")),
            data.path(),
            out.path(),
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn checkpoint_config_mismatch_rejected() {
        let data = tempfile::tempdir().unwrap();
        small_data(data.path());
        let out = tempfile::tempdir().unwrap();
        let trained = cmd_train(
            &small_config(),
            data.path(),
            out.path(),
            &TrainOptions {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();

        let mut wrong = small_config();
        wrong.level_widths = vec![8, 16];
        let err = cmd_eval(
            &wrong,
            Some(&trained.final_checkpoint),
            data.path(),
            out.path(),
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn eval_with_checkpoint_writes_reports_and_dumps() {
        let data = tempfile::tempdir().unwrap();
        small_data(data.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let trained = cmd_train(
            &cfg,
            data.path(),
            out.path(),
            &TrainOptions {
                epochs: 2,
                lr: 1e-3,
                momentum: 0.9,
            },
        )
        .unwrap();
        let eval_out = tempfile::tempdir().unwrap();
        let outcome = cmd_eval(
            &cfg,
            Some(&trained.final_checkpoint),
            data.path(),
            eval_out.path(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.per_file.len(), 2);
        let dump = std::fs::read_to_string(eval_out.path().join("arch_000.tcp")).unwrap();
        // Header plus 2 levels x 16 superpoints.
        assert_eq!(dump.lines().count(), 1 + 32);
        for line in dump.lines().skip(1) {
            assert_eq!(line.split_whitespace().count(), 5);
        }
        // Dump and eval on the same checkpoint are deterministic.
        let eval_out2 = tempfile::tempdir().unwrap();
        cmd_eval(
            &cfg,
            Some(&trained.final_checkpoint),
            data.path(),
            eval_out2.path(),
            &EvalOptions::default(),
        )
        .unwrap();
        let a = std::fs::read(eval_out.path().join("aggregate.metrics.kv")).unwrap();
        let b = std::fs::read(eval_out2.path().join("aggregate.metrics.kv")).unwrap();
        assert_eq!(a, b);
    }
}
