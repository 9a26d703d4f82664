//! Gradient-check command: the randomized per-op suite at a tight
//! tolerance, then a central-difference sweep over every parameter of a
//! 64-point two-level reduced model through the full loss.

use crate::commands::synth::{arch_spec_for, SynthOptions};
use crate::data::{derive_offsets, generate_arch, resample};
use crate::diffcore::{
    finite_diff_check, per_op_suite, set_backward_corruption, CheckReport, GroupReport,
    ParamBinding, ParamStore,
};
use crate::error::Result;
use crate::losses::{loss_offset, loss_seg, loss_tcp, loss_total, TcpLossLevels};
use crate::network::{Model, ModelConfig};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub eps: f64,
    pub tol_ops: f64,
    pub tol_model: f64,
    pub op_trials: usize,
    /// Negative-control hook: corrupt the named op's backward rule so the
    /// check must fail naming it.
    pub corrupt_op: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 1234,
            eps: 1e-5,
            tol_ops: 1e-4,
            tol_model: 1e-3,
            op_trials: 100,
            corrupt_op: None,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckOutcome {
    pub op_reports: Vec<GroupReport>,
    pub model_report: CheckReport,
    pub pass: bool,
}

impl GradCheckOutcome {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("per-op backward checks\n");
        for r in &self.op_reports {
            s.push_str(&format!(
                "  {:<22} max rel err {:.3e}  {}\n",
                r.group,
                r.max_rel_err,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        s.push_str("model parameter groups\n");
        for g in &self.model_report.groups {
            s.push_str(&format!(
                "  {:<22} max rel err {:.3e}  {}  (worst {})\n",
                g.group,
                g.max_rel_err,
                if g.pass { "pass" } else { "FAIL" },
                g.worst_param
            ));
        }
        s.push_str(&format!(
            "overall: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }

    pub fn failing(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .op_reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.group.clone())
            .collect();
        out.extend(
            self.model_report
                .failing_groups()
                .into_iter()
                .map(|s| s.to_string()),
        );
        out
    }
}

/// The 64-point two-level reduced configuration the model sweep runs on.
pub fn reduced_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_input: 64,
        level_widths: vec![8, 12],
        ball_radii: vec![0.4, 0.8],
        k: 8,
        n_classes: 5,
        m: 16,
        seed,
        tcp_loss_levels: TcpLossLevels::All,
    }
}

pub fn cmd_grad_check(opts: &GradCheckOptions) -> Result<GradCheckOutcome> {
    set_backward_corruption(opts.corrupt_op.as_deref());
    let result = run_checks(opts);
    set_backward_corruption(None);
    result
}

fn run_checks(opts: &GradCheckOptions) -> Result<GradCheckOutcome> {
    let op_reports = per_op_suite(opts.seed, opts.op_trials, opts.eps, opts.tol_ops);

    let config = reduced_config(opts.seed);
    let model = Model::new(config.clone())?;
    let store = model.init_params()?;
    let spec = arch_spec_for(
        &SynthOptions {
            teeth: 3,
            count: 1,
            seed: opts.seed,
            points: 64,
            crowding: 0.3,
            missing: vec![],
            jitter: 0.01,
        },
        0,
    )?;
    let cloud = resample(&generate_arch(&spec)?, config.n_input, config.seed)?;

    let eval = |s: &ParamStore| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut b = ParamBinding::new(s);
        let fwd = model.forward_on(&mut b, &cloud)?;
        let offsets_gt = derive_offsets(&fwd.normalized)?;
        let centroids = fwd.normalized.centroid_coords();
        let lseg = loss_seg(&mut b, fwd.logits, &fwd.normalized.labels)?;
        let ltcp = loss_tcp(&mut b, &fwd.tcp, &centroids, config.tcp_loss_levels)?;
        let loff = loss_offset(&mut b, fwd.offsets, &offsets_gt)?;
        let (total, _) = loss_total(&mut b, lseg, ltcp, loff)?;
        let v = b.tape.value(total)[0];
        b.tape.backward(total)?;
        Ok((v, b.collect_grads()))
    };
    let (_, analytic) = eval(&store)?;
    let model_report = finite_diff_check(
        &store,
        &analytic,
        |s| Ok(eval(s)?.0),
        opts.eps,
        opts.tol_model,
    )?;

    let pass = op_reports.iter().all(|r| r.pass) && model_report.pass;
    Ok(GradCheckOutcome {
        op_reports,
        model_report,
        pass,
    })
}
