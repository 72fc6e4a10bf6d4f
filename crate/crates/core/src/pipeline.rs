//! File-backed pipeline stages behind the CLI. Each stage reads its inputs
//! from the configured output directory, writes its artifacts there, and
//! leaves a resolved copy of the configuration beside them.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::envs::{generate_dataset, ExpertDataset};
use crate::error::{Error, Result};
use crate::eval::{
    discrepancy_timeline, eval_seed, flagged_discrepancy, line_plot_svg, saliency_divergence, success_rate,
    DiscrepancyTimeline, EvalReport,
};
use crate::io::{self, Checkpoint};
use crate::nn::{MlpPolicy, Policy};
use crate::qkernels::QuantizedModel;
use crate::quant::FakeQuantPolicy;
use crate::saliency::{compute_sis_table, threshold, SisTable};
use crate::training::{self, write_log_csv, Arm, TrainConfig};

/// Ratio of an episode's peak discrepancy to its median that counts as a spike.
pub const SPIKE_RATIO: f64 = 3.0;
/// Failing-episode timelines kept as CSV files.
const MAX_TIMELINE_FILES: usize = 20;

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<ExpertDataset> {
    if cfg.data.path.is_some() {
        return Err(Error::usage("data.path names an existing dataset; unset it to generate one"));
    }
    let ds = generate_dataset(cfg.env, cfg.obs_mode, cfg.data.episodes, cfg.data.seed)?;
    io::save_dataset(cfg.dataset_path(), &ds)?;
    cfg.write_resolved("gen-data")?;
    Ok(ds)
}

fn require(path: &std::path::Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::usage(format!("{} not found; run `sqil {stage}` first", path.display())))
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<ExpertDataset> {
    require(&cfg.dataset_path(), "gen-data")?;
    let ds = io::load_dataset(cfg.dataset_path())?;
    if ds.env != cfg.env || ds.obs_mode != cfg.obs_mode {
        return Err(Error::usage(format!(
            "dataset is {} / {:?}, config asks for {} / {:?}",
            ds.env.name(),
            ds.obs_mode,
            cfg.env.name(),
            cfg.obs_mode
        )));
    }
    Ok(ds)
}

fn save_log(cfg: &ExperimentConfig, arm: Arm, log: &[(usize, training::LossBreakdown)]) -> Result<()> {
    let f = BufWriter::new(File::create(out(cfg, &format!("{arm}_log.csv")))?);
    write_log_csv(log, f)
}

pub fn train_fp(cfg: &ExperimentConfig) -> Result<MlpPolicy> {
    let ds = load_dataset(cfg)?;
    let tc = TrainConfig { arm: Arm::Fp, ..cfg.fp.clone() };
    let run = training::train_bc_fp_with(&ds, &tc, |step, p| {
        io::save_checkpoint(out(cfg, &format!("fp_step{step}.ckpt")), &Checkpoint::Fp(p.clone()))
    })?;
    io::save_checkpoint(cfg.checkpoint_path(Arm::Fp), &Checkpoint::Fp(run.policy.clone()))?;
    save_log(cfg, Arm::Fp, &run.log)?;
    cfg.write_resolved("train-fp")?;
    Ok(run.policy)
}

pub fn load_fp(cfg: &ExperimentConfig) -> Result<MlpPolicy> {
    require(&cfg.checkpoint_path(Arm::Fp), "train-fp")?;
    io::load_fp_policy(cfg.checkpoint_path(Arm::Fp))
}

/// Round-to-nearest quantization of the FP checkpoint. Also exports the
/// integer model when the bit width allows it.
pub fn ptq(cfg: &ExperimentConfig) -> Result<FakeQuantPolicy> {
    let ds = load_dataset(cfg)?;
    let fp = load_fp(cfg)?;
    let q = training::ptq(&fp, &ds, cfg.quant, cfg.train.seed)?;
    io::save_checkpoint(cfg.checkpoint_path(Arm::Ptq), &Checkpoint::Quant(q.clone()))?;
    if cfg.quant.bits <= 8 {
        io::save_qmodel(out(cfg, "ptq.qmod"), &QuantizedModel::from_fake_quant(&q)?)?;
    }
    cfg.write_resolved("ptq")?;
    Ok(q)
}

pub fn sis(cfg: &ExperimentConfig) -> Result<SisTable> {
    let ds = load_dataset(cfg)?;
    let fp = load_fp(cfg)?;
    let mut table = compute_sis_table(&fp, &ds, &cfg.perturbation(), cfg.sis.frame_stride)?;
    threshold(&mut table, cfg.train.top_p)?;
    table.config.beta = cfg.train.beta;
    io::save_sis(cfg.sis_path(), &table)?;
    cfg.write_resolved("sis")?;
    Ok(table)
}

/// Trains a quantized arm. Distillation arms compute the SIS cache when it is
/// missing.
pub fn train(cfg: &ExperimentConfig, arm: Arm) -> Result<FakeQuantPolicy> {
    let tc = TrainConfig { arm, ..cfg.train.clone() };
    let weights = arm
        .term_weights()
        .ok_or_else(|| Error::usage(format!("arm '{arm}' is not trained with quantization")))?;
    let ds = load_dataset(cfg)?;
    let fp = load_fp(cfg)?;
    let table = if weights.qrd != 0.0 {
        Some(if cfg.sis_path().exists() {
            io::load_sis(cfg.sis_path())?
        } else {
            log::warn!("no SIS cache at {}; computing it now", cfg.sis_path().display());
            sis(cfg)?
        })
    } else {
        None
    };
    let run = training::train_quantized_with(&fp, &ds, table.as_ref(), cfg.quant, &tc, |step, p| {
        io::save_checkpoint(out(cfg, &format!("{arm}_step{step}.ckpt")), &Checkpoint::Quant(p.clone()))
    })?;
    io::save_checkpoint(cfg.checkpoint_path(arm), &Checkpoint::Quant(run.policy.clone()))?;
    if cfg.quant.bits <= 8 {
        io::save_qmodel(out(cfg, &format!("{arm}.qmod")), &QuantizedModel::from_fake_quant(&run.policy)?)?;
    }
    save_log(cfg, arm, &run.log)?;
    cfg.write_resolved(&format!("train-{arm}"))?;
    Ok(run.policy)
}

pub fn load_policy(cfg: &ExperimentConfig, arm: Arm) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path(arm);
    let stage = match arm {
        Arm::Fp => "train-fp".to_string(),
        Arm::Ptq => "ptq".to_string(),
        a => format!("train {a}"),
    };
    require(&path, &stage)?;
    io::load_checkpoint(path)
}

pub fn eval(cfg: &ExperimentConfig, arm: Arm) -> Result<EvalReport> {
    let policy = load_policy(cfg, arm)?;
    let report = success_rate(
        arm.name(),
        &policy,
        cfg.env,
        cfg.obs_mode,
        cfg.eval.episodes,
        cfg.eval.rounds,
        cfg.eval.seed,
    )?;
    write_json(&out(cfg, &format!("eval_{arm}.json")), &report)?;
    cfg.write_resolved(&format!("eval-{arm}"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancySummary {
    pub arm: String,
    pub episodes: usize,
    pub failures: usize,
    /// Means over all recorded episodes of the per-episode max and median.
    pub mean_max: f64,
    pub mean_median: f64,
    /// Failing episodes whose max is at least `SPIKE_RATIO` times their median.
    pub failing_spikes: usize,
    /// Median over failing episodes of max / median.
    pub failing_median_ratio: f64,
    /// Mean discrepancy over dataset states flagged / not flagged by the SIS table.
    pub flagged_mean: Option<f64>,
    pub unflagged_mean: Option<f64>,
}

pub fn discrepancy_timelines<P: Policy + ?Sized>(
    cfg: &ExperimentConfig,
    policy: &P,
    fp: &MlpPolicy,
) -> Result<Vec<DiscrepancyTimeline>> {
    use rayon::prelude::*;
    (0..cfg.eval.timeline_episodes)
        .into_par_iter()
        .map(|m| discrepancy_timeline(policy, fp, cfg.env, cfg.obs_mode, eval_seed(cfg.eval.seed, 0, m)))
        .collect()
}

pub fn summarize_discrepancy(arm: &str, timelines: &[DiscrepancyTimeline]) -> DiscrepancySummary {
    let n = timelines.len().max(1) as f64;
    let failing: Vec<&DiscrepancyTimeline> = timelines.iter().filter(|t| !t.success).collect();
    let ratios: Vec<f64> = failing
        .iter()
        .map(|t| if t.median() > 0.0 { t.max() / t.median() } else { f64::INFINITY })
        .collect();
    DiscrepancySummary {
        arm: arm.to_string(),
        episodes: timelines.len(),
        failures: failing.len(),
        mean_max: timelines.iter().map(|t| t.max()).sum::<f64>() / n,
        mean_median: timelines.iter().map(|t| t.median()).sum::<f64>() / n,
        failing_spikes: ratios.iter().filter(|r| **r >= SPIKE_RATIO).count(),
        failing_median_ratio: if ratios.is_empty() {
            0.0
        } else {
            crate::saliency::quantile(&ratios.iter().map(|r| r.min(1e300)).collect::<Vec<_>>(), 0.5)
        },
        flagged_mean: None,
        unflagged_mean: None,
    }
}

/// Discrepancy timelines of `arm` against the FP policy, written as CSV
/// (failing episodes) plus a JSON summary; `plots` adds an SVG.
pub fn discrepancy(cfg: &ExperimentConfig, arm: Arm, plots: bool) -> Result<DiscrepancySummary> {
    let policy = load_policy(cfg, arm)?;
    let fp = load_fp(cfg)?;
    let timelines = discrepancy_timelines(cfg, &policy, &fp)?;
    let mut summary = summarize_discrepancy(arm.name(), &timelines);
    if cfg.sis_path().exists() {
        let ds = load_dataset(cfg)?;
        let table = io::load_sis(cfg.sis_path())?;
        summary.flagged_mean = Some(flagged_discrepancy(&policy, &fp, &ds, &table, true)?);
        summary.unflagged_mean = Some(flagged_discrepancy(&policy, &fp, &ds, &table, false)?);
    }
    let dir = out(cfg, &format!("discrepancy_{arm}"));
    std::fs::create_dir_all(&dir)?;
    let failing: Vec<&DiscrepancyTimeline> = timelines.iter().filter(|t| !t.success).take(MAX_TIMELINE_FILES).collect();
    for t in &failing {
        t.write_csv(BufWriter::new(File::create(dir.join(format!("episode_{:016x}.csv", t.seed)))?))?;
    }
    if plots {
        let series: Vec<(String, &[f64])> = failing
            .iter()
            .take(5)
            .map(|t| (format!("{:04x}", t.seed & 0xffff), t.values.as_slice()))
            .collect();
        let refs: Vec<(&str, &[f64])> = series.iter().map(|(l, v)| (l.as_str(), *v)).collect();
        let svg = line_plot_svg(&format!("{arm} vs fp: per-step L2 on failing episodes"), &refs);
        std::fs::write(dir.join("timelines.svg"), svg)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    cfg.write_resolved(&format!("discrepancy-{arm}"))?;
    Ok(summary)
}

pub fn saliency_div(cfg: &ExperimentConfig, arm: Arm) -> Result<f64> {
    let policy = load_policy(cfg, arm)?;
    let fp = load_fp(cfg)?;
    let ds = load_dataset(cfg)?;
    let d = saliency_divergence(&policy, &fp, &ds, &cfg.perturbation(), cfg.eval.seed)?;
    write_json(&out(cfg, &format!("saliency_div_{arm}.json")), &serde_json::json!({ "arm": arm.name(), "divergence": d }))?;
    cfg.write_resolved(&format!("saliency-div-{arm}"))?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub success_rate: f64,
    pub success_std: f64,
    pub discrepancy_max: f64,
    pub discrepancy_median: f64,
    pub saliency_divergence: f64,
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::from("| arm | success % | discrepancy max | discrepancy median | saliency div |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.1} ± {:.1} | {:.4} | {:.4} | {:.4} |\n",
            r.arm, r.success_rate, r.success_std, r.discrepancy_max, r.discrepancy_median, r.saliency_divergence
        ));
    }
    s
}

/// One row per arm: success rate, mean per-episode max and median
/// discrepancy against FP, and saliency divergence from FP. Writes
/// `report.md` and `report.json`.
pub fn report(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<Vec<ReportRow>> {
    if arms.is_empty() {
        return Err(Error::usage("report needs at least one arm"));
    }
    let fp = load_fp(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for &arm in arms {
        let policy = load_policy(cfg, arm)?;
        let ev = success_rate(
            arm.name(),
            &policy,
            cfg.env,
            cfg.obs_mode,
            cfg.eval.episodes,
            cfg.eval.rounds,
            cfg.eval.seed,
        )?;
        let (dmax, dmed, div) = if arm == Arm::Fp {
            (0.0, 0.0, 0.0)
        } else {
            let s = summarize_discrepancy(arm.name(), &discrepancy_timelines(cfg, &policy, &fp)?);
            let div = saliency_divergence(&policy, &fp, &ds, &cfg.perturbation(), cfg.eval.seed)?;
            (s.mean_max, s.mean_median, div)
        };
        rows.push(ReportRow {
            arm: arm.name().to_string(),
            success_rate: ev.success_rate,
            success_std: ev.success_std,
            discrepancy_max: dmax,
            discrepancy_median: dmed,
            saliency_divergence: div,
        });
    }
    std::fs::write(out(cfg, "report.md"), format_report(&rows))?;
    write_json(&out(cfg, "report.json"), &rows)?;
    cfg.write_resolved("report")?;
    Ok(rows)
}
