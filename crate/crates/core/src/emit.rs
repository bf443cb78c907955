//! Plot-data and artifact emission: trace CSVs, posterior histogram bins,
//! closure curves, field grids, and the run manifest. All CSV output is
//! RFC-4180 (comma-separated, LF, header row).

use crate::bilevel::RunArtifacts;
use crate::closure::closure_report;
use crate::error::Result;
use crate::metrics::{closure_range, MetricsBundle};
use crate::nn::snapshot;
use crate::population::SystemPopulation;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Serialize)]
struct RunManifest<'a> {
    experiment: &'a str,
    forward: &'a str,
    hierarchical: bool,
    k_systems: usize,
    n_chains: usize,
    t_train: usize,
    t_post: usize,
    seed: u64,
    auto_rejections: u64,
    skipped_updates: usize,
    skipped_ref_solves: usize,
    acceptance_rate_final: f64,
    files: Vec<String>,
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

/// Histogram of samples into `bins` uniform bins over [lo, hi];
/// under/overflow land in the edge bins so counts sum to the sample count.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let mut b = ((s - lo) / width).floor() as isize;
        b = b.clamp(0, bins as isize - 1);
        counts[b as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

pub fn emit_run_artifacts(
    dir: &Path,
    cfg: &crate::config::RunConfig,
    artifacts: &RunArtifacts,
    pop: &SystemPopulation,
    metrics: Option<&MetricsBundle>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let layout = artifacts.layout;
    let family = pop.config.family;
    let p = layout.p_dims;

    // acceptance + loss histories
    write_csv(
        &dir.join("acceptance.csv"),
        "step,acceptance_rate",
        artifacts
            .acceptance_history
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{i},{a}")),
    )?;
    files.push("acceptance.csv".into());
    write_csv(
        &dir.join("lml_loss.csv"),
        "step,loss",
        artifacts
            .lml_history
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l}")),
    )?;
    files.push("lml_loss.csv".into());
    if !artifacts.surrogate_loss_history.is_empty() {
        write_csv(
            &dir.join("surrogate_loss.csv"),
            "step,loss",
            artifacts
                .surrogate_loss_history
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l}")),
        )?;
        files.push("surrogate_loss.csv".into());
    }

    // training-phase traces for each monitored scalar (system 0 parameters
    // and the hyperparameters), one CSV per scalar: step, chain, value
    let mut monitored: Vec<(String, usize)> = (0..p)
        .map(|i| (format!("theta0_{i}"), i))
        .collect();
    if layout.hierarchical {
        for i in 0..p {
            monitored.push((format!("mu_{i}"), layout.k_systems * p + i));
        }
        for i in 0..p {
            monitored.push((format!("log_tau_{i}"), layout.k_systems * p + p + i));
        }
    }
    for (name, dim) in &monitored {
        let path = dir.join(format!("trace_{name}.csv"));
        let mut rows = Vec::new();
        for (step, states) in &artifacts.train_trace {
            for (c, x) in states.iter().enumerate() {
                rows.push(format!("{step},{c},{}", x[*dim]));
            }
        }
        let post_offset = cfg.t_train;
        for (s, states) in artifacts.post_trace.states.iter().enumerate() {
            for (c, x) in states.iter().enumerate() {
                rows.push(format!("{},{c},{}", post_offset + s, x[*dim]));
            }
        }
        write_csv(&path, "step,chain,value", rows.into_iter())?;
        files.push(format!("trace_{name}.csv"));
    }

    // full post-training state trace as a binary blob + shape header
    {
        let steps = artifacts.post_trace.states.len();
        let chains = artifacts.post_trace.states[0].len();
        let dim = layout.dim();
        let mut flat = Vec::with_capacity(steps * chains * dim);
        for step in &artifacts.post_trace.states {
            for chain in step {
                flat.extend_from_slice(chain);
            }
        }
        snapshot::write_f64_blob(&dir.join("post_trace.f64"), &flat)?;
        fs::write(
            dir.join("post_trace.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "shape": [steps, chains, dim],
                "layout": "step-major, then chain, then state dimension",
            }))?,
        )?;
        files.push("post_trace.f64".into());
    }

    // posterior histograms per (system 0, parameter), natural scale
    for i in 0..p {
        let samples = crate::metrics::pooled_parameter_samples(
            &artifacts.post_trace,
            &layout,
            family,
            0,
            i,
        );
        let (mean, std) = crate::metrics::mean_std(&samples);
        let lo = mean - 4.0 * std;
        let hi = mean + 4.0 * std;
        let bins = histogram(&samples, lo, hi, 40);
        write_csv(
            &dir.join(format!("hist_theta0_{i}.csv")),
            "bin_lo,bin_hi,count",
            bins.iter().map(|(a, b, c)| format!("{a},{b},{c}")),
        )?;
        files.push(format!("hist_theta0_{i}.csv"));
    }

    // learned closure curve vs ground truth
    {
        let range = closure_range(family);
        let report = closure_report(
            &artifacts.closure.as_fn(),
            range,
            201,
            &pop.config.gt_closure(),
        );
        write_csv(
            &dir.join("closure_curve.csv"),
            "input,prediction,ground_truth",
            (0..report.inputs.len()).map(|i| {
                format!(
                    "{},{},{}",
                    report.inputs[i], report.predicted[i], report.reference[i]
                )
            }),
        )?;
        files.push("closure_curve.csv".into());
    }

    // surrogate field grids at the first system's ground-truth parameters
    if let Some(s) = &artifacts.surrogate {
        let base = pop.config.base();
        let pred = s.predict_field(&base, &pop.theta_gt[0]);
        write_csv(
            &dir.join("field_system0.csv"),
            "index,prediction,ground_truth",
            pred.iter()
                .zip(&pop.fields_gt[0])
                .enumerate()
                .map(|(i, (a, b))| format!("{i},{a},{b}")),
        )?;
        files.push("field_system0.csv".into());
        snapshot::write_f64_blob(&dir.join("surrogate_params.f64"), s.net.params())?;
        files.push("surrogate_params.f64".into());
    }

    // closure snapshot
    snapshot::save_mlp(
        &dir.join("closure"),
        &artifacts.closure.net,
        Some(cfg.seed),
        &cfg.experiment,
    )?;
    files.push("closure.json".into());
    files.push("closure.f64".into());
    let (lo, hi) = closure_range(family);
    let _ = (lo, hi);

    if let Some(m) = metrics {
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
        files.push("metrics.json".into());
    }

    let manifest = RunManifest {
        experiment: &cfg.experiment,
        forward: &cfg.forward,
        hierarchical: cfg.hierarchical,
        k_systems: cfg.k_systems,
        n_chains: cfg.n_chains,
        t_train: cfg.t_train,
        t_post: cfg.t_post,
        seed: cfg.seed,
        auto_rejections: artifacts.auto_rejections,
        skipped_updates: artifacts.skipped_updates,
        skipped_ref_solves: artifacts.skipped_ref_solves,
        acceptance_rate_final: artifacts
            .acceptance_history
            .last()
            .copied()
            .unwrap_or(0.0),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct ArtifactsJson {
    config: crate::config::RunConfig,
    layout: crate::model::StateLayout,
    closure: crate::closure::ClosureModel,
    surrogate: Option<crate::surrogate::Surrogate>,
    acceptance_history: Vec<f64>,
    lml_history: Vec<f64>,
    surrogate_loss_history: Vec<f64>,
    auto_rejections: u64,
    skipped_updates: usize,
    skipped_ref_solves: usize,
}

/// Persist everything `metrics`/`plotdata` need to rebuild the artifacts.
pub fn save_run(
    dir: &Path,
    cfg: &crate::config::RunConfig,
    artifacts: &RunArtifacts,
    pop: &SystemPopulation,
    metrics: Option<&MetricsBundle>,
) -> Result<()> {
    emit_run_artifacts(dir, cfg, artifacts, pop, metrics)?;
    let aj = ArtifactsJson {
        config: cfg.clone(),
        layout: artifacts.layout,
        closure: artifacts.closure.clone(),
        surrogate: artifacts.surrogate.clone(),
        acceptance_history: artifacts.acceptance_history.clone(),
        lml_history: artifacts.lml_history.clone(),
        surrogate_loss_history: artifacts.surrogate_loss_history.clone(),
        auto_rejections: artifacts.auto_rejections,
        skipped_updates: artifacts.skipped_updates,
        skipped_ref_solves: artifacts.skipped_ref_solves,
    };
    fs::write(dir.join("artifacts.json"), serde_json::to_string(&aj)?)?;
    Ok(())
}

/// Rebuild run artifacts from a run directory (training trace omitted).
pub fn load_run(dir: &Path) -> Result<(crate::config::RunConfig, RunArtifacts)> {
    let aj: ArtifactsJson = serde_json::from_str(&fs::read_to_string(dir.join("artifacts.json"))?)?;
    let shape: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("post_trace.json"))?)?;
    let dims: Vec<usize> = shape["shape"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64().map(|u| u as usize)).collect())
        .unwrap_or_default();
    if dims.len() != 3 {
        return Err(crate::error::Error::Checkpoint(
            "post_trace.json missing a 3-entry shape".into(),
        ));
    }
    let flat = snapshot::read_f64_blob(&dir.join("post_trace.f64"))?;
    let (steps, chains, dim) = (dims[0], dims[1], dims[2]);
    if flat.len() != steps * chains * dim {
        return Err(crate::error::Error::Checkpoint(format!(
            "post_trace blob has {} values, shape wants {}",
            flat.len(),
            steps * chains * dim
        )));
    }
    let mut states = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut per_chain = Vec::with_capacity(chains);
        for c in 0..chains {
            let off = (s * chains + c) * dim;
            per_chain.push(flat[off..off + dim].to_vec());
        }
        states.push(per_chain);
    }
    let artifacts = RunArtifacts {
        layout: aj.layout,
        post_trace: crate::sampler::Trace { states },
        train_trace: Vec::new(),
        acceptance_history: aj.acceptance_history,
        lml_history: aj.lml_history,
        surrogate_loss_history: aj.surrogate_loss_history,
        closure: aj.closure,
        surrogate: aj.surrogate,
        auto_rejections: aj.auto_rejections,
        skipped_updates: aj.skipped_updates,
        skipped_ref_solves: aj.skipped_ref_solves,
    };
    Ok((aj.config, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_sum_to_sample_count() {
        let samples: Vec<f64> = (0..500).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let bins = histogram(&samples, -2.0, 2.0, 16);
        let total: usize = bins.iter().map(|(_, _, c)| c).sum();
        assert_eq!(total, samples.len());
        assert_eq!(bins.len(), 16);
    }

    #[test]
    fn histogram_clamps_outliers_into_edge_bins() {
        let samples = vec![-100.0, 0.0, 100.0];
        let bins = histogram(&samples, -1.0, 1.0, 4);
        assert_eq!(bins[0].2, 1);
        assert_eq!(bins[3].2, 1);
        let total: usize = bins.iter().map(|(_, _, c)| c).sum();
        assert_eq!(total, 3);
    }
}
