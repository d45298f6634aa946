//! Config-driven end-to-end runs backing the CLI `fit` and `predict`
//! commands: read data, build the tree, run the chain with draws streamed to
//! CSV, then write summaries, region labels, predictions, the adaptation
//! log, and a run-metadata JSON from which the whole run can be reproduced
//! bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{BasisScaffold, BasisSystem};
use crate::covariance::CovarianceParams;
use crate::data::{fmt_g17, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{PartitionMode, PartitionTree, Rect};
use crate::inference::{classify_regions, predict, summarize, PosteriorSummary, RegionLabeling};
use crate::model::MixtureHyper;
use crate::sampler::{Chain, ChainConfig, ChainOutput, StoredDraw};

fn default_mode() -> PartitionMode {
    PartitionMode::RectangularGrid
}

/// Partition-tree settings of a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSettings {
    pub levels: usize,
    pub fanout: usize,
    pub knots: usize,
    #[serde(default = "default_mode")]
    pub mode: PartitionMode,
    pub seed: u64,
    /// Use the observation locations as final-level knots.
    #[serde(default)]
    pub observation_leaves: bool,
}

fn default_true() -> bool {
    true
}

/// Prediction settings of a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSettings {
    pub enabled: bool,
    pub include_noise: bool,
    pub noise_seed: u64,
}

impl Default for PredictionSettings {
    fn default() -> Self {
        PredictionSettings {
            enabled: true,
            include_noise: true,
            noise_seed: 0,
        }
    }
}

/// A full run definition. The resolved form (all defaults materialized) is
/// echoed into the run metadata, from which `fit` can reproduce every output
/// file bit-identically. The output directory is supplied at invocation time
/// and deliberately kept out of the echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Input dataset CSV.
    pub input: String,
    /// Output directory; not serialized into run metadata.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<String>,
    /// Spatial domain; defaults to the data bounding box.
    #[serde(default)]
    pub domain: Option<Rect>,
    pub tree: TreeSettings,
    pub chain: ChainConfig,
    #[serde(default)]
    pub hyper: MixtureHyper,
    /// Fit only rows flagged by the `train` column (when present).
    #[serde(default = "default_true")]
    pub train_only: bool,
    #[serde(default)]
    pub predictions: PredictionSettings,
    /// Level whose indicators drive region classification; defaults to the
    /// deepest level.
    #[serde(default)]
    pub classification_level: Option<usize>,
}

impl RunConfig {
    /// Load from TOML or JSON (by extension). A JSON document containing a
    /// top-level `config` object is treated as run metadata and unwrapped,
    /// so a previous run's `run_metadata.json` is itself a valid config.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        let is_json = path
            .as_ref()
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        if is_json {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let config_value = value.get("config").cloned().unwrap_or(value);
            Ok(serde_json::from_value(config_value)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.hyper.validate()?;
        CovarianceParams::new(
            self.chain.initial_theta.sigma2,
            self.chain.initial_theta.phi,
            self.chain.initial_theta.nu,
        )?;
        if let Some(level) = self.classification_level {
            if level > self.tree.levels {
                return Err(Error::Config(format!(
                    "classification_level {level} exceeds tree depth {}",
                    self.tree.levels
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic reproduction record: the resolved configuration plus the
/// run's tuning history and numerical events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: RunConfig,
    pub rng_algorithm: String,
    pub n_train: usize,
    pub n_total: usize,
    pub final_shrink: f64,
    pub shrink_trajectory: Vec<crate::sampler::ShrinkEntry>,
    /// Nodes that needed more than the first jitter rung.
    pub jitter_events: Vec<(usize, f64)>,
    pub heredity_violations: usize,
}

/// Everything a fit run produced, in memory plus on disk.
pub struct FitArtifacts {
    pub output_dir: PathBuf,
    pub tree: PartitionTree,
    pub chain: ChainOutput,
    pub summary: PosteriorSummary,
    pub labeling: RegionLabeling,
    pub metadata: RunMetadata,
}

fn write_draws_header(w: &mut csv::Writer<fs::File>, names: &[String]) -> Result<()> {
    w.write_record(names)?;
    Ok(())
}

fn draw_record(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| fmt_g17(*v)).collect()
}

/// Run the full pipeline described by `cfg`. All artifacts land in the
/// output directory: `draws.csv`, `summary.json`, `labels.csv`,
/// `predictions.csv`, `adaptation.json`, `run_metadata.json`, `tree.json`,
/// and `timing.json` (wall-clock log, the one file excluded from
/// reproducibility comparisons).
pub fn fit_run(cfg: &RunConfig) -> Result<FitArtifacts> {
    cfg.validate()?;
    let out_dir = PathBuf::from(cfg.output_dir.clone().ok_or_else(|| {
        Error::Config("no output directory given (config output_dir or --out)".into())
    })?);
    fs::create_dir_all(&out_dir)?;

    let full = Dataset::read_csv(&cfg.input)?;
    let train_idx = if cfg.train_only {
        full.train_indices()
    } else {
        (0..full.n()).collect()
    };
    let train = full.subset(&train_idx);
    if train.n() == 0 {
        return Err(Error::Config("no training rows".into()));
    }

    let domain = cfg.domain.unwrap_or_else(|| bounding_box(&full));
    let tree = if cfg.tree.observation_leaves {
        PartitionTree::build_with_observation_leaves(
            domain,
            cfg.tree.levels,
            cfg.tree.fanout,
            cfg.tree.knots,
            cfg.tree.mode,
            cfg.tree.seed,
            &train.locations,
        )?
    } else {
        PartitionTree::build(
            domain,
            cfg.tree.levels,
            cfg.tree.fanout,
            cfg.tree.knots,
            cfg.tree.mode,
            cfg.tree.seed,
        )?
    };

    // chain with draws streamed to CSV
    let chain = Chain::new(&train, &tree, cfg.chain, cfg.hyper)?;
    let mut writer = csv::Writer::from_path(out_dir.join("draws.csv"))?;
    let output = {
        let probe = ChainOutput {
            draws: Vec::new(),
            adaptation: Vec::new(),
            shrink_trajectory: Vec::new(),
            post_burn_accept: Default::default(),
            jitter_events: Vec::new(),
            heredity_violations: 0,
            warnings: Vec::new(),
            elapsed_seconds: 0.0,
            nodes: chain.node_meta(),
            n_beta: train.design_matrix().ncols(),
            final_shrink: 0.0,
        };
        write_draws_header(&mut writer, &probe.column_names())?;
        chain.run_with(|draw: &StoredDraw| {
            writer.write_record(draw_record(&probe.row_values(draw)))?;
            Ok(())
        })?
    };
    writer.flush()?;

    let summary = summarize(&output)?;
    let level = cfg.classification_level.unwrap_or(cfg.tree.levels);
    let labeling = classify_regions(&summary, &tree, level)?;

    // summaries and labels
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    write_labels_csv(&out_dir.join("labels.csv"), &labeling)?;

    // predictions at every input row (training and held-out alike)
    if cfg.predictions.enabled {
        let theta_hat = CovarianceParams::new(
            summary.sigma2.mean,
            summary.phi.mean,
            summary.nu.mean.clamp(1e-3, cfg.hyper.nu_max),
        )?;
        let scaffold = BasisScaffold::new(&tree, &train.locations)?;
        let system = if cfg.chain.estimate_theta {
            BasisSystem::build(&tree, &scaffold, &theta_hat)?
        } else {
            BasisSystem::build(&tree, &scaffold, &cfg.chain.initial_theta)?
        };
        let base = predict(&output, &system, &tree, &full, false, cfg.predictions.noise_seed)?;
        let noisy = if cfg.predictions.include_noise {
            Some(predict(
                &output,
                &system,
                &tree,
                &full,
                true,
                cfg.predictions.noise_seed,
            )?)
        } else {
            None
        };
        write_predictions_csv(&out_dir.join("predictions.csv"), &full, &train_idx, &base, noisy.as_deref())?;
    }

    // adaptation log
    #[derive(Serialize)]
    struct AdaptationLog<'a> {
        entries: &'a [crate::sampler::AdaptationEntry],
        shrink_trajectory: &'a [crate::sampler::ShrinkEntry],
        post_burn_accept: &'a std::collections::BTreeMap<String, crate::sampler::AcceptanceStats>,
        warnings: &'a [String],
    }
    fs::write(
        out_dir.join("adaptation.json"),
        serde_json::to_string_pretty(&AdaptationLog {
            entries: &output.adaptation,
            shrink_trajectory: &output.shrink_trajectory,
            post_burn_accept: &output.post_burn_accept,
            warnings: &output.warnings,
        })?,
    )?;

    // tree geometry for audit and replotting
    fs::write(out_dir.join("tree.json"), tree.to_json()?)?;

    let metadata = RunMetadata {
        config: RunConfig {
            output_dir: None,
            ..cfg.clone()
        },
        rng_algorithm: "chacha20".into(),
        n_train: train.n(),
        n_total: full.n(),
        final_shrink: output.final_shrink,
        shrink_trajectory: output.shrink_trajectory.clone(),
        jitter_events: output.jitter_events.clone(),
        heredity_violations: output.heredity_violations,
    };
    fs::write(
        out_dir.join("run_metadata.json"),
        serde_json::to_string_pretty(&metadata)?,
    )?;

    // wall-clock log, excluded from byte-level reproducibility
    fs::write(
        out_dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "elapsed_seconds": output.elapsed_seconds,
        }))?,
    )?;

    Ok(FitArtifacts {
        output_dir: out_dir,
        tree,
        chain: output,
        summary,
        labeling,
        metadata,
    })
}

fn bounding_box(data: &Dataset) -> Rect {
    let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in &data.locations {
        r.x0 = r.x0.min(s.x);
        r.y0 = r.y0.min(s.y);
        r.x1 = r.x1.max(s.x);
        r.y1 = r.y1.max(s.y);
    }
    r
}

fn write_labels_csv(path: &Path, labeling: &RegionLabeling) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "node", "knot", "x", "y", "score", "label"])?;
    for k in &labeling.knots {
        w.write_record(&[
            k.level.to_string(),
            k.node_index.to_string(),
            k.knot_index.to_string(),
            fmt_g17(k.x),
            fmt_g17(k.y),
            fmt_g17(k.score),
            k.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_predictions_csv(
    path: &Path,
    data: &Dataset,
    train_idx: &[usize],
    base: &[crate::inference::Prediction],
    noisy: Option<&[crate::inference::Prediction]>,
) -> Result<()> {
    let is_train: std::collections::BTreeSet<usize> = train_idx.iter().copied().collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["x", "y", "observed", "train", "pred_mean", "pred_sd"];
    if noisy.is_some() {
        header.push("pred_sd_noise");
    }
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![
            fmt_g17(data.locations[i].x),
            fmt_g17(data.locations[i].y),
            fmt_g17(data.response[i]),
            if is_train.contains(&i) { "1" } else { "0" }.to_string(),
            fmt_g17(base[i].mean),
            fmt_g17(base[i].sd),
        ];
        if let Some(nv) = noisy {
            rec.push(fmt_g17(nv[i].sd));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-read a draws CSV written by [`fit_run`] into stored draws, using the
/// header to locate columns.
pub fn read_draws_csv<P: AsRef<Path>>(path: P) -> Result<Vec<StoredDraw>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let beta_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("beta."))
        .map(|(i, _)| i)
        .collect();
    let eta_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("eta."))
        .map(|(i, _)| i)
        .collect();
    let z_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("Z."))
        .map(|(i, _)| i)
        .collect();
    let scalar = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("draws CSV is missing column {name}")))
    };
    let (c_tau2, c_rho, c_sigma2, c_phi, c_nu, c_l) = (
        scalar("tau2")?,
        scalar("rho")?,
        scalar("sigma2")?,
        scalar("phi")?,
        scalar("nu")?,
        scalar("L")?,
    );
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad float '{}' in draws CSV", &rec[i])))
        };
        draws.push(StoredDraw {
            beta: beta_cols.iter().map(|&i| get(i)).collect::<Result<_>>()?,
            weights: eta_cols.iter().map(|&i| get(i)).collect::<Result<_>>()?,
            indicators: z_cols
                .iter()
                .map(|&i| get(i).map(|v| v as u8))
                .collect::<Result<_>>()?,
            tau2: get(c_tau2)?,
            rho: get(c_rho)?,
            sigma2: get(c_sigma2)?,
            phi: get(c_phi)?,
            nu: get(c_nu)?,
            shrink: get(c_l)?,
        });
    }
    Ok(draws)
}
