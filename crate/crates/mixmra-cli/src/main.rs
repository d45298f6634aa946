//! Command-line front end: `simulate`, `fit`, `predict`, and `diagnose`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixmra::basis::{BasisScaffold, BasisSystem};
use mixmra::covariance::CovarianceParams;
use mixmra::data::{fmt_g17, Dataset};
use mixmra::diagnostics::{empirical_semivariogram, geweke, variogram_bins};
use mixmra::error::{Error, Result};
use mixmra::geometry::PartitionTree;
use mixmra::inference::{confusion_matrix, predict, KnotLabel, RegionLabeling};
use mixmra::pipeline::{fit_run, read_draws_csv, RunConfig, RunMetadata};
use mixmra::sampler::{ChainOutput, NodeMeta};
use mixmra::simulate::{simulate_sim1, simulate_sim2, SimSpec, SimStudy};

#[derive(Parser)]
#[command(name = "mixmra", version, about = "Mixture multi-resolution approximation for spatial data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic simulation-study datasets.
    Simulate(SimulateArgs),
    /// Fit the mixture model described by a config file.
    Fit(FitArgs),
    /// Posterior predictions at new locations from a finished fit.
    Predict(PredictArgs),
    /// Exploratory and convergence tables.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
}

#[derive(Args)]
struct SimulateArgs {
    /// Which study: `sim1` (weights recovery) or `sim2` (two regions).
    #[arg(long)]
    study: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replicates: u64,
    /// Output directory (defaults to `$MIXMRA_OUT` or the working dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of locations.
    #[arg(long)]
    n: Option<usize>,
    /// Override the training-subset size (two-region study).
    #[arg(long)]
    train: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// TOML config, JSON config, or a previous run's `run_metadata.json`.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding a finished fit (`run_metadata.json`, `draws.csv`).
    #[arg(long)]
    fit_dir: PathBuf,
    /// CSV of prediction locations (columns `x`, `y`, plus covariates and a
    /// `response` column, which may be zero-filled).
    #[arg(long)]
    locations: PathBuf,
    /// Output CSV (defaults to `predictions_new.csv` inside the fit dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    include_noise: bool,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Subcommand)]
enum DiagnoseCmd {
    /// Empirical semi-variogram table of a dataset's response column.
    Variogram(VariogramArgs),
    /// Per-parameter Geweke z-scores of a draws CSV.
    Geweke(GewekeArgs),
    /// Knot-classification confusion table against truth labels.
    Confusion(ConfusionArgs),
}

#[derive(Args)]
struct VariogramArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// Largest pair distance; defaults to half the point-cloud diameter.
    #[arg(long)]
    max_dist: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GewekeArgs {
    #[arg(long)]
    chain: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    frac_a: f64,
    #[arg(long, default_value_t = 0.5)]
    frac_b: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfusionArgs {
    /// `labels.csv` from a fit.
    #[arg(long)]
    labels: PathBuf,
    /// Truth CSV with columns `level`, `node`, `knot`, `region`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Shortcut truth rule: region 1 iff the knot's x lies below this value.
    #[arg(long)]
    split_x: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Diagnose(DiagnoseCmd::Variogram(args)) => cmd_variogram(args),
        Command::Diagnose(DiagnoseCmd::Geweke(args)) => cmd_geweke(args),
        Command::Diagnose(DiagnoseCmd::Confusion(args)) => cmd_confusion(args),
    }
}

fn default_out(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("MIXMRA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let study = match args.study.as_str() {
        "sim1" | "mra-weights" => SimStudy::MraWeights,
        "sim2" | "two-region" => SimStudy::TwoRegion,
        other => {
            return Err(Error::Config(format!(
                "unknown study '{other}' (expected sim1 or sim2)"
            )))
        }
    };
    let out = default_out(args.out);
    std::fs::create_dir_all(&out)?;
    let mut specs = Vec::new();
    for k in 0..args.replicates {
        let seed = args.seed + k;
        let mut spec = match study {
            SimStudy::MraWeights => SimSpec::sim1(seed),
            SimStudy::TwoRegion => SimSpec::sim2(seed),
        };
        if let Some(n) = args.n {
            spec.n = n;
            if spec.train > n {
                spec.train = n;
            }
        }
        if let Some(t) = args.train {
            spec.train = t;
        }
        spec.validate()?;
        let stem = match study {
            SimStudy::MraWeights => format!("sim1_rep{k}"),
            SimStudy::TwoRegion => format!("sim2_rep{k}"),
        };
        match study {
            SimStudy::MraWeights => {
                let sim = simulate_sim1(&spec)?;
                sim.data.write_csv(out.join(format!("{stem}.csv")))?;
                write_truth_weights(
                    &out.join(format!("{stem}_weights.csv")),
                    &sim.tree,
                    &sim.true_weights,
                    &sim.masked,
                )?;
            }
            SimStudy::TwoRegion => {
                let data = simulate_sim2(&spec)?;
                data.write_csv(out.join(format!("{stem}.csv")))?;
            }
        }
        specs.push(spec);
    }
    std::fs::write(
        out.join("sim_spec.json"),
        serde_json::to_string_pretty(&specs)?,
    )?;
    println!(
        "wrote {} replicate(s) to {}",
        args.replicates,
        out.display()
    );
    Ok(())
}

fn write_truth_weights(
    path: &Path,
    tree: &PartitionTree,
    weights: &mixmra::model::WeightsState,
    masked: &[bool],
) -> Result<()> {
    let blocks = &weights.blocks;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "node", "knot", "value", "masked"])?;
    for (nid, node) in tree.nodes.iter().enumerate() {
        for h in 0..blocks[nid].len() {
            w.write_record(&[
                node.level.to_string(),
                (node.index_in_level + 1).to_string(),
                (h + 1).to_string(),
                fmt_g17(blocks[nid][h]),
                (masked[nid] as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = Some(out.to_string_lossy().into_owned());
    }
    let artifacts = fit_run(&cfg)?;
    println!(
        "fit finished: {} stored draws, final L = {}, outputs in {}",
        artifacts.chain.draws.len(),
        artifacts.metadata.final_shrink,
        artifacts.output_dir.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let meta_path = args.fit_dir.join("run_metadata.json");
    let text = std::fs::read_to_string(&meta_path)?;
    let metadata: RunMetadata = serde_json::from_str(&text)?;
    let cfg = metadata.config;

    let full = Dataset::read_csv(&cfg.input)?;
    let train_idx = if cfg.train_only {
        full.train_indices()
    } else {
        (0..full.n()).collect()
    };
    let train = full.subset(&train_idx);
    let domain = cfg.domain.unwrap_or_else(|| {
        let mut r = mixmra::geometry::Rect::new(
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for s in &full.locations {
            r.x0 = r.x0.min(s.x);
            r.y0 = r.y0.min(s.y);
            r.x1 = r.x1.max(s.x);
            r.y1 = r.y1.max(s.y);
        }
        r
    });
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
    let scaffold = BasisScaffold::new(&tree, &train.locations)?;

    let draws = read_draws_csv(args.fit_dir.join("draws.csv"))?;
    if draws.is_empty() {
        return Err(Error::Config("fit directory holds no stored draws".into()));
    }
    let n_beta = draws[0].beta.len();
    let nodes: Vec<NodeMeta> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(nid, node)| NodeMeta {
            level: node.level,
            index: node.index_in_level,
            r: node.knots.len(),
            offset: scaffold.weight_offset[nid],
        })
        .collect();
    let n_draws = draws.len() as f64;
    let theta = if cfg.chain.estimate_theta {
        CovarianceParams::new(
            draws.iter().map(|d| d.sigma2).sum::<f64>() / n_draws,
            draws.iter().map(|d| d.phi).sum::<f64>() / n_draws,
            (draws.iter().map(|d| d.nu).sum::<f64>() / n_draws).clamp(1e-3, 2.0),
        )?
    } else {
        cfg.chain.initial_theta
    };
    let system = BasisSystem::build(&tree, &scaffold, &theta)?;
    let chain = ChainOutput {
        draws,
        adaptation: Vec::new(),
        shrink_trajectory: Vec::new(),
        post_burn_accept: Default::default(),
        jitter_events: Vec::new(),
        heredity_violations: 0,
        warnings: Vec::new(),
        elapsed_seconds: 0.0,
        nodes,
        n_beta,
        final_shrink: metadata.final_shrink,
    };

    let new_data = Dataset::read_csv(&args.locations)?;
    let preds = predict(
        &chain,
        &system,
        &tree,
        &new_data,
        args.include_noise,
        args.noise_seed,
    )?;
    let out = args
        .out
        .unwrap_or_else(|| args.fit_dir.join("predictions_new.csv"));
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["x", "y", "pred_mean", "pred_sd"])?;
    for (s, p) in new_data.locations.iter().zip(&preds) {
        w.write_record(&[fmt_g17(s.x), fmt_g17(s.y), fmt_g17(p.mean), fmt_g17(p.sd)])?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn cmd_variogram(args: VariogramArgs) -> Result<()> {
    let data = Dataset::read_csv(&args.input)?;
    let edges = match args.max_dist {
        Some(d) => variogram_bins(d, args.bins),
        None => {
            let mut max_d: f64 = 0.0;
            for i in 0..data.n() {
                for j in (i + 1)..data.n() {
                    max_d = max_d.max(data.locations[i].dist(&data.locations[j]));
                }
            }
            variogram_bins(0.5 * max_d, args.bins)
        }
    };
    let bins = empirical_semivariogram(&data.locations, &data.response, &edges)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["lower", "upper", "mean_dist", "semivariance", "count"])?;
    for b in &bins {
        w.write_record(&[
            fmt_g17(b.lower),
            fmt_g17(b.upper),
            fmt_g17(b.mean_dist),
            b.semivariance.map(fmt_g17).unwrap_or_else(|| "NA".into()),
            b.count.to_string(),
        ])?;
    }
    w.flush()?;
    println!("wrote variogram table to {}", args.out.display());
    Ok(())
}

fn cmd_geweke(args: GewekeArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&args.chain)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (i, field) in rec.iter().enumerate() {
            columns[i].push(field.parse::<f64>().map_err(|_| {
                Error::Config(format!("bad float '{field}' in {}", headers[i]))
            })?);
        }
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["param", "z"])?;
    for (name, col) in headers.iter().zip(&columns) {
        let z = geweke(col, args.frac_a, args.frac_b)?;
        w.write_record(&[name.clone(), fmt_g17(z)])?;
    }
    w.flush()?;
    println!("wrote Geweke table to {}", args.out.display());
    Ok(())
}

fn read_labels_csv(path: &Path) -> Result<RegionLabeling> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut knots = Vec::new();
    let mut level = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad value '{}' in labels CSV", &rec[i])))
        };
        level = get(0)? as usize;
        knots.push(KnotLabel {
            level,
            node_index: get(1)? as usize,
            knot_index: get(2)? as usize,
            x: get(3)?,
            y: get(4)?,
            score: get(5)?,
            label: get(6)? as u8,
        });
    }
    Ok(RegionLabeling {
        level,
        node_labels: Vec::new(),
        knots,
    })
}

fn cmd_confusion(args: ConfusionArgs) -> Result<()> {
    let labeling = read_labels_csv(&args.labels)?;
    let truth: Vec<u8> = match (&args.truth, args.split_x) {
        (Some(path), None) => {
            // match truth rows to knots by (level, node, knot)
            let mut rdr = csv::Reader::from_path(path)?;
            let mut map = std::collections::BTreeMap::new();
            for rec in rdr.records() {
                let rec = rec?;
                let key = (
                    rec[0].parse::<usize>().unwrap_or(usize::MAX),
                    rec[1].parse::<usize>().unwrap_or(usize::MAX),
                    rec[2].parse::<usize>().unwrap_or(usize::MAX),
                );
                let region = rec[3]
                    .parse::<u8>()
                    .map_err(|_| Error::Config(format!("bad region '{}'", &rec[3])))?;
                map.insert(key, region);
            }
            labeling
                .knots
                .iter()
                .map(|k| {
                    map.get(&(k.level, k.node_index, k.knot_index))
                        .copied()
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "truth is missing knot ({}, {}, {})",
                                k.level, k.node_index, k.knot_index
                            ))
                        })
                })
                .collect::<Result<_>>()?
        }
        (None, Some(split)) => labeling
            .knots
            .iter()
            .map(|k| if k.x < split { 1 } else { 2 })
            .collect(),
        _ => {
            return Err(Error::Config(
                "give exactly one of --truth or --split-x".into(),
            ))
        }
    };
    let cm = confusion_matrix(&labeling, &truth)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["", "true_region_1", "true_region_2"])?;
    w.write_record(&[
        "classified_region_1".to_string(),
        cm.counts[0][0].to_string(),
        cm.counts[0][1].to_string(),
    ])?;
    w.write_record(&[
        "classified_region_2".to_string(),
        cm.counts[1][0].to_string(),
        cm.counts[1][1].to_string(),
    ])?;
    w.write_record(&[
        "pct_correct".to_string(),
        format!("{:.1}", cm.pct_correct[0]),
        format!("{:.1}", cm.pct_correct[1]),
    ])?;
    w.flush()?;
    println!("wrote confusion table to {}", args.out.display());
    Ok(())
}
