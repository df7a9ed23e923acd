//! Command-line front end: `gen`, `train`, `match`, `localize`, `eval`, `plot-data`.

use super::*;
use crate::contrast::{build_training_data, train, EpochLosses};
use crate::simworld::{generate_world_with, load_dataset, render_dataset, save_dataset, simulate_trajectory_with, Calibration, SimMeta};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "bevloc", about = "Ground-to-aerial BEV localization on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and trajectory, render it and write a dataset directory.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the three heads on one or more datasets; writes checkpoints and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
    },
    /// Register a single frame against the map; writes the correlation volumes and the estimate.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        frame: usize,
    },
    /// Run the full estimator; writes trajectory.csv, registrations.csv and report.json.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Recompute a run's report from its serialized outputs; writes report.json and metrics tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `localize`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Emit (x, y, series) triples for trajectory plots.
    PlotData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| PipelineError::io(&common.out, e))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
}

/// Build the dataset `gen` writes for `cfg`.
pub fn generate(cfg: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let world = generate_world_with(&cfg.sim.world_config(cfg.seed))?;
    let tcfg = cfg.sim.trajectory_config();
    let rate = cfg.rates.image_hz;
    let samples = simulate_trajectory_with(&world, cfg.seed, cfg.sim.n_frames, rate, &tcfg)?;
    let meta = SimMeta {
        seed: cfg.seed,
        rate_hz: rate,
        sigma_trans_m: tcfg.sigma_trans_m,
        sigma_yaw_rad: tcfg.sigma_yaw_rad,
        gps_sigma_m: tcfg.gps_sigma_m,
        speed_mps: tcfg.speed_mps,
    };
    Ok(render_dataset(&world, samples, Calibration::default(), Some(meta))?)
}

/// Train heads on the concatenated batches of `datasets`.
pub fn train_heads(datasets: &[Dataset], cfg: &PipelineConfig) -> Result<(Heads, Vec<EpochLosses>), PipelineError> {
    train_heads_excluding(datasets, cfg, &[], 0.0)
}

/// As [`train_heads`], but drops every timestep within `radius` metres of a `holdout` position.
/// Batches are split where steps are removed so each stays contiguous.
pub fn train_heads_excluding(
    datasets: &[Dataset],
    cfg: &PipelineConfig,
    holdout: &[[f64; 2]],
    radius: f64,
) -> Result<(Heads, Vec<EpochLosses>), PipelineError> {
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let near = |p: &PoseSE2| holdout.iter().any(|q| (p.x - q[0]).hypot(p.y - q[1]) < radius);
    let mut data = None;
    for ds in datasets {
        let mut d = build_training_data(ds, &cfg.grid, cfg.pipeline.batch_frames, &tcfg)?;
        if !holdout.is_empty() {
            let mut kept = Vec::new();
            for b in d.batches {
                let mut cur = Vec::new();
                for step in b.steps {
                    if near(&step.pose) {
                        if !cur.is_empty() {
                            kept.push(crate::contrast::TrainBatch { steps: std::mem::take(&mut cur) });
                        }
                    } else {
                        cur.push(step);
                    }
                }
                if !cur.is_empty() {
                    kept.push(crate::contrast::TrainBatch { steps: cur });
                }
            }
            d.batches = kept;
        }
        match &mut data {
            None => data = Some(d),
            Some(acc) => acc.batches.extend(d.batches),
        }
    }
    let data = data.ok_or_else(|| PipelineError::Validation("no training datasets".into()))?;
    if data.batches.is_empty() {
        return Err(PipelineError::Validation("every training timestep lies inside the holdout".into()));
    }
    let heads = Heads::init(data.ground_dim, cfg.seed);
    Ok(train(&data, heads, &tcfg, |_| {})?)
}

/// Metric tables: one row per k of the recall curve, then the scalar metrics.
pub fn metrics_tables(report: &RunReport) -> (String, String) {
    let mut recall = String::from("k,recall\n");
    for (i, r) in report.recall.iter().enumerate() {
        recall.push_str(&format!("{},{r}\n", i + 1));
    }
    let rmse = report.rmse_match.map(|v| v.to_string()).unwrap_or_default();
    let summary = format!(
        "metric,value\nframes,{}\nregistration_attempts,{}\naccepted,{}\nrejected,{}\nrmse_match,{rmse}\nrpe,{}\nvo_rpe,{}\nrpe_window,{}\n",
        report.frames, report.registration_attempts, report.accepted, report.rejected, report.rpe, report.vo_rpe, report.rpe_window
    );
    (recall, summary)
}

fn execute(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            let ds = generate(&cfg)?;
            save_dataset(&common.out, &ds)?;
            write(&common.out.join("config.toml"), &cfg.to_toml_string())
        }
        Command::Train { common, dataset } => {
            let cfg = load_config(&common)?;
            let sets = dataset.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>, _>>()?;
            let (heads, curve) = train_heads(&sets, &cfg)?;
            heads.save(&common.out)?;
            write(&common.out.join("loss.csv"), &crate::contrast::loss_curve_csv(&curve))
        }
        Command::Match { common, dataset, heads, frame } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&dataset)?;
            let heads = Heads::load(&heads)?;
            validate_inputs(&ds, &heads, &cfg)?;
            if frame >= ds.len() {
                return Err(PipelineError::Validation(format!("frame {frame} out of range (dataset has {})", ds.len())));
            }
            let e = ground_embeddings(&ds, &heads, &cfg)?;
            let e_g = e[frame].as_ref().ok_or_else(|| PipelineError::Validation(format!("frame {frame}: empty BEV")))?;
            let index = AerialIndex::new(&ds.map, &heads.coarse)?;
            // diagnostic prior: dead-reckoned VO from the first GPS fix
            let start = PoseSE2::new(ds.samples[0].gps.x, ds.samples[0].gps.y, ds.samples[0].pose_gt.to_se2().yaw);
            let prior = dead_reckon(start, &ds.samples)[frame];
            let t = register_traced(&index, e_g, &prior, &heads, &cfg.matcher)?;
            let mut vols: Vec<&crate::matcher::CorrelationVolume> = t.volumes.iter().collect();
            vols.push(&t.fused);
            crate::matcher::write_volume_csv(&common.out.join("volumes.csv"), &vols)?;
            let est = serde_json::to_string_pretty(&t.estimate).expect("estimate serializes");
            write(&common.out.join("estimate.json"), &est)
        }
        Command::Localize { common, dataset, heads } => {
            let cfg = load_config(&common)?;
            let heads = heads.ok_or_else(|| PipelineError::Validation("localize needs --heads <dir> with trained checkpoints".into()))?;
            let heads = Heads::load(&heads)?;
            let ds = load_dataset(&dataset)?;
            let out = run(&ds, &heads, &cfg)?;
            crate::posegraph::write_trajectory_csv(&common.out.join("trajectory.csv"), &out.report.estimates)?;
            write_registrations_csv(&common.out.join("registrations.csv"), &out.registrations)?;
            write(&common.out.join("config.toml"), &cfg.to_toml_string())?;
            write(&common.out.join("report.json"), &out.report.to_json())
        }
        Command::Eval { common, dataset, run } => {
            let mut cfg = load_config(&common)?;
            if common.config.is_none() && run.join("config.toml").exists() {
                cfg = PipelineConfig::from_toml_str(&read(&run.join("config.toml"))?)?;
            }
            let ds = load_dataset(&dataset)?;
            let report = report_from_run_dir(&ds, &run, &cfg)?;
            let (recall, summary) = metrics_tables(&report);
            write(&common.out.join("recall.csv"), &recall)?;
            write(&common.out.join("metrics.csv"), &summary)?;
            write(&common.out.join("report.json"), &report.to_json())
        }
        Command::PlotData { common, dataset, run } => {
            load_config(&common)?;
            let ds = load_dataset(&dataset)?;
            let report = RunReport::from_json(&read(&run.join("report.json"))?)?;
            let regs = read_registrations_csv(&run.join("registrations.csv"))?;
            let path = common.out.join("plot.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| PipelineError::io(&path, e))?;
            for p in plot_series(&ds, &report, &regs) {
                w.serialize(p).map_err(|e| PipelineError::io(&path, e))?;
            }
            w.flush().map_err(|e| PipelineError::io(&path, e))
        }
    }
}

/// Rebuild the report of a `localize` output directory from its trajectory and registration log.
pub fn report_from_run_dir(ds: &Dataset, run: &Path, cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mode = RunReport::from_json(&read(&run.join("report.json"))?)?.registration_mode;
    let est = crate::posegraph::read_trajectory_csv(&run.join("trajectory.csv"))?;
    let regs = read_registrations_csv(&run.join("registrations.csv"))?;
    build_report(ds, mode, est, &regs, cfg)
}

/// Parse `argv` (including the program name), run the command and return the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
