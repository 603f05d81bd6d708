use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fpsurvey::anomaly::{self, DetectSummary};
use fpsurvey::fpmap::{self, FingerprintMap, LocMethod, Observation};
use fpsurvey::gridmap::{self, OccupancyGrid};
use fpsurvey::pipeline::{self, Floor, PipelineConfig, Stage};
use fpsurvey::recovery;
use fpsurvey::rfsim::{FingerprintDatabase, Surveyor};
use fpsurvey::rng::{self, Stream};

#[derive(Parser)]
#[command(name = "fpsurvey", version, about = "Autonomous WiFi fingerprint survey simulator")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold, inflate and segment the floor map.
    Segment,
    /// Plan the survey path.
    Plan,
    /// Simulate a survey and write the raw database.
    Survey {
        /// Stop and scan at every waypoint instead of scanning on the move.
        #[arg(long)]
        sojourn: bool,
    },
    /// Recover single-band losses.
    Recover {
        #[arg(long)]
        db: PathBuf,
    },
    /// Run the largest-normalized-residual test on every (AP, band, region).
    Detect {
        #[arg(long)]
        db: PathBuf,
    },
    /// Repair detected outliers, from a previous epoch or by resurvey.
    Repair {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        detect: PathBuf,
        #[arg(long)]
        previous: Option<PathBuf>,
    },
    /// Build the fingerprint map at the plan's waypoints.
    BuildMap {
        #[arg(long)]
        db: PathBuf,
        /// Reuse the GP hyperparameters found by `detect`.
        #[arg(long)]
        detect: Option<PathBuf>,
    },
    /// Localize observations (JSON list of {"readings": [[ap, band, rssi], ...]}).
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        obs: PathBuf,
    },
    /// Localization error statistics of a map against the simulated world.
    Eval {
        #[arg(long)]
        map: PathBuf,
    },
    /// Run the whole pipeline and write every artifact.
    Demo,
    /// Survey without sojourn versus the sojourn baseline.
    Compare,
}

struct Failure {
    stage: Stage,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

trait At<T> {
    fn at(self, stage: Stage) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> At<T> for Result<T, E> {
    fn at(self, stage: Stage) -> CliResult<T> {
        self.map_err(|e| Failure {
            stage,
            message: e.to_string(),
        })
    }
}

impl From<pipeline::StageError> for Failure {
    fn from(e: pipeline::StageError) -> Self {
        Failure {
            stage: e.stage,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage.name(), f.message);
            ExitCode::from(f.stage.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).at(Stage::Config)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate().at(Stage::Config)?;
    Ok(cfg)
}

fn out_path(cfg: &PipelineConfig, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).at(Stage::Write)?;
    Ok(cfg.output_dir.join(name))
}

fn write_json<T: Serialize>(cfg: &PipelineConfig, name: &str, value: &T) -> CliResult<PathBuf> {
    let path = out_path(cfg, name)?;
    fs::write(&path, serde_json::to_vec_pretty(value).at(Stage::Write)?).at(Stage::Write)?;
    Ok(path)
}

fn save_db(cfg: &PipelineConfig, name: &str, db: &FingerprintDatabase) -> CliResult<PathBuf> {
    let path = out_path(cfg, name)?;
    db.save(&path).at(Stage::Write)?;
    Ok(path)
}

fn load_db(path: &Path) -> CliResult<FingerprintDatabase> {
    FingerprintDatabase::load(path).at(Stage::Load)
}

fn load_detect(path: &Path) -> CliResult<Vec<DetectSummary>> {
    let text = fs::read_to_string(path).at(Stage::Load)?;
    serde_json::from_str(&text).at(Stage::Load)
}

fn load_map(path: &Path) -> CliResult<FingerprintMap> {
    let f = fs::File::open(path).at(Stage::Load)?;
    FingerprintMap::read_csv(std::io::BufReader::new(f)).at(Stage::Load)
}

fn save_pgm(cfg: &PipelineConfig, name: &str, grid: &OccupancyGrid) -> CliResult<PathBuf> {
    let path = out_path(cfg, name)?;
    gridmap::save_grid(grid, &path).at(Stage::Write)?;
    Ok(path)
}

#[derive(Serialize)]
struct RegionInfo {
    id: usize,
    area_px: usize,
    value_m: f64,
}

#[derive(Serialize)]
struct Located {
    bayes: (f64, f64),
    knn: (f64, f64),
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Segment => {
            let grid = Floor::load_grid(&cfg.map).at(Stage::Load)?;
            let (inflated, seg) = pipeline::segment_grid(&grid, &cfg).at(Stage::Segment)?;
            save_pgm(&cfg, "inflated.pgm", &inflated.to_occupancy())?;
            let labels = OccupancyGrid::new(
                seg.geometry.width,
                seg.geometry.height,
                seg.geometry.meta(),
                seg.label_gray(),
            )
            .at(Stage::Segment)?;
            save_pgm(&cfg, "regions.pgm", &labels)?;
            let info: Vec<RegionInfo> = seg
                .regions
                .iter()
                .map(|r| RegionInfo {
                    id: r.id,
                    area_px: r.area_px,
                    value_m: r.value,
                })
                .collect();
            let p = write_json(&cfg, "regions.json", &info)?;
            println!("{} regions -> {}", info.len(), p.display());
        }
        Command::Plan => {
            let floor = Floor::prepare(&cfg)?;
            let path = out_path(&cfg, "plan.jsonl")?;
            let f = fs::File::create(&path).at(Stage::Write)?;
            floor.plan.write_jsonl(std::io::BufWriter::new(f)).at(Stage::Write)?;
            let overlay = OccupancyGrid::new(
                floor.inflated.geometry.width,
                floor.inflated.geometry.height,
                floor.inflated.geometry.meta(),
                fpsurvey::pathplan::plan_overlay(&floor.inflated, &floor.plan),
            )
            .at(Stage::Plan)?;
            save_pgm(&cfg, "plan_overlay.pgm", &overlay)?;
            println!("{} waypoints -> {}", floor.plan.waypoint_count(), path.display());
        }
        Command::Survey { sojourn } => {
            let floor = Floor::prepare(&cfg)?;
            let world = pipeline::generate_world(&cfg, &floor).at(Stage::World)?;
            let surveyor = Surveyor {
                world: &world,
                motion: cfg.motion,
                power: cfg.power,
                nav: Some(&floor.inflated),
            };
            let mode = if sojourn { cfg.survey.sojourn } else { cfg.survey.mode };
            let mut rng = rng::stream_with(cfg.seed, Stream::Survey, cfg.epoch as u64);
            let (db, report, _) = surveyor.survey(&floor.plan, mode, cfg.epoch, &mut rng).at(Stage::Survey)?;
            write_json(&cfg, "world.json", &world)?;
            write_json(&cfg, "survey_report.json", &report)?;
            let p = save_db(&cfg, "db_raw.csv", &db)?;
            println!(
                "{} samples, {:.0} s, {:.1} Wh -> {}",
                db.samples.len(),
                report.duration_s,
                report.total_wh(),
                p.display()
            );
        }
        Command::Recover { db } => {
            let db = load_db(&db)?;
            let regs = recovery::fit_regressors(&db, &cfg.recovery.svr);
            let out = recovery::recover_lost(&db, &regs);
            let p = save_db(&cfg, "db_recovered.csv", &out)?;
            println!(
                "recovered {} samples ({} fallback regressors) -> {}",
                out.count_flag(fpsurvey::rfsim::Flag::RecoveredDual),
                regs.fallback_count(),
                p.display()
            );
        }
        Command::Detect { db } => {
            let db = load_db(&db)?;
            let reports = anomaly::detect_all(&db, &cfg.anomaly.gp).at(Stage::Detect)?;
            let summaries: Vec<DetectSummary> = reports.iter().map(|r| r.summary(&db)).collect();
            let n: usize = summaries.iter().map(|s| s.outliers.len()).sum();
            let p = write_json(&cfg, "detect.json", &summaries)?;
            println!("{n} outliers in {} jobs -> {}", summaries.len(), p.display());
        }
        Command::Repair { db, detect, previous } => {
            let db = load_db(&db)?;
            let jobs = load_detect(&detect)?;
            let previous = previous.as_deref().map(load_db).transpose()?;
            let outcome = anomaly::repair_abnormal(&db, &jobs, previous.as_ref(), &cfg.anomaly.shift);
            let mut repaired = outcome.db.clone();
            let mut resurveyed = 0;
            let mut cost = fpsurvey::rfsim::TimeEnergyReport::default();
            if !outcome.resurvey.is_empty() {
                let floor = Floor::prepare(&cfg)?;
                let world = pipeline::generate_world(&cfg, &floor).at(Stage::World)?;
                let surveyor = Surveyor {
                    world: &world,
                    motion: cfg.motion,
                    power: cfg.power,
                    nav: Some(&floor.inflated),
                };
                let t_end = db.samples.iter().map(|s| s.t).fold(0.0, f64::max);
                let mut rng = rng::stream_with(cfg.seed, Stream::Resurvey, db.epoch as u64);
                (resurveyed, cost) = pipeline::resurvey_pending(
                    &surveyor,
                    &mut repaired,
                    &outcome.resurvey,
                    &outcome.pending_rows,
                    outcome.resurvey[0].1,
                    cfg.survey.sojourn,
                    t_end,
                    &mut rng,
                )
                .at(Stage::Repair)?;
            }
            #[derive(Serialize)]
            struct RepairReport<'a> {
                shifted: usize,
                resurveyed: usize,
                resurvey_locations: &'a [(usize, (f64, f64))],
                shifts: &'a [anomaly::ShiftEstimate],
                resurvey_cost: fpsurvey::rfsim::TimeEnergyReport,
            }
            write_json(
                &cfg,
                "repair.json",
                &RepairReport {
                    shifted: outcome.shifted_rows.len(),
                    resurveyed,
                    resurvey_locations: &outcome.resurvey,
                    shifts: &outcome.shifts,
                    resurvey_cost: cost,
                },
            )?;
            let p = save_db(&cfg, "db_repaired.csv", &repaired)?;
            println!(
                "shifted {}, resurveyed {} at {} locations -> {}",
                outcome.shifted_rows.len(),
                resurveyed,
                outcome.resurvey.len(),
                p.display()
            );
        }
        Command::BuildMap { db, detect } => {
            let db = load_db(&db)?;
            let floor = Floor::prepare(&cfg)?;
            let reuse = match detect {
                Some(p) => load_detect(&p)?
                    .into_iter()
                    .filter_map(|s| s.hyper.map(|h| ((s.ap, s.band, s.region), h)))
                    .collect(),
                None => Default::default(),
            };
            let map = fpmap::build_map(&db, &floor.points, &cfg.anomaly.gp, &reuse).at(Stage::BuildMap)?;
            let path = out_path(&cfg, "map.csv")?;
            let f = fs::File::create(&path).at(Stage::Write)?;
            map.write_csv(std::io::BufWriter::new(f)).at(Stage::Write)?;
            println!(
                "{} points x {} features ({} imputed) -> {}",
                map.points.len(),
                map.n_features(),
                map.imputed.len(),
                path.display()
            );
        }
        Command::Localize { map, obs } => {
            let map = load_map(&map)?;
            let text = fs::read_to_string(&obs).at(Stage::Load)?;
            let observations: Vec<Observation> = serde_json::from_str(&text).at(Stage::Load)?;
            let located: Vec<Located> = observations
                .iter()
                .map(|o| Located {
                    bayes: fpmap::bayes_localize(&map, o, &cfg.eval.loc),
                    knn: fpmap::knn_localize(&map, o, cfg.eval.loc.knn_k, cfg.eval.loc.knn_weighted),
                })
                .collect();
            let p = write_json(&cfg, "localized.json", &located)?;
            println!("{} observations -> {}", located.len(), p.display());
        }
        Command::Eval { map } => {
            let map = load_map(&map)?;
            let floor = Floor::prepare(&cfg)?;
            let world = pipeline::generate_world(&cfg, &floor).at(Stage::World)?;
            let stats = pipeline::evaluate_map(&cfg, &floor, &world, &map).at(Stage::Eval)?;
            for s in &stats {
                let label = method_name(s.method);
                let path = out_path(&cfg, &format!("cdf_{label}.csv"))?;
                let f = fs::File::create(&path).at(Stage::Write)?;
                s.write_cdf_csv(std::io::BufWriter::new(f)).at(Stage::Write)?;
                println!("{label}: mean {:.2} m, max {:.2} m", s.mean_m, s.max_m);
            }
            write_json(&cfg, "eval.json", &stats)?;
        }
        Command::Demo => {
            let manifest = pipeline::run_pipeline(&cfg)?;
            for a in &manifest.artifacts {
                println!("{}  {}", a.sha256, a.path.display());
            }
        }
        Command::Compare => {
            let floor = Floor::prepare(&cfg)?;
            let report = pipeline::compare_modes(&cfg, &floor)?;
            write_json(&cfg, "comparison.json", &report)?;
            println!(
                "time ratio {:.3} (with resurvey {:.3}), energy ratio {:.3} (with resurvey {:.3})",
                report.time_ratio, report.time_ratio_with_resurvey, report.energy_ratio, report.energy_ratio_with_resurvey
            );
            for m in &report.methods {
                println!(
                    "{}: mean {:.2} m vs {:.2} m, max {:.2} m vs {:.2} m",
                    method_name(m.method),
                    m.auf_mean_m,
                    m.baseline_mean_m,
                    m.auf_max_m,
                    m.baseline_max_m
                );
            }
        }
    }
    Ok(())
}

fn method_name(m: LocMethod) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}
