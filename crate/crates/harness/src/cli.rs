//! The `bitloc` command line: argument parsing, subcommands and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use bitloc_core::codes::{decode_codes, encode_projection, BinaryCodeSet, KeypointCode};
use bitloc_core::geometry::{build_knn_graph, farthest_point_sample, ObjectModel, Pose};
use bitloc_core::mesh::load_mesh;
use bitloc_core::metrics::{sample_errors, summarize};
use bitloc_core::solver::{epnp, ransac_pnp, spatial_coherence_solve, CorrespondenceSet};
use bitloc_core::visibility::{sample_viewpoints, visibility_profile, VisibilityOptions};
use bitloc_net::checkpoint;
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bench::{run_benchmark, write_csv, write_json, write_report, PROFILE_RADIUS, PROFILE_VIEW_LEVEL};
use crate::config::{RunConfig, SolverKind};
use crate::error::{Error, Result};
use crate::object::SceneObject;
use crate::train::{train_toy, ToyDataset};

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for malformed arguments, configuration or input files.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures during an otherwise valid run.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bitloc", version, about = "Binary-code keypoint localization toolkit")]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving reports, checkpoints and logs.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Epnp,
    Ransac,
    Progx,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Epnp => SolverKind::Epnp,
            SolverArg::Ransac => SolverKind::Ransac,
            SolverArg::Progx => SolverKind::Progx,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Farthest-point keypoints of a mesh or of the configured object.
    Sample {
        /// PLY or OBJ mesh (default: the configured object).
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Number of keypoints (default: the configured count).
        #[arg(long)]
        count: Option<usize>,
        /// Vertex index of the first keypoint.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// k-nearest-neighbor graph over farthest-point keypoints.
    Graph {
        /// PLY or OBJ mesh (default: the configured object).
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Number of keypoints (default: the configured count).
        #[arg(long)]
        count: Option<usize>,
        /// Neighbors per keypoint (default: the configured k).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Binary codes of RoI points written as `x,y`.
    Encode {
        /// Points in RoI pixels, e.g. `176,80`.
        #[arg(required = true, allow_hyphen_values = true)]
        points: Vec<String>,
    },
    /// Cell centers of codes written as `XBITS,YBITS` (or `-` for an invisible keypoint).
    Decode {
        /// Codes as MSB-first bit strings, e.g. `101,010`.
        #[arg(required = true)]
        codes: Vec<String>,
    },
    /// Self-occlusion ratio and the resulting mask-filter decision.
    Selfocc {
        /// PLY or OBJ mesh (default: the configured object).
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Icosphere subdivision level of the viewpoints.
        #[arg(long, default_value_t = PROFILE_VIEW_LEVEL)]
        level: u32,
        /// Camera distance from the centroid, in object diameters.
        #[arg(long, default_value_t = PROFILE_RADIUS)]
        radius: f64,
        /// Vertices evaluated; larger models use a seeded subset of this size.
        #[arg(long, default_value_t = 5000)]
        max_points: usize,
        /// Flip radius as a multiple of the farthest point distance.
        #[arg(long, default_value_t = 100.0)]
        flip: f64,
    },
    /// Pose from a CSV of correspondences with columns `x,y,z,u,v`.
    Solve {
        /// CSV file with a header row.
        input: PathBuf,
        /// Solver to run (default: the configured pipeline solver).
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
    },
    /// Metrics of predicted poses against ground truth, read from a JSON list of pairs.
    Eval {
        /// JSON file of `{predicted, ground_truth}` pose records.
        input: PathBuf,
    },
    /// Synthetic benchmark of the configured pipeline.
    SynthBench,
    /// Two-phase training of the toy network.
    TrainToy,
}

/// A pose in files: row-major rotation and translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Ok(Pose::new(r, Vector3::from(self.translation))?)
    }
}

/// One line of the `eval` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    /// `null` marks a failed prediction.
    pub predicted: Option<PoseRecord>,
    pub ground_truth: PoseRecord,
}

#[derive(Debug, Deserialize)]
struct CorrespondenceRow {
    x: f64,
    y: f64,
    z: f64,
    u: f64,
    v: f64,
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    Ok(&cli.out_dir)
}

fn model_for(mesh: &Option<PathBuf>, cfg: &RunConfig) -> Result<ObjectModel> {
    match mesh {
        Some(path) => Ok(load_mesh(path)?),
        None => Ok(SceneObject::from_config(&cfg.object)?.model),
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::config(format!("expected `x,y`, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_bits(s: &str) -> Option<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

fn bits_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_code(s: &str, depth: u32) -> Result<KeypointCode> {
    if s == "-" {
        return Ok(KeypointCode::invisible(depth));
    }
    let bad = || Error::config(format!("expected `XBITS,YBITS` with {depth} bits each, got `{s}`"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    let (x, y) = (parse_bits(x).ok_or_else(bad)?, parse_bits(y).ok_or_else(bad)?);
    if x.len() != depth as usize || y.len() != depth as usize {
        return Err(bad());
    }
    Ok(KeypointCode { visible: true, x, y })
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Sample { mesh, count, start } => {
            let model = model_for(mesh, &cfg)?;
            let set = farthest_point_sample(&model, count.unwrap_or(cfg.keypoints), *start)?;
            let dir = out_dir(cli)?;
            write_points(&dir.join("keypoints.csv"), &set.indices, &set.points)?;
            write_json(&dir.join("keypoints.json"), &serde_json::json!({
                "indices": set.indices,
                "points": set.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
            }))?;
            println!("{} keypoints written to {}", set.points.len(), dir.display());
        }
        Command::Graph { mesh, count, k } => {
            let model = model_for(mesh, &cfg)?;
            let set = farthest_point_sample(&model, count.unwrap_or(cfg.keypoints), 0)?;
            let graph = build_knn_graph(&set.points, k.unwrap_or(cfg.knn))?;
            let dir = out_dir(cli)?;
            write_csv(&dir.join("graph.csv"), |w| {
                w.write_record(["source", "target"])?;
                for (i, j) in graph.edges() {
                    w.write_record([i.to_string(), j.to_string()])?;
                }
                Ok(())
            })?;
            write_json(&dir.join("graph.json"), &serde_json::json!({
                "k": graph.k,
                "neighbors": graph.adjacency(),
            }))?;
            println!("{} nodes, {} edges written to {}", graph.node_count(), graph.edge_count(), dir.display());
        }
        Command::Encode { points } => {
            let mut rows = Vec::new();
            for s in points {
                let (x, y) = parse_pair(s)?;
                let code = encode_projection(&Point2::new(x, y), &cfg.grid)?;
                let line = if code.visible {
                    format!("{},{}", bits_string(&code.x), bits_string(&code.y))
                } else {
                    "-".to_string()
                };
                println!("{line}");
                rows.push(serde_json::json!({
                    "point": [x, y],
                    "visible": code.visible,
                    "x": bits_string(&code.x),
                    "y": bits_string(&code.y),
                }));
            }
            write_json(&out_dir(cli)?.join("codes.json"), &rows)?;
        }
        Command::Decode { codes } => {
            let parsed = codes.iter().map(|s| parse_code(s, cfg.grid.depth)).collect::<Result<Vec<_>>>()?;
            let set = BinaryCodeSet::new(cfg.grid.depth, parsed)?;
            let decoded = decode_codes(&set, &cfg.grid);
            let mut rows = Vec::new();
            for (s, p) in codes.iter().zip(&decoded) {
                match p {
                    Some(p) => println!("{},{}", p.x, p.y),
                    None => println!("invalid"),
                }
                rows.push(serde_json::json!({ "code": s, "point": p.map(|p| [p.x, p.y]) }));
            }
            write_json(&out_dir(cli)?.join("decoded.json"), &rows)?;
        }
        Command::Selfocc { mesh, level, radius, max_points, flip } => {
            if !(*radius > 0.0) || *max_points == 0 || !(*flip >= 1.0) {
                return Err(Error::config("selfocc needs --radius > 0, --max-points > 0 and --flip >= 1"));
            }
            let model = model_for(mesh, &cfg)?;
            let views = sample_viewpoints(*level, *radius);
            let opts = VisibilityOptions {
                max_points: Some(*max_points),
                radius_multiplier: *flip,
                ..VisibilityOptions::default()
            };
            let profile = visibility_profile(&model, &views, &opts)?;
            let filter = profile.filter_decision(cfg.object.textureless);
            let dir = out_dir(cli)?;
            write_csv(&dir.join("visibility.csv"), |w| {
                w.write_record(["vertex", "visibility"])?;
                for (i, v) in profile.indices.iter().zip(&profile.v) {
                    w.write_record([i.to_string(), v.to_string()])?;
                }
                Ok(())
            })?;
            write_json(&dir.join("selfocc.json"), &serde_json::json!({
                "r_so": profile.r_so,
                "textureless": cfg.object.textureless,
                "filter": filter,
                "viewpoints": views.len(),
                "vertices": profile.indices,
                "per_vertex_V": profile.v,
            }))?;
            println!("r_so = {:.4}, mask filter {}", profile.r_so, if filter { "on" } else { "off" });
        }
        Command::Solve { input, solver } => {
            let rows = read_correspondences(input)?;
            let set = CorrespondenceSet::new(
                rows.iter().map(|r| Point3::new(r.x, r.y, r.z)).collect(),
                rows.iter().map(|r| Point2::new(r.u, r.v)).collect(),
            )?;
            let kind = solver.map(SolverKind::from).unwrap_or(cfg.pipeline.solver);
            let (pose, inliers) = match kind {
                SolverKind::Epnp => (epnp(&set, &cfg.intrinsics)?, None),
                SolverKind::Ransac => {
                    let e = ransac_pnp(&set, &cfg.intrinsics, &cfg.solver)?;
                    (e.pose, Some(e.inliers))
                }
                SolverKind::Progx => {
                    let e = spatial_coherence_solve(&set, &cfg.intrinsics, &cfg.solver)?;
                    (e.pose, Some(e.inliers))
                }
            };
            let dir = out_dir(cli)?;
            let record = PoseRecord::from(&pose);
            write_json(&dir.join("pose.json"), &serde_json::json!({
                "pose": record,
                "inliers": inliers.as_ref().map(|v| v.iter().filter(|&&b| b).count()),
            }))?;
            write_csv(&dir.join("pose.csv"), |w| {
                w.write_record(["r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx", "ty", "tz"])?;
                let values = record.rotation.iter().flatten().chain(&record.translation);
                w.write_record(values.map(|v| v.to_string()))
            })?;
            println!("{}", serde_json::to_string(&record).expect("pose serializes"));
        }
        Command::Eval { input } => {
            let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let pairs: Vec<PosePair> =
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", input.display())))?;
            let object = SceneObject::from_config(&cfg.object)?;
            let errors = pairs
                .iter()
                .map(|p| {
                    let gt = p.ground_truth.to_pose()?;
                    let pred = p.predicted.map(|r| r.to_pose()).transpose()?;
                    Ok(sample_errors(pred.as_ref(), &gt, &object.model, &object.symmetry))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = summarize(&errors, object.diameter(), &cfg.metrics)?;
            let dir = out_dir(cli)?;
            write_json(&dir.join("eval.json"), &report)?;
            let (head, row) = report.csv_columns();
            write_csv(&dir.join("eval.csv"), |w| {
                w.write_record(&head)?;
                w.write_record(&row)
            })?;
            print_table(&head, &row);
        }
        Command::SynthBench => {
            let report = run_benchmark(&cfg)?;
            let dir = out_dir(cli)?;
            write_report(&report, dir)?;
            let (head, row) = report.metrics.csv_columns();
            print_table(&head, &row);
            println!("{} samples, {} failures, report in {}", report.metrics.samples, report.metrics.failures, dir.display());
        }
        Command::TrainToy => {
            let data = ToyDataset::generate(&cfg)?;
            let outcome = train_toy(&cfg, &data)?;
            let dir = out_dir(cli)?;
            let ckpt = dir.join("toy.ckpt");
            checkpoint::save(&outcome.net, &ckpt).map_err(|e| Error::net_at(&ckpt, e))?;
            write_json(&dir.join("train_log.json"), &outcome.log)?;
            write_csv(&dir.join("train_steps.csv"), |w| {
                w.write_record(["step", "phase", "l_v", "l_x", "l_y", "l_mask", "total"])?;
                for s in &outcome.log.steps {
                    let l = &s.loss;
                    w.write_record([
                        s.step.to_string(),
                        format!("{:?}", s.phase).to_lowercase(),
                        l.l_v.to_string(),
                        l.l_x.to_string(),
                        l.l_y.to_string(),
                        l.l_mask.to_string(),
                        l.total.to_string(),
                    ])?;
                }
                Ok(())
            })?;
            write_csv(&dir.join("train_evals.csv"), |w| {
                w.write_record(["step", "train_loss", "predicted_fusion_loss", "train_median_px", "test_median_px"])?;
                for e in &outcome.log.evals {
                    w.write_record([
                        e.step.to_string(),
                        e.train_loss.total.to_string(),
                        e.predicted_fusion_loss.to_string(),
                        e.train_median_px.to_string(),
                        e.test_median_px.to_string(),
                    ])?;
                }
                Ok(())
            })?;
            if let Some(last) = outcome.log.last_eval() {
                println!("step {}: loss {:.4}, test median {:.2} px", last.step, last.train_loss.total, last.test_median_px);
            }
            println!("checkpoint written to {}", ckpt.display());
        }
    }
    Ok(())
}

fn read_correspondences(path: &Path) -> Result<Vec<CorrespondenceRow>> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::config(format!("{}: {kind:?}", path.display())),
    })?;
    let rows: Vec<CorrespondenceRow> = reader.deserialize().collect::<csv::Result<_>>().map_err(wrap)?;
    Ok(rows)
}

fn write_points(path: &Path, indices: &[usize], points: &[Point3<f64>]) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(["vertex", "x", "y", "z"])?;
        for (i, p) in indices.iter().zip(points) {
            w.write_record([i.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
        }
        Ok(())
    })
}

fn print_table(head: &[String], row: &[String]) {
    println!("{}", head.join(" | "));
    println!("{}", row.join(" | "));
}
