use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use relbev_core::degradation::{corrupt_test, CorruptionSpec, ViewSet};
use relbev_core::encoder::SceneGeometry;
use relbev_core::heads::{DetectionRecord, FrameDetections};
use relbev_core::metrics::{evaluate, Frame, MetricConfig, MetricReport};
use relbev_core::model::{self, ModelConfig};
use relbev_core::sim::{generate_scene, Scene};
use relbev_core::tensor::{write_tensor, GradCheckOptions, GradCheckReport, Tape};
use relbev_core::train::{loss_curve_csv, model_gradcheck, train, TrainSample};
use relbev_core::{named_rng, ParamSet, Tensor};
use serde_json::json;

use crate::bundle::{self, load_scene, load_views, sample_id};
use crate::config::{Corrupt, GridPreset, RunConfig};
use crate::{pgm, CliError, Command, Common, EXIT_TOLERANCE};

type CmdResult = Result<String, CliError>;

pub fn dispatch(cmd: &Command) -> CmdResult {
    match cmd {
        Command::Simulate { common, grid } => simulate(common, *grid),
        Command::Encode { common, bundle, weights, corrupt } => encode(common, bundle, weights.as_deref(), *corrupt),
        Command::Evaluate { common, detections, gt } => cmd_evaluate(common, detections, gt),
        Command::Gradcheck { common, max_elems } => gradcheck(common, *max_elems),
        Command::TrainToy { common, steps, grid } => train_toy(common, *steps, *grid),
        Command::WeightsDump { common, bundle, weights, corrupt } => weights_dump(common, bundle, weights.as_deref(), *corrupt),
    }
}

fn run_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        Some(p) if !p.exists() => Err(CliError::usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn out_dir(run: &RunConfig, common: &Common) -> Result<PathBuf, CliError> {
    let dir = run.out_dir(common.out.as_deref());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// The only file allowed to differ between identical runs.
fn write_meta(dir: &Path, command: &str, seed: u64) -> Result<(), CliError> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({ "command": command, "seed": seed, "timestamp_unix": ts, "version": env!("CARGO_PKG_VERSION") });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).map_err(|e| CliError::usage(e.to_string()))? + "\n")?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

fn write_tensor_file(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Loads `weights` or initializes from the seed; loaded sets must match the
/// configured architecture exactly.
fn load_params(cfg: &ModelConfig, scene: &Scene, seed: u64, weights: Option<&Path>) -> Result<ParamSet, CliError> {
    let fresh = model::init_params(cfg, &scene.config.grid, seed)?;
    let Some(path) = weights else { return Ok(fresh) };
    require(path, "weights file")?;
    let loaded = ParamSet::load(&mut BufReader::new(File::open(path)?))?;
    let shapes = |ps: &ParamSet| ps.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect::<Vec<_>>();
    if shapes(&loaded) != shapes(&fresh) {
        return Err(CliError::usage(format!("weights in {} do not match the model configuration", path.display())));
    }
    Ok(loaded)
}

struct Prepared {
    run: RunConfig,
    seed: u64,
    scene: Scene,
    cfg: ModelConfig,
    geom: SceneGeometry,
    views: ViewSet,
    corruption: CorruptionSpec,
    params: ParamSet,
}

fn prepare(common: &Common, bundle_dir: &Path, weights: Option<&Path>, corrupt: Option<Corrupt>) -> Result<Prepared, CliError> {
    require(bundle_dir, "bundle")?;
    let run = run_config(common)?;
    let scene = load_scene(bundle_dir)?;
    let seed = common.seed.or(run.seed).unwrap_or(scene.config.seed);
    let cfg = run.model();
    let geom = model::scene_geometry(&cfg, &scene.config.grid, &scene.rigs)?;
    let views = ViewSet { images: load_views(bundle_dir, scene.rigs.len())?, dummy: scene.rigs.iter().map(|r| r.is_dummy).collect() };
    let (views, corruption) = match corrupt.or(run.corrupt).unwrap_or_default() {
        Corrupt::None => (views, CorruptionSpec::NONE),
        Corrupt::Auto => corrupt_test(&views, &sample_id(&scene))?,
    };
    let params = load_params(&cfg, &scene, seed, weights.or(run.weights.as_deref()))?;
    Ok(Prepared { run, seed, scene, cfg, geom, views, corruption, params })
}

fn check_finite(t: &Tensor, what: &str) -> Result<(), CliError> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::numeric(format!("non-finite value in {what}")))
    }
}

pub fn simulate(common: &Common, grid: Option<GridPreset>) -> CmdResult {
    let run = run_config(common)?;
    let seed = run.seed(common.seed);
    let sc = run.scene(seed, grid)?;
    let scene = generate_scene(&sc, &mut named_rng(seed, "scene"))?;
    let dir = out_dir(&run, common)?;
    bundle::write_bundle(&dir, &scene)?;
    write_meta(&dir, "simulate", seed)?;
    Ok(format!("wrote {}-camera scene with {} agents to {}", scene.rigs.len(), scene.agents.len(), dir.display()))
}

pub fn encode(common: &Common, bundle_dir: &Path, weights: Option<&Path>, corrupt: Option<Corrupt>) -> CmdResult {
    let p = prepare(common, bundle_dir, weights, corrupt)?;
    let mut tape = Tape::new();
    let fwd = model::forward(&mut tape, &p.params, &p.cfg, &p.geom, &p.views.images, &[], None, true)?;
    let bev = tape.value(fwd.bev).clone();
    check_finite(&bev, "encoder output")?;
    let trace = fwd.trace.as_ref().and_then(|t| t.layers.last()).ok_or_else(|| CliError::numeric("encoder produced no layer trace"))?;
    let boxes = model::decode(&tape, &fwd, &p.geom.grid)?;
    let dets = FrameDetections { frame: sample_id(&p.scene), detections: boxes.iter().map(DetectionRecord::from).collect() };

    let dir = out_dir(&p.run, common)?;
    write_tensor_file(&dir.join("bev.rbt"), &bev)?;
    write_tensor_file(&dir.join("fusion.rbt"), &trace.fusion.weights)?;
    write_json(&dir.join("detections.json"), &dets)?;
    write_json(&dir.join("corruption.json"), &p.corruption)?;
    write_meta(&dir, "encode", p.seed)?;
    Ok(format!("encoded {} cells x {} channels, {} detections, to {}", bev.shape()[0], bev.shape()[1], dets.detections.len(), dir.display()))
}

fn read_detections(path: &Path) -> Result<Vec<FrameDetections>, CliError> {
    require(path, "detections file")?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<Vec<FrameDetections>>(&text)
        .or_else(|_| serde_json::from_str::<FrameDetections>(&text).map(|f| vec![f]))
        .map_err(|e| CliError::usage(format!("malformed detections {}: {e}", path.display())))
}

pub fn evaluate_files(detections: &Path, gt: &[PathBuf]) -> Result<MetricReport, CliError> {
    let dets = read_detections(detections)?;
    if dets.len() != gt.len() {
        return Err(CliError::usage(format!("{} detection frames but {} ground-truth bundles", dets.len(), gt.len())));
    }
    let mut frames = Vec::with_capacity(dets.len());
    for (d, g) in dets.iter().zip(gt) {
        require(g, "ground truth")?;
        let scene = load_scene(g)?;
        if d.frame != sample_id(&scene) {
            return Err(CliError::usage(format!("detections for `{}` paired with ground truth `{}`", d.frame, sample_id(&scene))));
        }
        frames.push(Frame { preds: d.detections.iter().map(Into::into).collect(), gts: scene.agents });
    }
    Ok(evaluate(&frames, &MetricConfig::default())?)
}

fn cmd_evaluate(common: &Common, detections: &Path, gt: &[PathBuf]) -> CmdResult {
    let run = run_config(common)?;
    let report = evaluate_files(detections, gt)?;
    let dir = out_dir(&run, common)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_meta(&dir, "evaluate", run.seed(common.seed))?;
    Ok(format!("mAP {:.4} NDS {:.4} over {} frames", report.map, report.nds, gt.len()))
}

pub fn gradcheck_csv(report: &GradCheckReport) -> String {
    let mut s = String::from("param,checked,max_rel_err,analytic,numeric,pass\n");
    for p in &report.params {
        s.push_str(&format!("{},{},{:e},{:e},{:e},{}\n", p.name, p.checked, p.max_rel_err, p.analytic, p.numeric, p.max_rel_err <= report.tol));
    }
    s
}

pub fn gradcheck(common: &Common, max_elems: usize) -> CmdResult {
    let run = run_config(common)?;
    let seed = run.seed(common.seed);
    if max_elems == 0 {
        return Err(CliError::usage("--max-elems must be positive"));
    }
    let opts = GradCheckOptions { max_elems_per_param: Some(max_elems), ..Default::default() };
    let report = model_gradcheck(seed, &opts)?;
    let dir = out_dir(&run, common)?;
    std::fs::write(dir.join("gradcheck.csv"), gradcheck_csv(&report))?;
    write_meta(&dir, "gradcheck", seed)?;
    let summary = format!("{} parameters, max relative error {:.3e} (tolerance {:e})", report.params.len(), report.max_rel_err(), report.tol);
    if report.passed() {
        Ok(summary)
    } else {
        let worst: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        Err(CliError { code: EXIT_TOLERANCE, message: format!("{summary}; breached by {}", worst.join(", ")) })
    }
}

pub fn train_toy(common: &Common, steps: Option<usize>, grid: Option<GridPreset>) -> CmdResult {
    let run = run_config(common)?;
    let seed = run.seed(common.seed);
    let mut tc = run.train.clone().unwrap_or_default();
    tc.seed = seed;
    if let Some(s) = steps {
        tc.steps = s;
    }
    let cfg = run.model();
    let sc = run.scene(seed, grid)?;
    let scene = generate_scene(&sc, &mut named_rng(seed, "scene"))?;
    let sample = TrainSample::from_scene(&sample_id(&scene), &scene, &cfg)?;
    let mut ps = load_params(&cfg, &scene, seed, run.weights.as_deref())?;
    let curve = train(&mut ps, &cfg, std::slice::from_ref(&sample), &tc)?;
    if let Some(i) = curve.iter().position(|b| !b.total.is_finite()) {
        return Err(CliError::numeric(format!("train: loss is non-finite at step {i}")));
    }
    let dir = out_dir(&run, common)?;
    std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    let mut w = BufWriter::new(File::create(dir.join("weights.rbp"))?);
    ps.save(&mut w)?;
    w.flush()?;
    write_json(&dir.join("train_config.json"), &tc)?;
    write_meta(&dir, "train-toy", seed)?;
    let (first, last) = (curve.first().map_or(f64::NAN, |b| b.total), curve.last().map_or(f64::NAN, |b| b.total));
    Ok(format!("{} steps, total loss {first:.4} -> {last:.4}, written to {}", curve.len(), dir.display()))
}

pub fn weights_dump(common: &Common, bundle_dir: &Path, weights: Option<&Path>, corrupt: Option<Corrupt>) -> CmdResult {
    let p = prepare(common, bundle_dir, weights, corrupt)?;
    let mut tape = Tape::new();
    let fwd = model::forward(&mut tape, &p.params, &p.cfg, &p.geom, &p.views.images, &[], None, true)?;
    let layers = fwd.trace.map(|t| t.layers).unwrap_or_default();
    let layer = layers.len().checked_sub(1).ok_or_else(|| CliError::numeric("encoder produced no layer trace"))?;
    let field = &layers[layer].fusion;
    check_finite(&field.weights, "fusion weights")?;
    let (rows, cols) = (p.geom.grid.rows(), p.geom.grid.cols());
    let n_cams = field.num_cams();
    let w = field.weights.data();

    let dir = out_dir(&p.run, common)?;
    let mut cams = Vec::with_capacity(n_cams);
    for n in 0..n_cams {
        let column: Vec<f64> = (0..rows * cols).map(|c| w[c * n_cams + n]).collect();
        let file = format!("omega_cam{n}.pgm");
        pgm::write(&dir.join(&file), cols, rows, &pgm::quantize(&column))?;
        let visible = (0..rows * cols).filter(|&c| p.geom.visibility.get(c, n)).count();
        cams.push(json!({
            "index": n,
            "file": file,
            "dummy": p.scene.rigs[n].is_dummy,
            "visible_cells": visible,
            "weight_sum": column.iter().sum::<f64>(),
            "max_weight": column.iter().copied().fold(0.0, f64::max),
        }));
    }
    let sidecar = json!({
        "layer": layer,
        "rows": rows,
        "cols": cols,
        "cell_order": "row-major, row index along y",
        "pixel": "round(255 * weight)",
        "uncovered_cells": field.uncovered.iter().filter(|&&u| u).count(),
        "corruption": p.corruption,
        "cameras": cams,
    });
    write_json(&dir.join("omega.json"), &sidecar)?;
    write_meta(&dir, "weights-dump", p.seed)?;
    Ok(format!("wrote {n_cams} fusion-weight maps ({rows}x{cols}) to {}", dir.display()))
}
