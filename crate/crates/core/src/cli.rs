//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit status.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::{baseline_filter, morph_cleanup, vegetation_mask};
use crate::checkpoint;
use crate::config::Config;
use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::groundtruth::{classify_roofs, rasterize_target_dsm, triangulate_roofs, GridSpec, RoofPolygonSet};
use crate::inference::{ensemble_dsm, ensemble_masks, predict_tiled};
use crate::network::Depth;
use crate::objectives::ObjectiveSet;
use crate::raster::{load_raster, load_roof_map, mae, miou, rmse, save_raster, HeightMap, RoofClassMap};
use crate::synthcity::generate_scene;
use crate::trainer::{run_ablation, train, WeightingMode};

/// Exit status for module errors.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for unknown commands or flags.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mtdsm", version, about = "Refine stereo DSMs with a multi-task network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed applied to scene generation, sampling and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene: stereo, target and roof rasters plus polygons.
    Synth,
    /// Rasterize roof polygons over a DEM into a target DSM and roof mask.
    MakeGroundtruth(GroundTruthArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train the five objective/weighting configurations on the same data.
    Ablate(DataArgs),
    /// Predict a whole raster with one or more checkpoints.
    Infer(InferArgs),
    /// Fuse prediction rasters and roof masks.
    Ensemble(EnsembleArgs),
    /// Run the geometric vegetation filter.
    Baseline(BaselineArgs),
    /// Compare a prediction with a target.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GroundTruthArgs {
    #[arg(long)]
    polygons: PathBuf,
    #[arg(long)]
    dem: PathBuf,
    /// Output grid; the DEM's geometry is used for anything not given.
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    gsd: Option<f64>,
    #[arg(long)]
    origin_x: Option<f64>,
    #[arg(long)]
    origin_y: Option<f64>,
    /// Degrees separating flat from sloped roofs.
    #[arg(long, default_value_t = crate::groundtruth::DEFAULT_SLOPE_THRESHOLD)]
    slope_threshold: f64,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding stereo.tif, target.tif and roof.tif; a scene is
    /// generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Encoder width multiplier.
    #[arg(long)]
    width: Option<f64>,
    /// resnet101, resnet50 or resnet26.
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Objectives joined by `+`, e.g. `l1+normal+seg+gan`.
    #[arg(long)]
    objectives: Option<String>,
    /// learned or fixed.
    #[arg(long)]
    weighting: Option<String>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// One or more checkpoints; several are ensembled.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1..)]
    dsm: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    mask: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    variance_window: Option<usize>,
    #[arg(long)]
    variance_threshold: Option<f64>,
    #[arg(long)]
    open_radius: Option<usize>,
    #[arg(long)]
    close_radius: Option<usize>,
    #[arg(long)]
    fill_window: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, requires = "target_roof")]
    pred_roof: Option<PathBuf>,
    #[arg(long, requires = "pred_roof")]
    target_roof: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let Common { config, out, seed } = cli.common;
    let mut cfg = match &config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let out = Out::new(out)?;
    match cli.command {
        Command::Synth => synth(&cfg, &out),
        Command::MakeGroundtruth(a) => make_groundtruth(&a, &out),
        Command::Train(a) => {
            a.data.apply(&mut cfg)?;
            if let Some(o) = &a.objectives {
                let set: ObjectiveSet = o.parse()?;
                cfg.train.model = cfg.train.model.clone().with_objectives(set);
            }
            if let Some(w) = &a.weighting {
                cfg.train.weighting = parse_weighting(w)?;
            }
            train_cmd(&cfg, a.data.data.as_deref(), &out)
        }
        Command::Ablate(a) => {
            a.apply(&mut cfg)?;
            ablate(&cfg, a.data.as_deref(), &out)
        }
        Command::Infer(a) => infer(&mut cfg, &a, &out),
        Command::Ensemble(a) => ensemble(&a, &out),
        Command::Baseline(a) => baseline(&mut cfg, &a, &out),
        Command::Evaluate(a) => evaluate(&a, &out),
    }
}

/// The output directory; every file a command writes goes through it.
struct Out(PathBuf);

impl Out {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Out(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn snapshot(&self, cfg: &Config) -> Result<()> {
        self.text("config.toml", &cfg.to_toml()?)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        if let Some(w) = self.width {
            t.model.encoder.width = w;
        }
        if let Some(d) = &self.depth {
            t.model.encoder.depth = parse_depth(d)?;
        }
        cfg.sampling.patch_size = self.patch_size.unwrap_or(cfg.sampling.patch_size);
        cfg.validate()
    }
}

fn parse_depth(s: &str) -> Result<Depth> {
    match s {
        "resnet101" => Ok(Depth::Resnet101),
        "resnet50" => Ok(Depth::Resnet50),
        "resnet26" => Ok(Depth::Resnet26),
        _ => Err(Error::invalid(format!("unknown depth `{s}`"))),
    }
}

fn parse_weighting(s: &str) -> Result<WeightingMode> {
    match s {
        "learned" => Ok(WeightingMode::Learned),
        "fixed" => Ok(WeightingMode::Fixed),
        _ => Err(Error::invalid(format!("unknown weighting `{s}`"))),
    }
}

fn synth(cfg: &Config, out: &Out) -> Result<()> {
    cfg.scene.validate()?;
    let scene = generate_scene(&cfg.scene)?;
    save_raster(&scene.stereo, out.path("stereo.tif"))?;
    save_raster(&scene.target, out.path("target.tif"))?;
    save_raster(&scene.roof, out.path("roof.tif"))?;
    save_raster(&scene.terrain, out.path("dem.tif"))?;
    scene.polygons.save(out.path("polygons.json"))?;
    out.snapshot(cfg)?;
    if scene.skipped_buildings > 0 {
        log::warn!("{} buildings could not be placed", scene.skipped_buildings);
    }
    println!(
        "{} buildings, stereo rmse {:.3} m",
        scene.buildings.len(),
        rmse(&scene.stereo, &scene.target)?
    );
    Ok(())
}

fn make_groundtruth(a: &GroundTruthArgs, out: &Out) -> Result<()> {
    let polys = RoofPolygonSet::load(&a.polygons)?;
    let dem = load_raster(&a.dem)?;
    let base = GridSpec::of(&dem);
    let grid = GridSpec {
        rows: a.rows.unwrap_or(base.rows),
        cols: a.cols.unwrap_or(base.cols),
        gsd: a.gsd.unwrap_or(base.gsd),
        origin: (a.origin_x.unwrap_or(base.origin.0), a.origin_y.unwrap_or(base.origin.1)),
    };
    let tris = triangulate_roofs(&polys)?;
    let (target, footprint) = rasterize_target_dsm(&tris, &dem, grid)?;
    let roof = classify_roofs(&target, &footprint, a.slope_threshold)?;
    save_raster(&target, out.path("target.tif"))?;
    save_raster(&roof, out.path("roof.tif"))?;
    out.text(
        "groundtruth.toml",
        &format!(
            "polygons = {:?}\ndem = {:?}\nrows = {}\ncols = {}\ngsd = {}\norigin_x = {}\norigin_y = {}\nslope_threshold = {}\n",
            a.polygons, a.dem, grid.rows, grid.cols, grid.gsd, grid.origin.0, grid.origin.1, a.slope_threshold
        ),
    )?;
    println!("{} triangles rasterized", tris.len());
    Ok(())
}

/// The study area: rasters from `data`, else a generated scene.
fn study_area(cfg: &Config, data: Option<&Path>) -> Result<SceneSample> {
    match data {
        Some(d) => SceneSample::new(
            load_raster(d.join("stereo.tif"))?,
            load_raster(d.join("target.tif"))?,
            load_roof_map(d.join("roof.tif"))?,
        ),
        None => Ok(SceneSample::from_scene(&generate_scene(&cfg.scene)?)),
    }
}

fn train_cmd(cfg: &Config, data: Option<&Path>, out: &Out) -> Result<()> {
    let area = study_area(cfg, data)?;
    let (source, val) = cfg.training_data(&area)?;
    out.snapshot(cfg)?;
    let trained = train(&cfg.train, source.as_ref(), &val, Some(&out.0))?;
    let ws = trained.weights;
    checkpoint::save(out.path("best.safetensors"), &trained.best, &ws, trained.run.best_epoch.unwrap_or(0))?;
    checkpoint::save(out.path("last.safetensors"), &trained.last, &ws, trained.run.epochs.len())?;
    match (trained.run.best_epoch, trained.run.best_rmse) {
        (Some(e), Some(r)) => println!("best validation rmse {r:.4} m at epoch {e}"),
        _ => println!("trained {} epochs without validation", trained.run.epochs.len()),
    }
    Ok(())
}

fn ablate(cfg: &Config, data: Option<&Path>, out: &Out) -> Result<()> {
    let area = study_area(cfg, data)?;
    let (source, val) = cfg.training_data(&area)?;
    out.snapshot(cfg)?;
    let rows = run_ablation(&cfg.train, source.as_ref(), &val, Some(&out.0))?;
    for r in &rows {
        let rmse = r.best_rmse.map_or("-".into(), |v| format!("{v:.4}"));
        let epoch = r.best_epoch.map_or("-".into(), |e| e.to_string());
        println!("{:<24} {:<8} best rmse {rmse} at epoch {epoch}", r.objectives.to_string(), r.weighting.name());
    }
    Ok(())
}

fn infer(cfg: &mut Config, a: &InferArgs, out: &Out) -> Result<()> {
    let inf = &mut cfg.inference;
    inf.tile = a.tile.unwrap_or(inf.tile);
    inf.stride = a.stride.unwrap_or(inf.stride);
    inf.batch = a.batch.unwrap_or(inf.batch);
    let inf = cfg.inference;
    let input = load_raster(&a.input)?;
    let mut dsms = Vec::new();
    let mut roofs = Vec::new();
    for (i, path) in a.checkpoint.iter().enumerate() {
        let ck = checkpoint::load(path)?;
        let pred = predict_tiled(&ck.generator, &input, inf.tile, inf.stride, inf.batch)?;
        if a.checkpoint.len() > 1 {
            save_raster(&pred.dsm, out.path(&format!("dsm_{i}.tif")))?;
            if let Some(r) = &pred.roof {
                save_raster(r, out.path(&format!("roof_{i}.tif")))?;
            }
        }
        dsms.push(pred.dsm);
        roofs.extend(pred.roof);
    }
    save_raster(&ensemble_dsm(&dsms)?, out.path("dsm.tif"))?;
    if roofs.len() == dsms.len() {
        save_raster(&ensemble_masks(&roofs)?, out.path("roof.tif"))?;
    }
    out.text(
        "infer.toml",
        &format!(
            "checkpoints = {:?}\ninput = {:?}\ntile = {}\nstride = {}\nbatch = {}\n",
            a.checkpoint, a.input, inf.tile, inf.stride, inf.batch
        ),
    )?;
    println!("predicted {}x{} with {} model(s)", input.rows(), input.cols(), dsms.len());
    Ok(())
}

fn ensemble(a: &EnsembleArgs, out: &Out) -> Result<()> {
    if a.dsm.is_empty() && a.mask.is_empty() {
        return Err(Error::invalid("nothing to ensemble; pass --dsm and/or --mask"));
    }
    if !a.dsm.is_empty() {
        let maps = a.dsm.iter().map(load_raster).collect::<Result<Vec<HeightMap>>>()?;
        save_raster(&ensemble_dsm(&maps)?, out.path("dsm.tif"))?;
    }
    if !a.mask.is_empty() {
        let masks = a.mask.iter().map(load_roof_map).collect::<Result<Vec<RoofClassMap>>>()?;
        save_raster(&ensemble_masks(&masks)?, out.path("roof.tif"))?;
    }
    Ok(())
}

fn baseline(cfg: &mut Config, a: &BaselineArgs, out: &Out) -> Result<()> {
    let p = &mut cfg.baseline;
    p.variance_window = a.variance_window.unwrap_or(p.variance_window);
    p.variance_threshold = a.variance_threshold.unwrap_or(p.variance_threshold);
    p.open_radius = a.open_radius.unwrap_or(p.open_radius);
    p.close_radius = a.close_radius.unwrap_or(p.close_radius);
    p.fill_window = a.fill_window.unwrap_or(p.fill_window);
    let params = cfg.baseline;
    params.validate()?;
    let dsm = load_raster(&a.input)?;
    let filtered = baseline_filter(&dsm, &params)?;
    let mask = morph_cleanup(&vegetation_mask(&dsm, &params)?, params.open_radius, params.close_radius);
    let (rows, cols) = mask.shape();
    let labels = RoofClassMap::new(rows, cols, mask.as_slice().iter().map(|&m| m as u8).collect())?;
    save_raster(&filtered, out.path("dsm.tif"))?;
    save_raster(&labels, out.path("vegetation.tif"))?;
    out.snapshot(cfg)?;
    let flagged = mask.as_slice().iter().filter(|&&m| m).count();
    println!("{flagged} of {} pixels flagged as vegetation", rows * cols);
    Ok(())
}

/// Renders rows as a `metric,value,unit` table.
pub fn metrics_csv(rows: &[(&str, f64, &str)]) -> String {
    let mut s = String::from("metric,value,unit\n");
    for (name, value, unit) in rows {
        let _ = writeln!(s, "{name},{value:.6},{unit}");
    }
    s
}

fn evaluate(a: &EvaluateArgs, out: &Out) -> Result<()> {
    let pred = load_raster(&a.pred)?;
    let target = load_raster(&a.target)?;
    let mut rows = vec![("rmse", rmse(&pred, &target)?, "m"), ("mae", mae(&pred, &target)?, "m")];
    if let (Some(p), Some(t)) = (&a.pred_roof, &a.target_roof) {
        rows.push(("miou", miou(&load_roof_map(p)?, &load_roof_map(t)?)?, "1"));
    }
    for (name, value, unit) in &rows {
        println!("{name:<6} {value:>10.4} {unit}");
    }
    out.text("metrics.csv", &metrics_csv(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mtdsm", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mtdsm", "evaluate", "--bogus", "x"]), EXIT_USAGE);
        assert_eq!(run(["mtdsm"]), EXIT_USAGE);
    }

    #[test]
    fn module_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["mtdsm", "evaluate", "--pred", "/nonexistent.tif", "--target", "/nonexistent.tif", "--out", out]), EXIT_FAILURE);
    }

    #[test]
    fn csv_header() {
        let s = metrics_csv(&[("rmse", 1.5, "m")]);
        assert_eq!(s, "metric,value,unit\nrmse,1.500000,m\n");
    }
}
