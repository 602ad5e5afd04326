//! Alternating generator/discriminator optimization with learned task
//! weights, per-epoch validation and ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Batch, SampleSource, SceneSample, HEIGHT_RANGE};
use crate::error::{Error, Result};
use crate::inference::{argmax_planes, PatchModel, PatchPrediction};
use crate::network::{Discriminator, Generator, ModelSpec};
use crate::nn::{Adam, AdamConfig, Graph, Mode, ScalarAdam, Tensor};
use crate::objectives::{
    combine_multitask, discriminator_loss, gan_generator_loss, l1_loss, normal_loss, seg_loss, LossReport, Objective,
    ObjectiveSet, PlaneShape, RawLosses, WeightState,
};
use crate::raster::{ConfusionCounts, Metrics, NUM_CLASSES};

/// Whether the log-variances are optimized or frozen at their start values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    #[default]
    Learned,
    Fixed,
}

impl WeightingMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightingMode::Learned => "learned",
            WeightingMode::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub weights: WeightState,
    pub weighting: WeightingMode,
    /// Learning rate of the log-variances; the network rate when absent.
    pub weight_learning_rate: Option<f64>,
    /// Validate every this many epochs (the last epoch is always validated).
    pub validate_every: usize,
    /// Discriminator width multiplier; the encoder's when absent.
    pub disc_width: Option<f64>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 5,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 100,
            seed: 0,
            model: ModelSpec::default(),
            weights: WeightState::default(),
            weighting: WeightingMode::Learned,
            weight_learning_rate: None,
            validate_every: 1,
            disc_width: None,
            eval_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        for (name, lr) in [("learning_rate", Some(self.learning_rate)), ("weight_learning_rate", self.weight_learning_rate)] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Config(format!("{name} must be positive")));
                }
            }
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config("adam betas must lie in [0, 1)".into()));
            }
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be at least 1".into()));
        }
        if let Some(w) = self.disc_width {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config("disc_width must be positive".into()));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, beta1: self.adam_beta1, beta2: self.adam_beta2, ..AdamConfig::default() }
    }

    pub fn objectives(&self) -> ObjectiveSet {
        self.model.objectives
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
    /// Log-variances after the step.
    pub weights: WeightState,
    pub disc_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_rmse: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingRun {
    /// Validation RMSE per validated epoch.
    pub fn val_rmse(&self) -> Vec<(usize, f64)> {
        self.epochs.iter().filter_map(|e| e.val.as_ref().map(|m| (e.epoch, m.rmse))).collect()
    }

    /// First validated epoch whose RMSE is at most `rmse`.
    pub fn first_epoch_reaching(&self, rmse: f64) -> Option<usize> {
        self.val_rmse().into_iter().find(|&(_, r)| r <= rmse).map(|(e, _)| e)
    }

    pub fn step_csv(&self) -> String {
        let mut out = format!("epoch,{},disc\n", LossReport::csv_header());
        for s in &self.steps {
            let disc = s.disc_loss.map_or(String::new(), |d| format!("{d:e}"));
            let _ = writeln!(out, "{},{},{disc}", s.epoch, s.report.csv_row(s.step));
        }
        out
    }

    pub fn weight_csv(&self) -> String {
        let mut out = String::from("step,s_l1,s_normal,s_seg,s_gan\n");
        for s in &self.steps {
            let w = s.weights;
            let _ = writeln!(out, "{},{:e},{:e},{:e},{:e}", s.step, w.s_l1, w.s_n, w.s_seg, w.s_gan);
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,steps,mean_total,val_rmse,val_mae,val_miou\n");
        for e in &self.epochs {
            let (rmse, mae, miou) = match &e.val {
                Some(m) => (format!("{:e}", m.rmse), format!("{:e}", m.mae), m.miou.map_or(String::new(), |v| format!("{v:e}"))),
                None => Default::default(),
            };
            let _ = writeln!(out, "{},{},{:e},{rmse},{mae},{miou}", e.epoch, e.steps, e.mean_total);
        }
        out
    }
}

/// A finished run and its models.
#[derive(Clone, Debug)]
pub struct Trained {
    pub run: TrainingRun,
    /// Generator at the best validation epoch (the last one if never
    /// validated).
    pub best: Generator,
    pub last: Generator,
    pub weights: WeightState,
}

/// Pooled error sums over many patches.
#[derive(Clone, Debug, Default)]
struct MetricSums {
    sq: f64,
    abs: f64,
    n: usize,
    confusion: Option<ConfusionCounts>,
}

impl MetricSums {
    fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::NoValidCells);
        }
        let n = self.n as f64;
        let miou = self.confusion.as_ref().map(|c| c.miou()).transpose()?;
        Ok(Metrics { rmse: (self.sq / n).sqrt(), mae: self.abs / n, miou })
    }
}

/// Height and class metrics of `model` pooled over every validation pixel.
pub fn validate(model: &dyn PatchModel, val: &[SceneSample], batch: usize) -> Result<Metrics> {
    let mut sums = MetricSums::default();
    for chunk in val.chunks(batch.max(1)) {
        let inputs: Vec<_> = chunk.iter().map(|s| s.input.clone()).collect();
        let preds = model.predict_patches(&inputs)?;
        for (s, PatchPrediction { dsm, probs }) in chunk.iter().zip(preds) {
            dsm.ensure_same_shape(&s.target)?;
            for r in 0..dsm.rows() {
                for c in 0..dsm.cols() {
                    if let (Some(p), Some(t)) = (dsm.value(r, c), s.target.value(r, c)) {
                        sums.sq += (p - t) * (p - t);
                        sums.abs += (p - t).abs();
                        sums.n += 1;
                    }
                }
            }
            if let Some(probs) = probs {
                let labels = argmax_planes(&probs, s.roof.labels().len());
                let conf = sums.confusion.get_or_insert_with(ConfusionCounts::default);
                for (&p, &t) in labels.iter().zip(s.roof.labels()) {
                    conf.add(p, t);
                }
            }
        }
    }
    sums.finish()
}

/// Passes the input through unchanged.
pub struct IdentityModel;

impl PatchModel for IdentityModel {
    fn predict_patches(&self, inputs: &[crate::raster::HeightMap]) -> Result<Vec<PatchPrediction>> {
        Ok(inputs.iter().map(|p| PatchPrediction { dsm: p.clone(), probs: None }).collect())
    }
}

/// Files of a run directory.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let dir = RunDir { root: root.to_path_buf() };
        let snapshot = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
        dir.write("config.toml", &snapshot)?;
        dir.write(
            "run.txt",
            "single-threaded f32 CPU run; results depend only on the config and seed on a given platform\n",
        )?;
        Ok(dir)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn flush(&self, run: &TrainingRun) -> Result<()> {
        self.write("steps.csv", &run.step_csv())?;
        self.write("weights.csv", &run.weight_csv())?;
        self.write("epochs.csv", &run.epoch_csv())
    }
}

/// Raw objective values and gradients for one generator pass.
struct GeneratorLosses {
    raw: RawLosses,
    grad_l1: Vec<f64>,
    grad_n: Option<Vec<f64>>,
    grad_seg: Option<Vec<f64>>,
    /// Gradient of the adversarial term with respect to the normalized
    /// prediction.
    grad_gan: Option<Tensor>,
}

/// Trains from scratch; writes logs and checkpoints under `out` if given.
pub fn train(
    cfg: &TrainConfig,
    source: &dyn SampleSource,
    val: &[SceneSample],
    out: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    let active = cfg.objectives();
    let mut gen = Generator::new(&cfg.model, cfg.seed)?;
    let disc_width = cfg.disc_width.unwrap_or(cfg.model.encoder.width);
    let mut disc = active
        .contains(Objective::Gan)
        .then(|| Discriminator::new(disc_width, cfg.seed ^ 0x9e37_79b9_7f4a_7c15));
    let mut gen_opt = Adam::new(cfg.adam(cfg.learning_rate), gen.store());
    let mut disc_opt = disc.as_ref().map(|d| Adam::new(cfg.adam(cfg.learning_rate), d.store()));
    let mut weight_opt = ScalarAdam::new(cfg.adam(cfg.weight_learning_rate.unwrap_or(cfg.learning_rate)), 3);
    let mut weights = cfg.weights;
    let dir = out.map(|p| RunDir::create(p, cfg)).transpose()?;

    let mut run = TrainingRun { steps: Vec::new(), epochs: Vec::new(), best_epoch: None, best_rmse: None, checkpoints: Vec::new() };
    let mut best = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let samples = source.epoch(epoch as u64 - 1)?;
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in samples.chunks(cfg.batch_size) {
            let batch = Batch::new(chunk)?;
            let (report, disc_loss) = train_step(
                cfg,
                &batch,
                &mut gen,
                &mut gen_opt,
                disc.as_mut().zip(disc_opt.as_mut()),
                &mut weights,
                &mut weight_opt,
                step,
            )?;
            total += report.total;
            steps += 1;
            run.steps.push(StepRecord { step, epoch, report, weights, disc_loss });
            step += 1;
        }
        let validate_now = !val.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
        let metrics = validate_now.then(|| validate(&gen, val, cfg.eval_batch)).transpose()?;
        if let Some(m) = &metrics {
            log::info!("epoch {epoch}: val rmse {:.4} mae {:.4}", m.rmse, m.mae);
            if run.best_rmse.is_none_or(|b| m.rmse < b) {
                run.best_rmse = Some(m.rmse);
                run.best_epoch = Some(epoch);
                best = Some(gen.clone());
                if let Some(dir) = &dir {
                    let path = dir.root.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"));
                    checkpoint::save(&path, &gen, &weights, epoch)?;
                    let manifest = serde_json::json!({ "best_epoch": epoch, "val_rmse": m.rmse, "checkpoint": path });
                    dir.write("best.json", &serde_json::to_string_pretty(&manifest)?)?;
                    run.checkpoints.push(path);
                }
            }
        }
        run.epochs.push(EpochRecord { epoch, steps, mean_total: total / steps.max(1) as f64, val: metrics });
        if let Some(dir) = &dir {
            dir.flush(&run)?;
        }
    }
    let best = best.unwrap_or_else(|| gen.clone());
    Ok(Trained { run, best, last: gen, weights })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    batch: &Batch,
    gen: &mut Generator,
    gen_opt: &mut Adam,
    disc: Option<(&mut Discriminator, &mut Adam)>,
    weights: &mut WeightState,
    weight_opt: &mut ScalarAdam,
    step: usize,
) -> Result<(LossReport, Option<f64>)> {
    let active = cfg.objectives();
    let [n, _, h, w] = batch.input.shape();

    let mut g = Graph::new(gen.store(), Mode::Train);
    let x = g.input(batch.input.clone());
    let out = gen.forward(&mut g, x)?;
    let pred = g.value(out.dsm).clone();
    let logits = out.seg.map(|s| g.value(s).clone());
    let disc_ref = disc.as_ref().map(|(d, _)| &**d);
    let losses = generator_losses(batch, &pred, logits.as_ref(), disc_ref, active)?;
    let report = combine_multitask(&losses.raw, weights, active)?;
    if !report.total.is_finite() {
        return Err(Error::Divergence { step, total: report.total });
    }

    // seeds: d total / d output = sum of weight * d raw / d output
    let wl1 = report.raw_weight(Objective::L1);
    let wn = report.raw_weight(Objective::Normal);
    let mut dsm_seed: Vec<f32> = losses.grad_l1.iter().map(|&v| (wl1 * v) as f32).collect();
    if let Some(gn) = &losses.grad_n {
        dsm_seed.iter_mut().zip(gn).for_each(|(s, &v)| *s += (wn * v) as f32);
    }
    if let Some(gg) = &losses.grad_gan {
        let wg = report.raw_weight(Objective::Gan) as f32;
        dsm_seed.iter_mut().zip(gg.data()).for_each(|(s, &v)| *s += wg * v);
    }
    let mut seeds = vec![(out.dsm, Tensor::from_vec([n, 1, h, w], dsm_seed)?)];
    if let (Some(seg), Some(gs)) = (out.seg, &losses.grad_seg) {
        let ws = report.raw_weight(Objective::Seg);
        seeds.push((seg, Tensor::from_vec([n, NUM_CLASSES, h, w], gs.iter().map(|&v| (ws * v) as f32).collect())?));
    }
    let grads = g.backward(seeds);
    let bn = g.take_bn_updates();
    drop(g);
    gen_opt.step(gen.store_mut(), &grads.into_params());
    gen.store_mut().apply_bn_updates(&bn);

    if cfg.weighting == WeightingMode::Learned {
        let mut s = weights.learnable();
        let gs = [Objective::L1, Objective::Normal, Objective::Seg].map(|o| report.grad_s(o));
        weight_opt.step(&mut s, &gs);
        weights.set_learnable(s);
    }

    let disc_loss = match disc {
        Some((d, opt)) => Some(discriminator_step(d, opt, batch, pred)?),
        None => None,
    };
    Ok((report, disc_loss))
}

fn generator_losses(
    batch: &Batch,
    pred: &Tensor,
    logits: Option<&Tensor>,
    disc: Option<&Discriminator>,
    active: ObjectiveSet,
) -> Result<GeneratorLosses> {
    let [_, _, h, w] = pred.shape();
    let plane = PlaneShape::new(h, w);
    let px = h * w;
    // losses are measured in meters; the offset cancels, the scale does not
    let to_m = |t: &Tensor| -> Vec<f64> {
        t.data().iter().enumerate().map(|(i, &v)| batch.norms[i / px].inverse(v as f64)).collect()
    };
    let pred_m = to_m(pred);
    let target_m = to_m(&batch.target);
    let mut raw = RawLosses::default();

    let l1 = l1_loss(&pred_m, &target_m)?;
    raw.set(Objective::L1, l1.value);
    let grad_l1 = l1.grad.iter().map(|g| g * HEIGHT_RANGE).collect();

    let grad_n = if active.contains(Objective::Normal) {
        let nl = normal_loss(&pred_m, &target_m, plane, batch.gsd)?;
        raw.set(Objective::Normal, nl.value);
        Some(nl.grad.iter().map(|g| g * HEIGHT_RANGE).collect())
    } else {
        None
    };

    let grad_seg = match (active.contains(Objective::Seg), logits) {
        (true, Some(l)) => {
            let logits: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
            let sl = seg_loss(&logits, &batch.labels, plane)?;
            raw.set(Objective::Seg, sl.value);
            Some(sl.grad)
        }
        (true, None) => return Err(Error::invalid("seg objective active without a segmentation head")),
        _ => None,
    };

    let grad_gan = match (active.contains(Objective::Gan), disc) {
        (true, Some(d)) => {
            let mut g = Graph::new(d.store(), Mode::Train).without_param_grads();
            let cond = g.input(batch.input.clone());
            let cand = g.variable(pred.clone());
            let scores = d.forward(&mut g, cond, cand)?;
            let sv: Vec<f64> = g.value(scores).data().iter().map(|&v| v as f64).collect();
            let gl = gan_generator_loss(&sv)?;
            raw.set(Objective::Gan, gl.value);
            let seed = Tensor::from_vec(g.value(scores).shape(), gl.grad.iter().map(|&v| v as f32).collect())?;
            let mut grads = g.backward(vec![(scores, seed)]);
            Some(grads.take_leaf(cand).ok_or_else(|| Error::invalid("missing discriminator input gradient"))?)
        }
        (true, None) => return Err(Error::invalid("gan objective active without a discriminator")),
        _ => None,
    };
    Ok(GeneratorLosses { raw, grad_l1, grad_n, grad_seg, grad_gan })
}

/// One least-squares step on real targets versus detached predictions.
fn discriminator_step(disc: &mut Discriminator, opt: &mut Adam, batch: &Batch, fake: Tensor) -> Result<f64> {
    let mut g = Graph::new(disc.store(), Mode::Train);
    let cond = g.input(batch.input.clone());
    let real_in = g.input(batch.target.clone());
    let fake_in = g.input(fake);
    let real = disc.forward(&mut g, cond, real_in)?;
    let fake = disc.forward(&mut g, cond, fake_in)?;
    let as_f64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let loss = discriminator_loss(&as_f64(g.value(real)), &as_f64(g.value(fake)))?;
    if !loss.value.is_finite() {
        return Err(Error::Divergence { step: opt.steps() as usize, total: loss.value });
    }
    let to_t = |shape, v: &[f64]| Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect());
    let seeds = vec![
        (real, to_t(g.value(real).shape(), &loss.grad_real)?),
        (fake, to_t(g.value(fake).shape(), &loss.grad_fake)?),
    ];
    let grads = g.backward(seeds);
    let bn = g.take_bn_updates();
    drop(g);
    opt.step(disc.store_mut(), &grads.into_params());
    disc.store_mut().apply_bn_updates(&bn);
    Ok(loss.value)
}

/// The five ablation configurations, in table order.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    use Objective::*;
    let rows: [(&[Objective], WeightingMode); 5] = [
        (&[L1], WeightingMode::Learned),
        (&[L1, Normal], WeightingMode::Learned),
        (&[L1, Normal, Gan], WeightingMode::Learned),
        (&[L1, Normal, Gan, Seg], WeightingMode::Fixed),
        (&[L1, Normal, Gan, Seg], WeightingMode::Learned),
    ];
    rows.iter()
        .map(|&(objs, mode)| {
            let mut cfg = base.clone();
            cfg.model = cfg.model.clone().with_objectives(ObjectiveSet::from_objectives(objs));
            cfg.weighting = mode;
            cfg
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub objectives: ObjectiveSet,
    pub weighting: WeightingMode,
    pub best_epoch: Option<usize>,
    pub best_rmse: Option<f64>,
    /// Validation RMSE of the unrefined input.
    pub input_rmse: f64,
    pub val_rmse: Vec<(usize, f64)>,
}

/// Trains every ablation configuration on the same data.
pub fn run_ablation(
    base: &TrainConfig,
    source: &dyn SampleSource,
    val: &[SceneSample],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let input_rmse = validate(&IdentityModel, val, base.eval_batch)?.rmse;
    let mut rows = Vec::new();
    for (i, cfg) in ablation_configs(base).iter().enumerate() {
        let name = format!("{}_{}_{}", i + 1, cfg.objectives().to_string().replace('+', "-"), cfg.weighting.name());
        log::info!("ablation run {name}");
        let sub = out.map(|p| p.join(&name));
        let trained = train(cfg, source, val, sub.as_deref())?;
        rows.push(AblationRow {
            objectives: cfg.objectives(),
            weighting: cfg.weighting,
            best_epoch: trained.run.best_epoch,
            best_rmse: trained.run.best_rmse,
            input_rmse,
            val_rmse: trained.run.val_rmse(),
        });
    }
    if let Some(p) = out {
        let path = p.join("ablation.csv");
        fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("objectives,weighting,best_epoch,best_rmse,input_rmse\n");
    for r in rows {
        let epoch = r.best_epoch.map_or(String::new(), |e| e.to_string());
        let rmse = r.best_rmse.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{},{},{epoch},{rmse},{:.6}", r.objectives, r.weighting.name(), r.input_rmse);
    }
    out
}
