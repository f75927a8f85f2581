//! Training loop, evaluation and the ablation driver.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{invert_saliency, make_quad, BlurSpec};
use crate::autodiff::{GradientMap, Graph};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, sage_loss, LossReport, LossWeights, MarginMode, Quad};
use crate::metrics::{auroc, mean_std};
use crate::model::{ModelConfig, ParamStore, TinyCnn};
use crate::seeds;
use crate::synth::{images_tensor, Dataset, Sample, SynthConfig};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub scheduler_step_epochs: usize,
    pub scheduler_gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 1e-6,
            momentum: 0.0,
            scheduler_step_epochs: 12,
            scheduler_gamma: 0.1,
            batch_size: 20,
            epochs: 30,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if self.scheduler_step_epochs == 0 {
            return Err(Error::invalid("scheduler_step_epochs", "must be positive"));
        }
        if !(self.scheduler_gamma > 0.0 && self.scheduler_gamma <= 1.0) {
            return Err(Error::invalid("scheduler_gamma", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.scheduler_step_epochs) as i32;
        self.lr * self.scheduler_gamma.powi(drops)
    }
}

/// SGD with coupled weight decay and optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: OptimConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    /// `θ ← θ − lr(epoch)·v` with `v ← momentum·v + g + weight_decay·θ`.
    /// Every parameter must have a gradient; `grads` is cleared afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut GradientMap, epoch: usize) -> Result<()> {
        for (name, t) in params.iter() {
            match grads.get(name) {
                Some(g) if g.shape() == t.shape() => {}
                Some(g) => {
                    return Err(Error::ShapeMismatch {
                        op: "sgd_step",
                        left: t.shape().to_vec(),
                        right: g.shape().to_vec(),
                    })
                }
                None => return Err(Error::MissingGradient(name.to_string())),
            }
        }
        let lr = self.cfg.lr_at(epoch);
        let (wd, momentum) = (self.cfg.weight_decay, self.cfg.momentum);
        for (name, t) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
            for ((theta, &gi), vi) in t.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = momentum * *vi + (gi + wd * *theta);
                *theta -= lr * *vi;
            }
        }
        grads.clear();
        Ok(())
    }
}

/// Single stateless SGD update (momentum must be zero).
pub fn sgd_step(params: &mut ParamStore, grads: &mut GradientMap, cfg: &OptimConfig, epoch: usize) -> Result<()> {
    if cfg.momentum != 0.0 {
        return Err(Error::invalid("momentum", "stateless sgd_step needs momentum 0; use Sgd"));
    }
    Sgd::new(cfg.clone())?.step(params, grads, epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    BaselineXent,
    Sage,
    SageFlipped,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::BaselineXent, TrainMode::Sage, TrainMode::SageFlipped];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::BaselineXent => "baseline_xent",
            TrainMode::Sage => "sage",
            TrainMode::SageFlipped => "sage_flipped",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown mode `{s}` (expected baseline_xent, sage or sage_flipped)")))
    }
}

/// Everything a run needs besides data and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub blur: BlurSpec,
    pub margin_mode: MarginMode,
    pub optim: OptimConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.blur.validate()?;
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-averaged loss components.
    pub loss: LossReport,
    pub test_auroc: f64,
}

/// Resolved configuration stored with every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub mode: TrainMode,
    pub seed: u64,
    pub inverted_saliency: bool,
    pub setup: TrainSetup,
    pub dataset: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_auroc: f64,
    pub config: RunSnapshot,
}

/// Flattened `(N, C, H, W)` views of the training split, one per quad slot.
struct TrainViews {
    views: Quad<Vec<f64>>,
    labels: Vec<usize>,
    plane: usize,
    chw: (usize, usize, usize),
}

impl TrainViews {
    fn build(samples: &[Sample], mode: TrainMode, blur: &BlurSpec) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("train", "empty training split"))?;
        let chw = (first.image.channels(), first.image.height(), first.image.width());
        let plane = chw.0 * chw.1 * chw.2;
        let mut views = Quad {
            base: Vec::with_capacity(samples.len() * plane),
            tilde: Vec::new(),
            prime: Vec::new(),
            tilde_prime: Vec::new(),
        };
        for s in samples {
            if !s.image.same_shape(&first.image) {
                return Err(Error::invalid("train", "images differ in shape"));
            }
            views.base.extend(s.image.to_chw());
            if mode == TrainMode::BaselineXent {
                continue;
            }
            let sal = if mode == TrainMode::SageFlipped {
                invert_saliency(&s.saliency)
            } else {
                s.saliency.clone()
            };
            let q = make_quad(&s.image, &sal, blur)?;
            views.tilde.extend(q.x_tilde.to_chw());
            views.prime.extend(q.x_prime.to_chw());
            views.tilde_prime.extend(q.x_tilde_prime.to_chw());
        }
        Ok(Self {
            views,
            labels: samples.iter().map(|s| s.label).collect(),
            plane,
            chw,
        })
    }

    fn gather(&self, src: &[f64], idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.plane);
        for &i in idx {
            data.extend_from_slice(&src[i * self.plane..(i + 1) * self.plane]);
        }
        let (c, h, w) = self.chw;
        Tensor::new(vec![idx.len(), c, h, w], data)
    }
}

fn evaluate(model: &TinyCnn, test_images: &Tensor, test_labels: &[usize]) -> Result<f64> {
    let scores = model.positive_scores(test_images, EVAL_CHUNK)?;
    auroc(&scores, test_labels)
}

/// Train one model and return its record together with the final weights.
///
/// Initialization, shuffling and everything else random is derived from
/// `seed`; the dataset itself is taken as given.
pub fn train_run(mode: TrainMode, data: &Dataset, setup: &TrainSetup, seed: u64) -> Result<(RunRecord, TinyCnn)> {
    train_run_observed(mode, data, setup, seed, |_, _, _| {})
}

/// [`train_run`] that hands the parameters to `observe(epoch, batch, params)`
/// after every optimizer step.
pub fn train_run_observed(
    mode: TrainMode,
    data: &Dataset,
    setup: &TrainSetup,
    seed: u64,
    mut observe: impl FnMut(usize, usize, &ParamStore),
) -> Result<(RunRecord, TinyCnn)> {
    setup.validate()?;
    let views = TrainViews::build(&data.train, mode, &setup.blur)?;
    let test_images = images_tensor(&data.test)?;
    let test_labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();

    let mut model = TinyCnn::with_seed(setup.model.clone(), seeds::derive(seed, &[seeds::stream::INIT]))?;
    let mut opt = Sgd::new(setup.optim.clone())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::stream::SHUFFLE]));
    let mut order: Vec<usize> = (0..views.labels.len()).collect();
    let mut epochs = Vec::with_capacity(setup.optim.epochs);

    for epoch in 0..setup.optim.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossReport::default();
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(setup.optim.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| views.labels[i]).collect();
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let (total, report) = if mode == TrainMode::BaselineXent {
                let x = g.constant(views.gather(&views.views.base, idx)?);
                let out = model.forward(&mut g, &p, x)?;
                let xent = cross_entropy(&mut g, out.logits, &labels)?;
                let v = g.value(xent).data()[0];
                let report = LossReport {
                    xent: v,
                    sla: 0.0,
                    sce: 0.0,
                    total: v,
                };
                (xent, report)
            } else {
                let inputs = Quad {
                    base: g.constant(views.gather(&views.views.base, idx)?),
                    tilde: g.constant(views.gather(&views.views.tilde, idx)?),
                    prime: g.constant(views.gather(&views.views.prime, idx)?),
                    tilde_prime: g.constant(views.gather(&views.views.tilde_prime, idx)?),
                };
                let outs = model.quad_forward(&mut g, &p, &inputs)?;
                let y = outs.clone().map(|o| o.logits);
                let z = outs.map(|o| o.embedding);
                let l = sage_loss(&mut g, &y, &z, &labels, &setup.weights, setup.margin_mode)
                    .map_err(|e| diverged_or(e, epoch, batch))?;
                (l.total, l.report)
            };
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail: format!("{report:?}"),
                });
            }
            let mut grads = g.backward(total)?;
            opt.step(model.params_mut(), &mut grads, epoch)?;
            observe(epoch, batch, model.params());
            if model.params().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail: "non-finite parameters after update".into(),
                });
            }
            sum.xent += report.xent;
            sum.sla += report.sla;
            sum.sce += report.sce;
            sum.total += report.total;
            batches += 1;
        }
        let n = batches as f64;
        let loss = LossReport {
            xent: sum.xent / n,
            sla: sum.sla / n,
            sce: sum.sce / n,
            total: sum.total / n,
        };
        let test_auroc = evaluate(&model, &test_images, &test_labels)?;
        debug!("{mode} seed {seed} epoch {epoch}: {loss:?} auroc {test_auroc:.4}");
        epochs.push(EpochRecord {
            epoch,
            lr: setup.optim.lr_at(epoch),
            loss,
            test_auroc,
        });
    }
    let final_auroc = epochs.last().map(|e| e.test_auroc).expect("at least one epoch");
    info!("{mode} seed {seed}: final AUROC {final_auroc:.4}");
    let record = RunRecord {
        mode,
        seed,
        epochs,
        final_auroc,
        config: RunSnapshot {
            mode,
            seed,
            inverted_saliency: mode == TrainMode::SageFlipped,
            setup: setup.clone(),
            dataset: None,
        },
    };
    Ok((record, model))
}

fn diverged_or(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, batch, detail },
        other => other,
    }
}

/// Independent runs over every `(mode, seed)` pair, in parallel. Results come
/// back in input order.
pub fn train_many(jobs: &[(TrainMode, u64)], data: &Dataset, setup: &TrainSetup) -> Result<Vec<(RunRecord, TinyCnn)>> {
    jobs.par_iter()
        .map(|&(mode, seed)| train_run(mode, data, setup, seed))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Tau,
    Sigma,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Tau => "tau",
            AblationAxis::Sigma => "sigma",
        }
    }

    /// The default grid for this axis.
    pub fn grid(self) -> Vec<f64> {
        match self {
            AblationAxis::Tau => vec![1.0, 2.0, 3.0],
            AblationAxis::Sigma => vec![5.0, 7.0, 10.0, 12.0],
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainSetup, value: f64) -> TrainSetup {
        let mut s = base.clone();
        match self {
            AblationAxis::Tau => s.weights.tau = value,
            AblationAxis::Sigma => s.blur.sigma = value,
        }
        s
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(AblationAxis::Tau),
            "sigma" => Ok(AblationAxis::Sigma),
            other => Err(Error::invalid("axis", format!("unknown axis `{other}` (valid axes: tau, sigma)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis_value: f64,
    pub seed: u64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    pub records: Vec<RunRecord>,
}

/// One SAGE run per `(value, seed)`, aggregated per value.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[f64],
    data: &Dataset,
    base: &TrainSetup,
    seeds: &[u64],
) -> Result<AblationTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("ablation grid", "needs at least one value and one seed"));
    }
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(v, s)| train_run(TrainMode::Sage, data, &axis.apply(base, v), s).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<AblationRun> = jobs
        .iter()
        .zip(&records)
        .map(|(&(axis_value, seed), r)| AblationRun {
            axis_value,
            seed,
            auroc: r.final_auroc,
        })
        .collect();
    let rows = values
        .iter()
        .map(|&v| {
            let a: Vec<f64> = runs.iter().filter(|r| r.axis_value == v).map(|r| r.auroc).collect();
            let (mean, std) = mean_std(&a);
            AblationRow { axis_value: v, mean, std }
        })
        .collect();
    Ok(AblationTable {
        axis,
        runs,
        rows,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn scalar_store(v: f64) -> ParamStore {
        ParamStore::from_entries(vec![("w".to_string(), Tensor::scalar(v))])
    }

    fn grads(v: f64) -> GradientMap {
        let mut g = GradientMap::default();
        g.insert("w".to_string(), Tensor::scalar(v));
        g
    }

    fn cfg(lr: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = scalar_store(1.0);
        sgd_step(&mut p, &mut grads(0.5), &cfg(0.1, 0.0), 0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);

        let mut p = scalar_store(-3.25);
        let mut g = grads(0.0);
        sgd_step(&mut p, &mut g, &cfg(0.1, 0.0), 0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], -3.25);
        assert!(g.is_empty());
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = scalar_store(2.0);
        sgd_step(&mut p, &mut grads(0.0), &cfg(0.1, 0.5), 0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let err = sgd_step(&mut p, &mut GradientMap::default(), &OptimConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn schedule() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0), 0.005);
        assert_eq!(c.lr_at(11), 0.005);
        assert!((c.lr_at(12) - 0.0005).abs() < 1e-15);
        assert!((c.lr_at(24) - 0.00005).abs() < 1e-16);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(OptimConfig {
            lr: 1.0,
            weight_decay: 0.0,
            momentum: 0.5,
            ..OptimConfig::default()
        })
        .unwrap();
        let mut p = scalar_store(0.0);
        opt.step(&mut p, &mut grads(1.0), 0).unwrap();
        opt.step(&mut p, &mut grads(1.0), 0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.get("w").unwrap().data()[0], -2.5);
        assert!(sgd_step(&mut p, &mut grads(1.0), &OptimConfig { momentum: 0.5, ..OptimConfig::default() }, 0).is_err());
    }

    #[test]
    fn invalid_optim_config() {
        assert!(OptimConfig { scheduler_gamma: 0.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { lr: -1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { batch_size: 0, ..OptimConfig::default() }.validate().is_err());
    }

    #[test]
    fn mode_and_axis_parsing() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("kernel".parse::<AblationAxis>().unwrap_err().to_string().contains("tau, sigma"));
        assert_eq!(AblationAxis::Tau.grid().len(), 3);
        assert_eq!(AblationAxis::Sigma.grid(), vec![5.0, 7.0, 10.0, 12.0]);
    }

    fn tiny() -> (Dataset, TrainSetup) {
        let data = generate_dataset(&SynthConfig {
            image_size: 16,
            n_train: 24,
            n_test: 10,
            salient_patch_size: 6,
            spurious_patch_size: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let setup = TrainSetup {
            model: ModelConfig {
                stage_widths: vec![4, 8],
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                epochs: 3,
                batch_size: 8,
                scheduler_step_epochs: 2,
                lr: 0.05,
                ..OptimConfig::default()
            },
            ..TrainSetup::default()
        };
        (data, setup)
    }

    #[test]
    fn records_are_complete_and_deterministic() {
        let (data, setup) = tiny();
        for mode in TrainMode::ALL {
            let (a, _) = train_run(mode, &data, &setup, 7).unwrap();
            let (b, _) = train_run(mode, &data, &setup, 7).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.epochs.len(), 3);
            assert_eq!(a.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
            assert_eq!(a.config.inverted_saliency, mode == TrainMode::SageFlipped);
            for e in &a.epochs {
                assert!(e.loss.xent >= 0.0 && e.loss.sla >= 0.0 && e.loss.sce >= 0.0);
                assert!((0.0..=1.0).contains(&e.test_auroc));
            }
        }
    }

    #[test]
    fn alpha_one_matches_baseline() {
        let (data, mut setup) = tiny();
        let (base, mb) = train_run(TrainMode::BaselineXent, &data, &setup, 3).unwrap();
        setup.weights.alpha = 1.0;
        let (sage, ms) = train_run(TrainMode::Sage, &data, &setup, 3).unwrap();
        assert_eq!(mb.params(), ms.params());
        for (a, b) in base.epochs.iter().zip(&sage.epochs) {
            assert_eq!(a.loss.xent, b.loss.xent);
            assert_eq!(a.loss.total, b.loss.total);
        }
    }

    #[test]
    fn ablation_shape() {
        let (data, mut setup) = tiny();
        setup.optim.epochs = 1;
        let t = run_ablation(AblationAxis::Tau, &[1.0, 2.0], &data, &setup, &[0, 1]).unwrap();
        assert_eq!(t.runs.len(), 4);
        assert_eq!(t.rows.len(), 2);
        let (direct, _) = train_run(TrainMode::Sage, &data, &setup, 1).unwrap();
        let r = t.runs.iter().find(|r| r.axis_value == 2.0 && r.seed == 1).unwrap();
        assert_eq!(r.auroc, direct.final_auroc);
    }
}
