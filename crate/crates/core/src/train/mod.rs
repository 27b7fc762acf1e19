//! Alternating discriminator/generator training.

pub mod adam;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{checkpoint_config, load_model, CheckpointManifest, LoadReport, MANIFEST_FILE};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{Batch, BatchPlan, Dataset, Mode};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, total_loss, FeatureExtractor, LossBreakdown, LossContext};
use crate::metrics::{self, MetricRow};
use crate::model::{ForwardOptions, MisfModel};
use crate::mtf;
use crate::param::ParamGroup;
use crate::tensor::Scalar;

/// Values logged for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based count of completed steps.
    pub iter: usize,
    pub losses: LossBreakdown,
    /// Discriminator loss, 0 when the adversarial term is off.
    pub disc: f64,
    pub grad_norm: f64,
    /// PSNR of the composited batch against ground truth, capped.
    pub psnr_train: f64,
}

pub const METRICS_HEADER: &str = "iter,l1,gan,perc,style,total,psnr_train";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, l.l1, l.gan, l.perceptual, l.style, l.total, self.psnr_train
        )
    }
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsLog {
    /// Create with a header, or append to an existing file.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let exists = path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !(append && exists) {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    pub fn push(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: MisfModel<T>,
    pub fx: FeatureExtractor<T>,
    pub gen_opt: AdamState<T>,
    pub disc_opt: AdamState<T>,
    pub data: Dataset<T>,
    pub plan: BatchPlan,
    /// Completed steps.
    pub step: usize,
    /// Where an offending batch is written on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig, data: Dataset<T>) -> Result<Self> {
        config.validate()?;
        let model = MisfModel::new(config.model_config())?;
        let fx = match &config.fx_weights {
            Some(p) => FeatureExtractor::load(p)?,
            None => FeatureExtractor::seeded(config.fx_seed),
        };
        let gen_opt = AdamState::new(&model.params, &ParamGroup::GENERATOR);
        let disc_opt = AdamState::new(&model.params, &[ParamGroup::Disc]);
        let plan = BatchPlan {
            batch_size: config.batch_size(),
            mode: Mode::Train,
            seed: config.seed,
            flip: config.flip,
        };
        plan.epoch(data.len(), 0)?;
        Ok(Self {
            config,
            model,
            fx,
            gen_opt,
            disc_opt,
            data,
            plan,
            step: 0,
            dump_dir: None,
        })
    }

    /// Batch used by step `step` (0-based); depends only on seed and step.
    pub fn batch_for(&self, step: usize) -> Result<Batch<T>> {
        let bpe = self.plan.batches_per_epoch(self.data.len());
        let groups = self.plan.epoch(self.data.len(), step / bpe)?;
        let (idx, flips) = &groups[step % bpe];
        self.data.batch(idx, flips)
    }

    /// Discriminator update, then generator update, on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch_for(self.step)?;
        let iter = self.step + 1;
        let result = self.step_on(&batch, iter);
        let result = match result {
            Err(Error::NonFinite { op }) => Err(Error::NonFiniteLoss {
                iter,
                detail: format!("non-finite output of {op}"),
            }),
            other => other,
        };
        match result {
            Ok(m) => {
                self.step = iter;
                Ok(m)
            }
            Err(Error::NonFiniteLoss { iter, detail }) => {
                let detail = match self.dump(&batch, iter) {
                    Some(Ok(dir)) => format!("{detail}; batch {:?} dumped to {}", batch.ids, dir.display()),
                    Some(Err(e)) => format!("{detail}; batch {:?} could not be dumped: {e}", batch.ids),
                    None => format!("{detail}; batch {:?}", batch.ids),
                };
                Err(Error::NonFiniteLoss { iter, detail })
            }
            Err(e) => Err(e),
        }
    }

    fn dump(&self, batch: &Batch<T>, iter: usize) -> Option<Result<PathBuf>> {
        let root = self.dump_dir.as_ref()?;
        let dir = root.join(format!("nan_iter{iter}"));
        let write = || -> Result<PathBuf> {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            mtf::write(dir.join("corrupted.mtf"), &batch.corrupted)?;
            mtf::write(dir.join("mask.mtf"), &batch.mask)?;
            mtf::write(dir.join("clean.mtf"), &batch.clean)?;
            std::fs::write(dir.join("ids.txt"), batch.ids.join("\n")).map_err(|e| Error::io(&dir, e))?;
            Ok(dir.clone())
        };
        Some(write())
    }

    fn step_on(&mut self, batch: &Batch<T>, iter: usize) -> Result<StepMetrics> {
        let mut g = Graph::with_trainable(&ParamGroup::GENERATOR);
        let image = g.constant(batch.corrupted.clone());
        let mask = g.constant(batch.mask.clone());
        let out = self.model.forward(&mut g, image, mask, &ForwardOptions::default())?;

        let mut disc = 0.0;
        if self.config.weights.gan > 0.0 {
            let mut dg = Graph::with_trainable(&[ParamGroup::Disc]);
            let real = dg.constant(batch.clean.clone());
            let fake = dg.constant(g.value(out.prediction).clone());
            let dl = discriminator_loss(&mut dg, &self.model.disc, &self.model.params, real, fake)?;
            disc = dg.scalar(dl).as_f64();
            if !disc.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iter,
                    detail: format!("discriminator loss {disc}"),
                });
            }
            self.model.params.zero_grad(&[ParamGroup::Disc]);
            dg.backward(dl)?;
            dg.accumulate_param_grads(&mut self.model.params)?;
            self.disc_opt.step(&mut self.model.params, &self.config.adam)?;
        }

        let target = g.constant(batch.clean.clone());
        let loss = {
            let ctx = LossContext {
                weights: self.config.weights,
                disc: &self.model.disc,
                disc_params: &self.model.params,
                fx: &self.fx,
                l1_mask: self.config.masked_l1.then_some(&batch.mask),
            };
            total_loss(&mut g, out.prediction, target, &ctx)?
        };
        if !loss.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!("{:?}", loss.breakdown),
            });
        }
        self.model.params.zero_grad(&ParamGroup::GENERATOR);
        g.backward(loss.total)?;
        g.accumulate_param_grads(&mut self.model.params)?;
        let grad_norm = self
            .model
            .params
            .iter()
            .filter(|p| ParamGroup::GENERATOR.contains(&p.group))
            .flat_map(|p| p.grad.data().iter().map(|v| v.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: "non-finite generator gradient".into(),
            });
        }
        self.gen_opt.step(&mut self.model.params, &self.config.adam)?;
        let psnr_train = metrics::cap_psnr(metrics::psnr(g.value(out.composite), &batch.clean)?);
        Ok(StepMetrics {
            iter,
            losses: loss.breakdown,
            disc,
            grad_norm,
            psnr_train,
        })
    }

    /// Run until `self.step == until`, calling `on_step` after every step.
    pub fn run(&mut self, until: usize, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < until {
            let m = self.train_step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Composite-vs-truth metrics of every sample, in dataset order.
pub fn evaluate<T: Scalar>(
    model: &MisfModel<T>,
    data: &Dataset<T>,
    batch_size: usize,
    opts: &ForwardOptions,
) -> Result<Vec<MetricRow>> {
    let plan = BatchPlan {
        batch_size,
        mode: Mode::Eval,
        seed: 0,
        flip: false,
    };
    let mut rows = Vec::with_capacity(data.len());
    for batch in crate::data::batch_iter(data, plan, 0)? {
        let batch = batch?;
        let (_, comp) = model.infer(&batch.corrupted, &batch.mask, opts)?;
        for (i, id) in batch.ids.iter().enumerate() {
            let truth = batch.clean.select(i);
            let bucket = crate::data::Bucket::classify(crate::data::hole_ratio(&batch.mask.select(i)));
            rows.push(MetricRow::measure(
                id,
                bucket,
                model.variant().as_str(),
                &comp.select(i),
                &truth,
            )?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_pct: f64,
}

impl CurvePoint {
    pub fn from_rows(iter: usize, rows: &[MetricRow]) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            iter,
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            l1_pct: rows.iter().map(|r| r.l1_pct).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Training-set metrics every `every` steps and at the end.
    pub curve: Vec<CurvePoint>,
    pub steps: Vec<StepMetrics>,
    pub last: CurvePoint,
}

/// Train for `iters` steps, evaluating the training set every `every` steps.
pub fn overfit_harness<T: Scalar>(trainer: &mut Trainer<T>, iters: usize, every: usize) -> Result<OverfitReport> {
    let bs = trainer.plan.batch_size;
    let opts = ForwardOptions::default();
    let mut curve = vec![CurvePoint::from_rows(
        trainer.step,
        &evaluate(&trainer.model, &trainer.data, bs, &opts)?,
    )];
    let mut steps = Vec::with_capacity(iters);
    let end = trainer.step + iters;
    while trainer.step < end {
        steps.push(trainer.train_step()?);
        if every > 0 && trainer.step.is_multiple_of(every) && trainer.step != end {
            curve.push(CurvePoint::from_rows(
                trainer.step,
                &evaluate(&trainer.model, &trainer.data, bs, &opts)?,
            ));
        }
    }
    if iters > 0 {
        curve.push(CurvePoint::from_rows(
            trainer.step,
            &evaluate(&trainer.model, &trainer.data, bs, &opts)?,
        ));
    }
    let last = *curve.last().expect("non-empty");
    Ok(OverfitReport { curve, steps, last })
}
