//! Training loop, evaluation, inference, spectrum reports and ablation runs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fadpnet_core::metrics::{psnr, psnr_luma, ssim};
use fadpnet_core::net::{estimate_flops, make_variant, stage_taps, Fadpnet, ModelConfig};
use fadpnet_core::nn::{Ctx, ParamStore, Routing};
use fadpnet_core::optim::{train_step, Adam};
use fadpnet_core::profile::count_params;
use fadpnet_core::resample::{clamp_unit, prepare_pair, Augment};
use fadpnet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::TrainConfig;
use crate::data::{collate, epoch_batches, Sample};
use crate::error::{HarnessError, Result};
use crate::image_io;
use crate::spectrum::{band_energy_ratios, BandRatios, BandSpec};

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub time_ms: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,loss,lr,time_ms";

    pub fn to_line(&self) -> String {
        format!("{},{:.6},{:.6e},{:.1}", self.step, self.loss, self.lr, self.time_ms)
    }
}

/// Model, optimizer and random stream of one training run.
pub struct Trainer {
    pub net: Fadpnet,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Updates applied so far.
    pub step: u64,
    pub epoch: u64,
}

impl Trainer {
    /// Fresh weights drawn from a stream seeded by `train.seed`; the same
    /// stream then drives augmentation and routing noise.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let (net, params) = Fadpnet::init::<f32>(model, &mut rng)?;
        let adam = Adam::new(&params, train.betas[0], train.betas[1]);
        Ok(Self { net, params, adam, rng, model: model.clone(), train: train.clone(), step: 0, epoch: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let net = ck.network()?;
        let adam = match ck.adam {
            Some(a) => a,
            None => Adam::new(&ck.params, ck.train.betas[0], ck.train.betas[1]),
        };
        Ok(Self {
            net,
            params: ck.params,
            adam,
            rng: ck.rng.restore(),
            model: ck.model,
            train: ck.train,
            step: ck.step,
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            rng: RngState::capture(&self.rng),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Steps in the full run over `n` training samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.train.batch) as u64;
        let full = per_epoch * self.train.epochs as u64;
        self.train.max_steps.map_or(full, |m| m.min(full))
    }

    /// One update on the batch scheduled for the current step. The batch is a
    /// function of `(seed, epoch, position)` only, so a resumed run sees the
    /// same sequence.
    pub fn step_once(&mut self, samples: &[Sample]) -> Result<LogRow> {
        if samples.is_empty() {
            return Err(HarnessError::Data("training split is empty".into()));
        }
        let t0 = Instant::now();
        let n = samples.len();
        let per_epoch = n.div_ceil(self.train.batch) as u64;
        let epoch = self.step / per_epoch;
        let pos = (self.step % per_epoch) as usize;
        let idx = &epoch_batches(n, self.train.batch, self.train.seed, epoch)[pos];
        let pairs = idx
            .iter()
            .map(|&i| {
                if self.train.augment {
                    Augment::sample(&mut self.rng).apply(&samples[i].pair).map_err(HarnessError::from)
                } else {
                    Ok(samples[i].pair.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = collate(&pairs.iter().collect::<Vec<_>>())?;
        let lr = self.train.schedule.lr(self.train.lr, self.step, self.total_steps(n));
        let stats = train_step(&self.net, &mut self.params, &mut self.adam, &x, &y, &mut self.rng, lr, self.step)?;
        let row = LogRow { step: self.step, loss: stats.loss, lr, time_ms: t0.elapsed().as_secs_f64() * 1e3 };
        self.step += 1;
        self.epoch = self.step / per_epoch;
        Ok(row)
    }

    pub fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict_image(&self.net, &self.params, input)
    }
}

/// Where a training run writes its logs and checkpoints.
pub struct RunOutputs<'a> {
    pub log: &'a mut dyn Write,
    pub val_log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

pub const VAL_HEADER: &str = "step,psnr,ssim,psnr_y";

/// Trains until the configured step budget, logging every step, evaluating
/// on `val` every `eval_every` steps and checkpointing every
/// `checkpoint_every` steps and at the end.
pub fn run_training(trainer: &mut Trainer, train: &[Sample], val: &[Sample], out: RunOutputs<'_>) -> Result<()> {
    let RunOutputs { log, mut val_log, checkpoint_dir } = out;
    let total = trainer.total_steps(train.len());
    let wr = |e: std::io::Error| HarnessError::Data(format!("cannot write log: {e}"));
    if trainer.step == 0 {
        writeln!(log, "{}", LogRow::HEADER).map_err(wr)?;
        if let Some(v) = val_log.as_mut() {
            writeln!(v, "{VAL_HEADER}").map_err(wr)?;
        }
    }
    while trainer.step < total {
        let row = trainer.step_once(train)?;
        writeln!(log, "{}", row.to_line()).map_err(wr)?;
        let done = trainer.step;
        let every = |k: u64| k > 0 && done % k == 0;
        if every(trainer.train.eval_every) && !val.is_empty() {
            let (_, s) = evaluate_with(val, |x| trainer.predict(x))?;
            if let Some(v) = val_log.as_mut() {
                writeln!(v, "{done},{:.4},{:.6},{:.4}", s.psnr_mean, s.ssim_mean, s.psnr_y_mean).map_err(wr)?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            if every(trainer.train.checkpoint_every) || done == total {
                let ck = trainer.checkpoint();
                ck.save(&dir.join(format!("step_{done:08}.safetensors")))?;
                ck.save(&dir.join("latest.safetensors"))?;
            }
        }
    }
    log.flush().map_err(wr)
}

/// Forward pass on one `3 × h × w` image with noiseless routing; the result
/// is clamped to `[0, 1]`.
pub fn predict_image(net: &Fadpnet, params: &ParamStore<f32>, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = img.shape().to_vec();
    let &[3, h, w] = shape.as_slice() else {
        return Err(HarnessError::Data(format!("expected a 3 x h x w image, got {shape:?}")));
    };
    let out = net.predict(params, &img.clone().reshape(&[1, 3, h, w])?)?;
    Ok(clamp_unit(&out.reshape(&[3, h, w])?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_y: f64,
}

/// Means over the evaluated images. Infinite PSNRs (exact reconstructions)
/// are counted apart and left out of the PSNR means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub psnr_y_mean: f64,
    pub psnr_infinite: usize,
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "psnr_rgb_mean = {:.4}", self.psnr_mean);
        let _ = writeln!(s, "psnr_y_mean = {:.4}", self.psnr_y_mean);
        let _ = writeln!(s, "ssim_mean = {:.6}", self.ssim_mean);
        let _ = writeln!(s, "psnr_infinite = {}", self.psnr_infinite);
        s
    }
}

/// Scores `predict(lr_up)` against `hr` for every sample.
pub fn evaluate_with(
    samples: &[Sample],
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<(Vec<ImageMetrics>, EvalSummary)> {
    if samples.is_empty() {
        return Err(HarnessError::Data("evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let out = predict(&s.pair.lr_up)?;
        rows.push(ImageMetrics {
            image_id: s.source_id.clone(),
            psnr: psnr(&out, &s.pair.hr, 1.0)?,
            ssim: ssim(&out, &s.pair.hr)?,
            psnr_y: psnr_luma(&out, &s.pair.hr)?,
        });
    }
    let finite_mean = |f: fn(&ImageMetrics) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::INFINITY
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let summary = EvalSummary {
        n: rows.len(),
        psnr_mean: finite_mean(|r| r.psnr),
        ssim_mean: rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64,
        psnr_y_mean: finite_mean(|r| r.psnr_y),
        psnr_infinite: rows.iter().filter(|r| r.psnr.is_infinite()).count(),
    };
    Ok((rows, summary))
}

pub fn evaluate(net: &Fadpnet, params: &ParamStore<f32>, samples: &[Sample]) -> Result<(Vec<ImageMetrics>, EvalSummary)> {
    evaluate_with(samples, |x| predict_image(net, params, x))
}

pub fn write_metrics_csv(mut out: impl Write, rows: &[ImageMetrics]) -> std::io::Result<()> {
    writeln!(out, "image_id,psnr,ssim")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.image_id, r.psnr, r.ssim)?;
    }
    out.flush()
}

#[derive(Debug, Default)]
pub struct InferOutcome {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Runs the model on each file and writes `<stem><suffix>.png` under
/// `out_dir`. With `degrade = Some((size, scale))` each input is first put
/// through the training degradation; otherwise it is taken as an already
/// upsampled degraded image. A file that fails is recorded and skipped.
pub fn infer(
    net: &Fadpnet,
    params: &ParamStore<f32>,
    inputs: &[PathBuf],
    out_dir: &Path,
    degrade: Option<(usize, usize)>,
    suffix: &str,
) -> Result<InferOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut outcome = InferOutcome::default();
    for path in inputs {
        let run = || -> Result<PathBuf> {
            let img = image_io::read_rgb::<f32>(path)?;
            let input = match degrade {
                Some((size, scale)) => prepare_pair(&img, size, scale)?.lr_up,
                None => img,
            };
            let out = predict_image(net, params, &input)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let dst = out_dir.join(format!("{stem}{suffix}.png"));
            image_io::write_png(&out, &dst)?;
            Ok(dst)
        };
        match run() {
            Ok(p) => outcome.written.push(p),
            Err(e) => outcome.failed.push((path.clone(), e.to_string())),
        }
    }
    Ok(outcome)
}

/// Name of the stage whose branch outputs are analysed at `level`
/// (1 = full resolution, `levels` = bottleneck).
pub fn stage_for_level(cfg: &ModelConfig, level: usize) -> Result<String> {
    match level {
        l if l >= 1 && l < cfg.levels => Ok(format!("enc{l}")),
        l if l == cfg.levels => Ok(format!("mid{l}")),
        l => Err(HarnessError::Config(format!("unknown level {l}: the model has levels 1..={}", cfg.levels))),
    }
}

/// Band-energy shares of the low- and high-frequency stack outputs at
/// `level`, averaged over `samples`. Rows are `("lfeb", …)` and `("hfeb", …)`.
pub fn spectrum_report(
    net: &Fadpnet,
    params: &ParamStore<f32>,
    samples: &[Sample],
    level: usize,
    bands: &BandSpec,
) -> Result<Vec<(String, BandRatios)>> {
    let stage = stage_for_level(&net.cfg, level)?;
    if samples.is_empty() {
        return Err(HarnessError::Data("spectrum split is empty".into()));
    }
    let (lname, hname) = stage_taps(&stage);
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for s in samples {
        let &[c, h, w] = s.pair.lr_up.shape() else {
            return Err(HarnessError::Data(format!("{}: expected a 3 x h x w image", s.source_id)));
        };
        let mut cx = Ctx::new(params, Routing::Eval).with_taps();
        let x = cx.constant(s.pair.lr_up.clone().reshape(&[1, c, h, w])?);
        net.forward(&mut cx, x)?;
        let find = |name: &str| {
            cx.taps()
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, v)| cx.value(v))
                .ok_or_else(|| HarnessError::Data(format!("no feature tap named {name}")))
        };
        for (name, acc) in [(&lname, &mut low), (&hname, &mut high)] {
            match band_energy_ratios(find(name)?, bands) {
                Ok(r) => acc.push(r),
                Err(HarnessError::Model(fadpnet_core::Error::Degenerate(_))) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let mean = |v: &[BandRatios], which: &str| {
        BandRatios::mean(v).ok_or_else(|| {
            HarnessError::Model(fadpnet_core::Error::Degenerate(format!("every {which} feature map had zero energy")))
        })
    };
    Ok(vec![("lfeb".to_string(), mean(&low, "lfeb")?), ("hfeb".to_string(), mean(&high, "hfeb")?)])
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub flops: u64,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Builds every flagged variant, rejecting unknown flags before any
/// training. Returns the baseline followed by one config per flag.
pub fn ablation_variants(base: &ModelConfig, flags: &[String]) -> Result<Vec<(String, ModelConfig)>> {
    let mut out = vec![("baseline".to_string(), base.clone())];
    for f in flags {
        let cfg = make_variant(base, f).map_err(|e| HarnessError::Config(e.to_string()))?;
        out.push((f.clone(), cfg));
    }
    Ok(out)
}

/// Trains the baseline and each variant with the same seed and budget, then
/// scores each on `eval`. `hw` sets the FLOPs resolution.
pub fn ablate(
    base: &ModelConfig,
    flags: &[String],
    train_cfg: &TrainConfig,
    train: &[Sample],
    eval: &[Sample],
    hw: (usize, usize),
    mut progress: impl FnMut(&str, &LogRow),
) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(base, flags)?;
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let mut t = Trainer::new(&cfg, train_cfg)?;
        let total = t.total_steps(train.len());
        let mut final_loss = f64::NAN;
        while t.step < total {
            let row = t.step_once(train)?;
            final_loss = row.loss;
            progress(&name, &row);
        }
        let (_, s) = evaluate_with(eval, |x| t.predict(x))?;
        rows.push(AblationRow {
            params: count_params(&t.params),
            flops: estimate_flops(&cfg, hw.0, hw.1)?.total(),
            variant: name,
            final_loss,
            psnr: s.psnr_mean,
            ssim: s.ssim_mean,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(mut out: impl Write, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(out, "variant,params,gflops,final_loss,psnr,ssim")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.4},{:.6},{:.4},{:.6}",
            r.variant,
            r.params,
            r.flops as f64 / 1e9,
            r.final_loss,
            r.psnr,
            r.ssim
        )?;
    }
    out.flush()
}
