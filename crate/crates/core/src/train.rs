//! L1 training with Adam, a halving learning-rate schedule, validation,
//! logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pmsr_tensor::{SplitMix64, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor, OPTIM_PREFIX};
use crate::data::{augment, bicubic_down, bicubic_resize, sample_patch, ImageRgb};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::TpmSr;
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub total_iters: usize,
    /// LR patch side; the HR crop is `scale` times larger.
    pub patch: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of `total_iters` at which the learning rate halves.
    pub milestones: Vec<f64>,
    pub seed: u64,
    /// 0 disables periodic validation; it still runs before the first and
    /// after the last iteration.
    pub val_every: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            total_iters: 5000,
            patch: 64,
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            milestones: vec![0.5, 0.75, 0.875, 23.0 / 24.0],
            seed: 0,
            val_every: 500,
            checkpoint_every: 1000,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.milestones.iter().all(|&m| m > 0.0 && m < 1.0)
            && self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "milestones must increase strictly inside (0, 1): {:?}",
                self.milestones
            )));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("invalid optimiser hyperparameters".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Iterations at which the rate halves.
    pub fn milestone_iters(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * self.total_iters as f64).round() as usize)
            .collect()
    }
}

pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestone_iters().iter().filter(|&&m| iter >= m).count();
    cfg.lr0 * 0.5f64.powi(passed as i32)
}

pub fn l1_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    Ok(sr.sub(hr)?.abs().mean())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.values(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched, moments included.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Vec<f64>>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.values_mut(id);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl LogRow {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        format!(
            "iter {} loss {} lr {} psnr {} ssim {}",
            self.iter,
            opt(self.loss),
            self.lr,
            opt(self.psnr),
            opt(self.ssim)
        )
    }
}

/// Crops `hr` to a multiple of `r` and degrades it.
pub fn make_pair(hr: &ImageRgb, r: usize) -> Result<(ImageRgb, ImageRgb)> {
    let (h, w) = (hr.height / r * r, hr.width / r * r);
    let hr = hr.crop(0, 0, h, w)?;
    let lr = bicubic_down(&hr, r)?;
    Ok((lr, hr))
}

pub fn super_resolve(model: &TpmSr, lr: &ImageRgb) -> Result<ImageRgb> {
    let out = model.infer(&lr.to_tensor())?;
    ImageRgb::from_tensor(&out, 0)
}

/// Scores the model and the bicubic baseline on held-out HR images.
pub fn evaluate(model: &TpmSr, images: &[(String, ImageRgb)], shave: usize) -> Result<MetricReport> {
    let r = model.config().scale;
    let mut report = MetricReport::new(r, shave);
    for (name, img) in images {
        let (lr, hr) = make_pair(img, r)?;
        let sr = super_resolve(model, &lr)?;
        report.push("model", name, &sr, &hr)?;
        let bic = bicubic_resize(&lr, hr.height, hr.width)?.clamped();
        report.push("bicubic", name, &bic, &hr)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: TpmSr,
    cfg: TrainConfig,
    adam: AdamState,
    rng: SplitMix64,
    iter: usize,
    /// Samples drawn so far, across epochs.
    cursor: u64,
    best_psnr: Option<f64>,
}

impl Trainer {
    pub fn new(model: TpmSr, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params());
        let rng = SplitMix64::new(cfg.seed ^ 0x5eed_da7a);
        Ok(Self {
            model,
            cfg,
            adam,
            rng,
            iter: 0,
            cursor: 0,
            best_psnr: None,
        })
    }

    pub fn model(&self) -> &TpmSr {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.iter, &self.cfg)
    }

    /// Model, optimiser and data-stream state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let p = self.model.params();
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (id, vals) in p.ids().zip(moments) {
                ck.tensors.push(NamedTensor {
                    name: format!("{OPTIM_PREFIX}{kind}/{}", p.name(id)),
                    shape: p.shape(id).to_vec(),
                    values: vals.clone(),
                });
            }
        }
        let extra: BTreeMap<String, String> = [
            ("iter", self.iter.to_string()),
            ("rng", format!("{:016x}", self.rng.state())),
            ("cursor", self.cursor.to_string()),
            ("adam_step", self.adam.step.to_string()),
            ("best_psnr", self.best_psnr.map_or("none".into(), |b| format!("{:016x}", b.to_bits()))),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        ck.extra = extra;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = ck.to_model(None)?;
        let mut t = Self::new(model, cfg)?;
        let get = |k: &str| -> Result<&String> {
            ck.extra.get(k).ok_or_else(|| Error::Checkpoint(format!("no trainer state {k:?}")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("malformed trainer state {k:?}"));
        let parse = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(k)) };
        t.iter = parse("iter")? as usize;
        t.cursor = parse("cursor")?;
        t.adam.step = parse("adam_step")?;
        t.rng = SplitMix64::from_state(u64::from_str_radix(get("rng")?, 16).map_err(|_| bad("rng"))?);
        t.best_psnr = match get("best_psnr")?.as_str() {
            "none" => None,
            s => Some(f64::from_bits(u64::from_str_radix(s, 16).map_err(|_| bad("best_psnr"))?)),
        };
        let p = t.model.params();
        for (kind, moments) in [("m", &mut t.adam.m), ("v", &mut t.adam.v)] {
            for (id, slot) in p.ids().zip(moments.iter_mut()) {
                let name = format!("{OPTIM_PREFIX}{kind}/{}", p.name(id));
                let nt = ck
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser tensor {name:?}")))?;
                if nt.values.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("{name}: wrong length")));
                }
                slot.clone_from(&nt.values);
            }
        }
        Ok(t)
    }

    /// Image index for the `k`-th draw: epochs visit every image once in an
    /// order fixed by the seed and the epoch number.
    fn image_for(&self, k: u64, n: usize) -> usize {
        let epoch = k / n as u64;
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)).shuffle(&mut order);
        order[(k % n as u64) as usize]
    }

    fn next_batch(&mut self, images: &[(String, ImageRgb)]) -> Result<(Tensor, Tensor)> {
        if images.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let r = self.model.config().scale;
        let mut lrs = Vec::with_capacity(self.cfg.batch);
        let mut hrs = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let (name, img) = &images[self.image_for(self.cursor, images.len())];
            self.cursor += 1;
            let mut s = sample_patch(img, name, r, self.cfg.patch, &mut self.rng)?;
            if self.cfg.augment {
                s = augment(&s, &mut self.rng);
            }
            lrs.push(s.lr);
            hrs.push(s.hr);
        }
        Ok((
            ImageRgb::batch(&lrs.iter().collect::<Vec<_>>())?,
            ImageRgb::batch(&hrs.iter().collect::<Vec<_>>())?,
        ))
    }

    /// Forward, backward and one optimiser update on a given batch.
    pub fn step_on(&mut self, lr_batch: &Tensor, hr_batch: &Tensor) -> Result<f64> {
        let rate = self.lr();
        let (loss, grads) = {
            let s = Session::training(self.model.params());
            let sr = self.model.forward(&s, lr_batch)?;
            let loss = l1_loss(&sr, hr_batch)?;
            loss.backward()?;
            (loss.item()?, s.grads())
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam, rate, &self.cfg);
        self.iter += 1;
        Ok(loss)
    }

    pub fn step(&mut self, images: &[(String, ImageRgb)]) -> Result<f64> {
        let (lr, hr) = self.next_batch(images)?;
        self.step_on(&lr, &hr)
    }

    /// Trains until `total_iters`, validating and checkpointing on the
    /// configured cadence. With `out`, appends `train.log` and `train.csv`
    /// and writes `last.tpmb` and `best.tpmb` there.
    pub fn run(&mut self, train: &[(String, ImageRgb)], val: &[(String, ImageRgb)], out: Option<&Path>) -> Result<Vec<LogRow>> {
        let mut log = match out {
            Some(dir) => Some(LogWriter::open(dir)?),
            None => None,
        };
        let mut rows = Vec::new();
        let mut emit = |row: LogRow, log: &mut Option<LogWriter>| -> Result<()> {
            if let Some(l) = log.as_mut() {
                l.write(&row)?;
            }
            rows.push(row);
            Ok(())
        };
        if self.iter == 0 {
            let row = self.validation_row(None, val, out)?;
            emit(row, &mut log)?;
        }
        while self.iter < self.cfg.total_iters {
            let rate = self.lr();
            let loss = self.step(train)?;
            let due = |every: usize, it: usize| every > 0 && it % every == 0;
            let last = self.iter == self.cfg.total_iters;
            if due(self.cfg.val_every, self.iter) || last {
                let mut row = self.validation_row(Some(loss), val, out)?;
                row.lr = rate;
                emit(row, &mut log)?;
            } else {
                emit(
                    LogRow {
                        iter: self.iter,
                        loss: Some(loss),
                        lr: rate,
                        psnr: None,
                        ssim: None,
                    },
                    &mut log,
                )?;
            }
            if let Some(dir) = out {
                if due(self.cfg.checkpoint_every, self.iter) || last {
                    self.checkpoint().save(&dir.join("last.tpmb"))?;
                }
            }
        }
        Ok(rows)
    }

    fn validation_row(&mut self, loss: Option<f64>, val: &[(String, ImageRgb)], out: Option<&Path>) -> Result<LogRow> {
        let (psnr, ssim) = if val.is_empty() {
            (None, None)
        } else {
            let r = self.model.config().scale;
            let rep = evaluate(&self.model, val, r)?;
            let (p, s) = rep.mean("model").expect("non-empty validation set");
            if self.best_psnr.is_none_or(|b| p > b) {
                self.best_psnr = Some(p);
                if let Some(dir) = out {
                    self.checkpoint().save(&dir.join("best.tpmb"))?;
                }
            }
            (Some(p), Some(s))
        };
        Ok(LogRow {
            iter: self.iter,
            loss,
            lr: self.lr(),
            psnr,
            ssim,
        })
    }
}

struct LogWriter {
    text: fs::File,
    csv: csv::Writer<fs::File>,
    path: PathBuf,
}

impl LogWriter {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e));
        let csv_path = dir.join("train.csv");
        let fresh = fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
        let csv = csv::WriterBuilder::new().has_headers(fresh).from_writer(open(&csv_path)?);
        Ok(Self {
            text: open(&dir.join("train.log"))?,
            csv,
            path: csv_path,
        })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.text, "{}", row.to_line()).map_err(|e| Error::io(&self.path, e))?;
        self.csv.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
        self.csv.flush().map_err(|e| Error::io(&self.path, e))
    }
}
