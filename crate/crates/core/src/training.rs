//! Optimizer, learning-rate schedule, patch sampling, augmentation and the
//! training loop.
//!
//! Every random draw of iteration `i` comes from streams derived from
//! `(seed, i)`, so a run resumed from a checkpoint replays exactly.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::objectives::{
    l1, psnr, ssim, total_loss, FeatureNet, LossParts, LossWeights, Reduction,
};
use crate::params::ParamStore;
use crate::rng::{stream_at, Stream};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_OPT: f64 = 1e-8;

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, then clears the gradients. Nothing is
/// touched if any parameter lacks a gradient.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            axis: "params",
            expected: store.len(),
            found: state.m.len(),
        });
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = g.as_f64();
            let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * g;
            let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + EPS_OPT);
            *w = T::of(w.as_f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iters: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_start: 2e-4,
            lr_end: 1e-6,
            total_iters: 2000,
        }
    }
}

/// Cosine annealing from `lr_start` at `t = 0` to `lr_end` at `t = T`;
/// later steps stay at `lr_end`.
pub fn cosine_lr(t: usize, s: &Schedule) -> f64 {
    if t == 0 && s.total_iters > 0 {
        return s.lr_start;
    }
    if t >= s.total_iters {
        return s.lr_end;
    }
    let x = std::f64::consts::PI * t as f64 / s.total_iters as f64;
    s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + x.cos())
}

/// The same uniformly placed `size x size` window cut from both images.
pub fn sample_patch<T: Real, R: Rng + ?Sized>(
    low: &Tensor<T>,
    reference: &Tensor<T>,
    size: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if low.shape() != reference.shape() {
        return Err(Error::invalid(
            "sample_patch",
            format!(
                "pair shapes differ: {:?} vs {:?}",
                low.shape(),
                reference.shape()
            ),
        ));
    }
    let (c, h, w) = low.dims3("sample_patch")?;
    if h < size || w < size || size == 0 {
        return Err(Error::invalid(
            "sample_patch",
            format!("{h}x{w} image is smaller than the {size}x{size} patch; pass a smaller --patch or resize the data"),
        ));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok((
        crop(low, c, h, w, y0, x0, size),
        crop(reference, c, h, w, y0, x0, size),
    ))
}

fn crop<T: Real>(
    t: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    size: usize,
) -> Tensor<T> {
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + x0..row + x0 + size]);
        }
    }
    Tensor::from_parts(vec![c, size, size], out)
}

/// Element `k` of the dihedral group on `[C,H,W]` images: an optional
/// horizontal flip (`k >= 4`) followed by `k % 4` counter-clockwise
/// quarter turns.
pub fn dihedral<T: Real>(t: &Tensor<T>, k: u8) -> Result<Tensor<T>> {
    if k >= 8 {
        return Err(Error::invalid(
            "dihedral",
            format!("transform index {k} outside 0..8"),
        ));
    }
    let (c, h, w) = t.dims3("dihedral")?;
    let turns = k % 4;
    if turns % 2 == 1 && h != w {
        return Err(Error::invalid(
            "dihedral",
            format!("quarter turn of a non-square {h}x{w} patch"),
        ));
    }
    let d = t.data();
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                // Source pixel after undoing the rotation, then the flip.
                let (y, x) = match turns {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let x = if k >= 4 { w - 1 - x } else { x };
                out.push(plane[y * w + x]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Index of the inverse transform. Reflections are their own inverses.
pub fn dihedral_inverse(k: u8) -> u8 {
    if k >= 4 {
        k
    } else {
        (4 - k) % 4
    }
}

/// Applies one uniformly drawn dihedral transform to both halves of a pair.
pub fn augment<T: Real, R: Rng + ?Sized>(
    pair: (Tensor<T>, Tensor<T>),
    rng: &mut R,
) -> Result<((Tensor<T>, Tensor<T>), u8)> {
    let k = rng.gen_range(0..8u8);
    Ok(((dihedral(&pair.0, k)?, dihedral(&pair.1, k)?), k))
}

/// Paired `[3,H,W]` images, low-light first.
#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub pairs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Dataset<T> {
    pub fn new(pairs: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        for (i, (a, b)) in pairs.iter().enumerate() {
            a.dims3("dataset")?;
            if a.shape() != b.shape() {
                return Err(Error::invalid(
                    "dataset",
                    format!("pair {i}: shapes {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(Self { pairs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub batch: usize,
    pub patch: usize,
    pub weights: LossWeights,
    /// Replace the mixed loss with plain L1.
    pub l1_only: bool,
    pub augment: bool,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub log_every: usize,
    pub eval_every: usize,
    pub ckpt_every: usize,
    /// Halt after this iteration while keeping the schedule of the full run.
    pub stop_at: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            batch: 2,
            patch: 64,
            weights: LossWeights::default(),
            l1_only: false,
            augment: true,
            seed: 0,
            clip_norm: None,
            log_every: 10,
            eval_every: 100,
            ckpt_every: 500,
            stop_at: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.lr_start >= s.lr_end && s.lr_end >= 0.0 && s.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end >= 0, got {} and {}",
                s.lr_start, s.lr_end
            )));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if self.log_every == 0 || self.eval_every == 0 || self.ckpt_every == 0 {
            return Err(Error::Config(
                "log_every, eval_every and ckpt_every must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        self.weights.validate()?;
        if !self.l1_only && self.weights.lambda > 0.0 && self.patch < 32 {
            return Err(Error::Config(format!(
                "patch {} is below the 32 the perceptual loss needs",
                self.patch
            )));
        }
        Ok(())
    }

    /// Records that must agree between a checkpoint and the run resuming it.
    fn state_records(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let clip = self.clip_norm.map_or("none".to_string(), |c| c.to_string());
        vec![
            ("total_iters", s.total_iters.to_string()),
            ("lr_start", s.lr_start.to_string()),
            ("lr_end", s.lr_end.to_string()),
            ("batch", self.batch.to_string()),
            ("patch", self.patch.to_string()),
            ("lambda", self.weights.lambda.to_string()),
            ("epsilon", self.weights.epsilon.to_string()),
            ("l1_only", self.l1_only.to_string()),
            ("augment", self.augment.to_string()),
            ("train_seed", self.seed.to_string()),
            ("clip_norm", clip),
        ]
    }
}

/// Optimizer progress; `iter` iterations have been completed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub iter: usize,
    pub adam: AdamState<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            iter: 0,
            adam: AdamState::new(&model.store),
        }
    }
}

/// One JSON-lines log record. Loss fields are absent for the initial record,
/// metric fields on iterations without an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_c: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Emitted records, in order.
    pub records: Vec<TrainRecord>,
    /// Total loss of every iteration run in this call.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_s: f64,
}

impl TrainReport {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_FILE: &str = "latest.ecaf";

/// Model, optimizer state and run options in one checkpoint.
pub fn training_checkpoint<T: Real>(
    model: &Model<T>,
    state: &TrainState<T>,
    opts: &TrainOptions,
) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model);
    ck.state.push(("iter".into(), state.iter.to_string()));
    ck.state.push(("adam_t".into(), state.adam.t.to_string()));
    ck.state.extend(
        opts.state_records()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
    );
    for (i, (_, p)) in model.store.iter().enumerate() {
        ck.tensors
            .push((format!("adam.m/{}", p.name), state.adam.m[i].cast()));
        ck.tensors
            .push((format!("adam.v/{}", p.name), state.adam.v[i].cast()));
    }
    ck
}

/// Restores model and optimizer state, insisting that the run options the
/// checkpoint was written under match `opts` (the stop point aside).
pub fn resume_from<T: Real>(
    ck: &Checkpoint,
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainState<T>)> {
    for (key, want) in opts.state_records() {
        let found = ck
            .state_value(key)
            .ok_or_else(|| Error::format("checkpoint", format!("missing `{key}`")))?;
        if found != want {
            return Err(Error::ConfigMismatch {
                key: key.to_string(),
                expected: want,
                found: found.to_string(),
            });
        }
    }
    let model: Model<T> = ck.to_model(None)?;
    let parse = |key: &str| -> Result<u64> {
        ck.state_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("checkpoint", format!("missing or bad `{key}`")))
    };
    let mut adam = AdamState::new(&model.store);
    adam.t = parse("adam_t")?;
    for (i, (_, p)) in model.store.iter().enumerate() {
        for (prefix, slot) in [("adam.m/", &mut adam.m[i]), ("adam.v/", &mut adam.v[i])] {
            let name = format!("{prefix}{}", p.name);
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{name}` has shape {:?}", t.shape()),
                ));
            }
            *slot = t.cast();
        }
    }
    let iter = parse("iter")? as usize;
    Ok((model, TrainState { iter, adam }))
}

fn batch_for<T: Real>(
    data: &Dataset<T>,
    opts: &TrainOptions,
    iter: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let i = iter as u64;
    let mut pick = stream_at(opts.seed, Stream::PairPick, i);
    let mut crop = stream_at(opts.seed, Stream::Crop, i);
    let mut aug = stream_at(opts.seed, Stream::Augment, i);
    let (mut lows, mut refs) = (
        Vec::with_capacity(opts.batch),
        Vec::with_capacity(opts.batch),
    );
    for _ in 0..opts.batch {
        let (low, reference) = &data.pairs[pick.gen_range(0..data.pairs.len())];
        let mut pair = sample_patch(low, reference, opts.patch, &mut crop)?;
        if opts.augment {
            pair = augment(pair, &mut aug)?.0;
        }
        lows.push(pair.0);
        refs.push(pair.1);
    }
    Ok((Tensor::stack(&lows)?, Tensor::stack(&refs)?))
}

fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    let (low, reference) = &data.pairs[0];
    let x = Tensor::stack(std::slice::from_ref(low))?;
    let y = model.enhance(&x)?.unstack(0)?;
    Ok((psnr(&y, reference)?, ssim(&y, reference)?))
}

fn clip_grads<T: Real>(store: &mut ParamStore<T>, max_norm: f64) {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// One optimization step on a batch; returns the loss components.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    net: &FeatureNet<T>,
    batch: (Tensor<T>, Tensor<T>),
    opts: &TrainOptions,
    lr: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, true);
    let x = tape.constant(batch.0);
    let r = tape.constant(batch.1);
    let y = model.forward(&mut tape, &vars, x)?;
    let (loss, parts) = if opts.l1_only {
        let l = l1(&mut tape, y, r, Reduction::Sum)?;
        let v = tape.value(l).item()?.as_f64();
        (
            l,
            LossParts {
                total: v,
                perceptual: 0.0,
                charbonnier: 0.0,
            },
        )
    } else {
        total_loss(&mut tape, y, r, &opts.weights, net)?
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter: adam.t as usize + 1,
            lr,
        });
    }
    tape.backward(loss)?;
    model.store.accumulate_grads(&tape, &vars)?;
    if let Some(c) = opts.clip_norm {
        clip_grads(&mut model.store, c);
    }
    adam_step(&mut model.store, adam, lr)?;
    Ok(parts)
}

fn append_log(path: &Path, rec: &TrainRecord) -> Result<()> {
    let line =
        serde_json::to_string(rec).map_err(|e| Error::format("log record", e.to_string()))?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Runs iterations `state.iter + 1 ..= min(stop_at, T)`. With `out_dir`,
/// appends JSON lines to `train.jsonl` and writes `latest.ecaf` every
/// `ckpt_every` iterations and at the end.
pub fn train<T: Real>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    opts.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Config(
            "training needs at least one image pair".into(),
        ));
    }
    let start = Instant::now();
    let net = FeatureNet::new(opts.seed);
    let total = opts.schedule.total_iters;
    let end = opts.stop_at.unwrap_or(total).min(total);
    let log_path = out_dir.map(|d| d.join(LOG_FILE));
    let mut report = TrainReport::default();
    let emit = |rec: TrainRecord, report: &mut TrainReport| -> Result<()> {
        if let Some(p) = &log_path {
            append_log(p, &rec)?;
        }
        log::info!("{}", serde_json::to_string(&rec).unwrap_or_default());
        report.records.push(rec);
        Ok(())
    };

    if state.iter == 0 {
        let (p, s) = evaluate(model, data)?;
        let rec = TrainRecord {
            iter: 0,
            psnr_db: Some(p),
            ssim: Some(s),
            loss_total: None,
            loss_p: None,
            loss_c: None,
            lr: cosine_lr(0, &opts.schedule),
            wall_s: start.elapsed().as_secs_f64(),
        };
        emit(rec, &mut report)?;
    }

    for it in state.iter + 1..=end {
        let lr = cosine_lr(it - 1, &opts.schedule);
        let batch = batch_for(data, opts, it)?;
        // Overflow inside the step is divergence too, whichever op saw it first.
        let parts =
            train_step(model, &mut state.adam, &net, batch, opts, lr).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iter: it, lr },
                Error::NonFinite { op } => {
                    log::warn!("{op} produced a non-finite value at iteration {it}");
                    Error::NonFiniteLoss { iter: it, lr }
                }
                e => e,
            })?;
        state.iter = it;
        report.losses.push(parts.total);

        let eval = it % opts.eval_every == 0 || it == end;
        if eval || it % opts.log_every == 0 {
            let metrics = if eval {
                Some(evaluate(model, data)?)
            } else {
                None
            };
            let rec = TrainRecord {
                iter: it,
                psnr_db: metrics.map(|m| m.0),
                ssim: metrics.map(|m| m.1),
                loss_total: Some(parts.total),
                loss_p: Some(parts.perceptual),
                loss_c: Some(parts.charbonnier),
                lr,
                wall_s: start.elapsed().as_secs_f64(),
            };
            emit(rec, &mut report)?;
        }
        if let Some(dir) = out_dir {
            if it % opts.ckpt_every == 0 || it == end {
                let path = dir.join(CHECKPOINT_FILE);
                training_checkpoint(model, state, opts).save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let (Some(dir), true) = (out_dir, end <= state.iter && report.checkpoints.is_empty()) {
        // Nothing ran: still leave a checkpoint of the current state.
        let path = dir.join(CHECKPOINT_FILE);
        training_checkpoint(model, state, opts).save(&path)?;
        report.checkpoints.push(path);
    }
    report.wall_s = start.elapsed().as_secs_f64();
    Ok(report)
}
