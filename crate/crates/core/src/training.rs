//! Optimization: AdamW with decoupled decay, warmup-then-cosine schedule,
//! the training loop, checkpoints and resource accounting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, LrGroup, ParamId, ParamStore, Real};
use crate::config::{ExperimentConfig, InputMode};
use crate::data::PreparedStudy;
use crate::error::{McrError, Result};
use crate::masking::MaskPlan;
use crate::model::{BatchItem, McrModel};
use crate::objectives::{total_loss, LossBundle};
use crate::rng::purpose;

/// Per-group learning-rate schedule: linear warmup from zero, then cosine
/// decay to `peak * final_ratio` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_encoders: f64,
    pub peak_rest: f64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &ExperimentConfig, steps_per_epoch: usize) -> Self {
        Self {
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
            peak_encoders: cfg.peak_lr_encoders,
            peak_rest: cfg.peak_lr_rest,
            final_ratio: cfg.final_lr_ratio,
        }
    }

    pub fn peak(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Encoder => self.peak_encoders,
            LrGroup::Rest => self.peak_rest,
        }
    }

    /// Step index of the final optimizer step.
    pub fn final_step(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }

    pub fn lr_at(&self, step: usize, group: LrGroup) -> f64 {
        let peak = self.peak(group);
        if step < self.warmup_steps {
            return peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.final_step().saturating_sub(self.warmup_steps);
        if step == self.warmup_steps || span == 0 {
            return peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = peak * self.final_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Learning rate of `group` at `step` for a run with `steps_per_epoch`.
pub fn lr_at(step: usize, cfg: &ExperimentConfig, steps_per_epoch: usize, group: LrGroup) -> f64 {
    LrSchedule::from_config(cfg, steps_per_epoch).lr_at(step, group)
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(store: &ParamStore<T>, cfg: &ExperimentConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// One update. Parameters without a gradient are left untouched; decay
    /// applies only to parameters flagged for it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Array2<T>)], lr: impl Fn(LrGroup) -> f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::of(self.eps);
        for (id, g) in grads {
            let info = store.info(*id).clone();
            let rate = lr(info.group);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let p = store.get_mut(*id);
            if info.decay && self.weight_decay > 0.0 {
                let keep = T::of(1.0 - rate * self.weight_decay);
                p.mapv_inplace(|x| x * keep);
            }
            let lr_t = T::of(rate);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr_t * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Array2<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: McrModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

/// One row of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_vrc: f64,
    /// `l_vrc` divided by the batch size.
    pub l_vrc_per_sample: f64,
    pub l_mim: f64,
    pub l_mrm: f64,
    pub l_total: f64,
    pub tau: f64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = McrModel::new(cfg, &mut store)?;
        let opt = AdamW::from_config(&store, cfg);
        Ok(Self {
            model,
            store,
            opt,
            step: 0,
            epoch: 0,
        })
    }

    pub fn cfg(&self) -> &ExperimentConfig {
        &self.model.cfg
    }

    /// Forward, backward and one optimizer step with the given per-group rates.
    pub fn train_step_with_lr(&mut self, batch: &[BatchItem<'_>], lr: impl Fn(LrGroup) -> f64) -> Result<LossBundle> {
        let mut g = Graph::<f32>::new();
        let nodes = self.model.loss_graph(&mut g, &self.store, batch)?;
        let tau = self.model.tau(&self.store);
        let value = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.scalar(v) as f64);
        let bundle = total_loss(
            g.scalar(nodes.vrc) as f64,
            value(nodes.mim),
            value(nodes.mrm),
            tau,
            self.cfg(),
        )?;
        if !(g.scalar(nodes.total) as f64).is_finite() {
            return Err(McrError::Numerical(format!("non-finite total loss at step {}: {bundle:?}", self.step)));
        }
        let grads = g.backward(nodes.total);
        let mut pg = g.param_grads(&grads);
        drop(grads);
        drop(g);
        if pg.iter().any(|(_, a)| a.iter().any(|x| !x.is_finite())) {
            return Err(McrError::Numerical(format!("non-finite gradient at step {}: {bundle:?}", self.step)));
        }
        clip_global_norm(&mut pg, self.cfg().grad_clip);
        self.opt.step(&mut self.store, &pg, lr);
        let floor = self.cfg().tau_min.ln() as f32;
        let lt = &mut self.store.get_mut(self.model.log_tau)[[0, 0]];
        if *lt < floor {
            *lt = floor;
        }
        self.step += 1;
        Ok(bundle)
    }

    pub fn train_step(&mut self, batch: &[BatchItem<'_>], schedule: &LrSchedule) -> Result<LossBundle> {
        let step = self.step;
        self.train_step_with_lr(batch, |g| schedule.lr_at(step, g))
    }
}

/// Per-epoch choices for one study: which view and which masks.
pub fn epoch_sample(cfg: &ExperimentConfig, study: &PreparedStudy, index: usize, epoch: usize) -> Result<(usize, MaskPlan)> {
    let view = cfg
        .rng(&[purpose::VIEW, epoch as u64, index as u64])
        .random_range(0..study.views.len());
    let plan = MaskPlan::sample(
        cfg.num_patches(),
        cfg.image_mask_rate,
        study.tokens.body_len(),
        cfg.text_mask_rate,
        &mut cfg.rng(&[purpose::MASK, epoch as u64, index as u64]),
    )?;
    Ok((view, plan))
}

/// Study order for `epoch`.
pub fn epoch_order(cfg: &ExperimentConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut cfg.rng(&[purpose::SHUFFLE, epoch as u64]));
    order
}

pub fn steps_per_epoch(n_studies: usize, batch_size: usize) -> usize {
    n_studies.div_ceil(batch_size.max(1))
}

/// Runs one epoch; returns the per-step log rows.
pub fn train_epoch(state: &mut TrainState, studies: &[PreparedStudy], schedule: &LrSchedule) -> Result<Vec<LossLogRow>> {
    if studies.is_empty() {
        return Err(McrError::Empty("training set"));
    }
    let cfg = state.cfg().clone();
    let epoch = state.epoch;
    let order = epoch_order(&cfg, studies.len(), epoch);
    let mut rows = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let samples = chunk
            .iter()
            .map(|&i| epoch_sample(&cfg, &studies[i], i, epoch).map(|(v, p)| (i, v, p)))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<BatchItem<'_>> = samples
            .iter()
            .map(|(i, v, p)| BatchItem {
                patches: &studies[*i].views[*v],
                targets: &studies[*i].targets[*v],
                tokens: &studies[*i].tokens,
                plan: p,
            })
            .collect();
        let step = state.step;
        let lr = schedule.lr_at(step, LrGroup::Rest);
        let b = state.train_step(&batch, schedule)?;
        rows.push(LossLogRow {
            step,
            epoch,
            l_vrc: b.l_vrc,
            l_vrc_per_sample: b.l_vrc / batch.len() as f64,
            l_mim: b.l_mim,
            l_mrm: b.l_mrm,
            l_total: b.l_total,
            tau: b.tau_current,
            lr,
        });
    }
    state.epoch += 1;
    Ok(rows)
}

/// Trains until `cfg.epochs` epochs are complete, appending log rows to
/// `log` and calling `on_epoch` after each epoch.
pub fn train(
    state: &mut TrainState,
    studies: &[PreparedStudy],
    log: Option<&mut dyn Write>,
    on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let end = state.cfg().epochs;
    train_until(state, studies, end, log, on_epoch)
}

/// Like [`train`] but stops once `until` epochs (capped at `cfg.epochs`) are
/// complete. The schedule always spans the configured epochs.
pub fn train_until(
    state: &mut TrainState,
    studies: &[PreparedStudy],
    until: usize,
    mut log: Option<&mut dyn Write>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let cfg = state.cfg().clone();
    let schedule = LrSchedule::from_config(&cfg, steps_per_epoch(studies.len(), cfg.batch_size));
    while state.epoch < cfg.epochs.min(until) {
        let rows = train_epoch(state, studies, &schedule)?;
        if let Some(w) = log.as_deref_mut() {
            for r in &rows {
                writeln!(w, "{}", serde_json::to_string(r).expect("row serializes"))
                    .map_err(|e| McrError::io("loss log", e))?;
            }
            w.flush().map_err(|e| McrError::io("loss log", e))?;
        }
        if let Some(last) = rows.last() {
            log::info!(
                "epoch {} step {} l_total {:.4} l_vrc {:.4} l_mim {:.4} l_mrm {:.4} tau {:.4}",
                state.epoch,
                state.step,
                last.l_total,
                last.l_vrc,
                last.l_mim,
                last.l_mrm,
                last.tau
            );
        }
        on_epoch(state)?;
    }
    Ok(())
}

const CKPT_MAGIC: &[u8] = b"mcrlab-ckpt-1\n";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    config_hash: String,
    config_toml: String,
    step: usize,
    epoch: usize,
    adam_t: u64,
    tensors: Vec<CkptTensor>,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    rows: usize,
    cols: usize,
}

/// Writes parameters, optimizer moments and counters. Layout: magic line,
/// little-endian `u64` header length, JSON header, then for each tensor its
/// values, first moments and second moments as little-endian `f32`, and a
/// trailing SHA-256 of everything before it.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CkptHeader {
        format: "mcrlab-ckpt-1".into(),
        config_hash: state.cfg().hash(),
        config_toml: state.cfg().to_toml(),
        step: state.step,
        epoch: state.epoch,
        adam_t: state.opt.t,
        tensors: state
            .store
            .infos()
            .iter()
            .zip(state.store.values())
            .map(|(i, v)| CkptTensor {
                name: i.name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 12 * state.store.num_scalars() + 64);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for k in 0..state.store.len() {
        for t in [&state.store.values()[k], &state.opt.m[k], &state.opt.v[k]] {
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| McrError::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| McrError::io(path, e))?);
    w.write_all(&buf).map_err(|e| McrError::io(path, e))?;
    w.flush().map_err(|e| McrError::io(path, e))
}

fn ckpt_err(reason: impl Into<String>) -> McrError {
    McrError::Checkpoint(reason.into())
}

/// Reads a checkpoint. When `expected` is given, its hash must match the
/// stored config hash; otherwise the stored config is used.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<TrainState> {
    let buf = std::fs::read(path).map_err(|e| McrError::io(path, e))?;
    if buf.len() < CKPT_MAGIC.len() + 8 + 32 || !buf.starts_with(CKPT_MAGIC) {
        return Err(ckpt_err("not an mcrlab-ckpt-1 file"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ckpt_err("checksum mismatch (file corrupted)"));
    }
    let mut pos = CKPT_MAGIC.len();
    let hlen = u64::from_le_bytes(body[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let header: CkptHeader = body
        .get(pos..pos + hlen)
        .ok_or_else(|| ckpt_err("truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| ckpt_err(format!("bad header: {e}"))))?;
    pos += hlen;
    if header.format != "mcrlab-ckpt-1" {
        return Err(ckpt_err(format!("unsupported format {}", header.format)));
    }
    let stored = ExperimentConfig::from_toml(&header.config_toml)?;
    if stored.hash() != header.config_hash {
        return Err(ckpt_err("stored config does not match its hash"));
    }
    let cfg = match expected {
        Some(e) if e.hash() != header.config_hash => {
            return Err(ckpt_err(format!(
                "config hash mismatch: checkpoint {}, requested {}",
                header.config_hash,
                e.hash()
            )))
        }
        _ => stored,
    };
    let mut state = TrainState::new(&cfg)?;
    if header.tensors.len() != state.store.len() {
        return Err(ckpt_err("tensor count differs from model"));
    }
    let mut read = |rows: usize, cols: usize| -> Result<Array2<f32>> {
        let n = rows * cols * 4;
        let bytes = body.get(pos..pos + n).ok_or_else(|| ckpt_err("truncated tensor data"))?;
        pos += n;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("sized"))
    };
    for (k, t) in header.tensors.iter().enumerate() {
        let id = ParamId(k);
        if state.store.info(id).name != t.name || state.store.get(id).dim() != (t.rows, t.cols) {
            return Err(ckpt_err(format!("tensor {} does not match the model layout", t.name)));
        }
        *state.store.get_mut(id) = read(t.rows, t.cols)?;
        state.opt.m[k] = read(t.rows, t.cols)?;
        state.opt.v[k] = read(t.rows, t.cols)?;
    }
    if pos != body.len() {
        return Err(ckpt_err("trailing bytes after tensor data"));
    }
    state.step = header.step;
    state.epoch = header.epoch;
    state.opt.t = header.adam_t;
    Ok(state)
}

/// Per-step cost of one input mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub mode: InputMode,
    /// Vision encoder tokens per image per step, summed over forwards.
    pub image_tokens_per_sample: usize,
    pub text_tokens_per_sample: usize,
    pub image_tokens_per_step: usize,
    pub text_tokens_per_step: usize,
    pub params_total: usize,
    pub wall_seconds_per_step: f64,
    pub probe_steps: usize,
    /// Bytes of all activations held for the backward pass of one step.
    pub peak_allocation_proxy: usize,
}

/// Encoder tokens per sample: `(image, text)`.
pub fn tokens_per_sample(cfg: &ExperimentConfig, mode: InputMode) -> (usize, usize) {
    let masked_img = cfg.kept_patches() + 1;
    let text = cfg.text_len();
    match mode {
        InputMode::MaskedOnly => (masked_img, text),
        InputMode::DualInput => (cfg.num_patches() + 1 + masked_img, 2 * text),
    }
}

/// Times `n_probe_steps` training steps on `studies` (cycled) in `mode`
/// with a fixed learning rate, after one untimed warm step.
pub fn resource_report(cfg: &ExperimentConfig, mode: InputMode, studies: &[PreparedStudy], n_probe_steps: usize) -> Result<ResourceReport> {
    if studies.is_empty() {
        return Err(McrError::Empty("probe studies"));
    }
    let cfg = ExperimentConfig {
        input_mode: mode,
        ..cfg.clone()
    };
    let mut state = TrainState::new(&cfg)?;
    let b = cfg.batch_size;
    let mut times = Vec::with_capacity(n_probe_steps);
    let mut peak = 0;
    for s in 0..=n_probe_steps {
        let samples = (0..b)
            .map(|k| {
                let i = (s * b + k) % studies.len();
                epoch_sample(&cfg, &studies[i], i, s).map(|(v, p)| (i, v, p))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<BatchItem<'_>> = samples
            .iter()
            .map(|(i, v, p)| BatchItem {
                patches: &studies[*i].views[*v],
                targets: &studies[*i].targets[*v],
                tokens: &studies[*i].tokens,
                plan: p,
            })
            .collect();
        if s == 0 {
            let mut g = Graph::<f32>::new();
            state.model.loss_graph(&mut g, &state.store, &batch)?;
            peak = g.activation_bytes();
        }
        let t0 = Instant::now();
        state.train_step_with_lr(&batch, |_| cfg.peak_lr_rest)?;
        if s > 0 {
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    let (img, txt) = tokens_per_sample(&cfg, mode);
    Ok(ResourceReport {
        mode,
        image_tokens_per_sample: img,
        text_tokens_per_sample: txt,
        image_tokens_per_step: img * b,
        text_tokens_per_step: txt * b,
        params_total: state.store.num_scalars(),
        wall_seconds_per_step: median(&mut times),
        probe_steps: n_probe_steps,
        peak_allocation_proxy: peak,
    })
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::from_config(&ExperimentConfig::default(), 10)
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0, LrGroup::Encoder), 0.0);
        assert_eq!(s.lr_at(s.warmup_steps, LrGroup::Encoder), 1e-4);
        assert_eq!(s.lr_at(s.warmup_steps, LrGroup::Rest), 3e-4);
        assert!((s.lr_at(s.final_step(), LrGroup::Rest) - 3e-6).abs() < 1e-9);
        assert!((s.lr_at(s.final_step(), LrGroup::Encoder) - 1e-6).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let s = sched();
        for t in 1..s.warmup_steps {
            assert!(s.lr_at(t, LrGroup::Rest) > s.lr_at(t - 1, LrGroup::Rest));
        }
        for t in s.warmup_steps + 1..s.total_steps {
            assert!(s.lr_at(t, LrGroup::Rest) <= s.lr_at(t - 1, LrGroup::Rest));
        }
    }

    #[test]
    fn adam_minimizes_square() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Array2::from_elem((1, 1), 3.0), LrGroup::Rest, false);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..500 {
            let x = store.get(id)[[0, 0]];
            opt.step(&mut store, &[(id, Array2::from_elem((1, 1), 2.0 * x))], |_| 0.1);
        }
        assert!(store.get(id)[[0, 0]].abs() < 1e-3, "{}", store.get(id)[[0, 0]]);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Array2::from_elem((2, 2), 1.0), LrGroup::Rest, true);
        let nd = store.add("b", Array2::from_elem((1, 2), 1.0), LrGroup::Rest, false);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.05);
        let zeros = [(id, Array2::zeros((2, 2))), (nd, Array2::zeros((1, 2)))];
        for k in 1..=5 {
            opt.step(&mut store, &zeros, |_| 0.1);
            let want = (1.0f64 - 0.1 * 0.05).powi(k);
            assert!((store.get(id)[[0, 0]] - want).abs() < 1e-12);
            assert_eq!(store.get(nd)[[0, 0]], 1.0);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![(ParamId(0), Array2::from_elem((1, 2), 3.0f64)), (ParamId(1), Array2::from_elem((1, 1), 4.0))];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        let after = clip_global_norm(&mut g, 1.0);
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_accounting_at_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(tokens_per_sample(&cfg, InputMode::MaskedOnly), (33, 34));
        assert_eq!(tokens_per_sample(&cfg, InputMode::DualInput), (98, 68));
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
