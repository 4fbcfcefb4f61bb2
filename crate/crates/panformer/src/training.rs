//! L1 training with Adam and a step-decay learning-rate schedule, plus
//! binary checkpoints that restore training to a bitwise-identical
//! continuation.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, PatchPair};
use crate::model::{PanFormerConfig, PanFormerModel};
use crate::tensor::{quantize, Engine, ParamSet, Tape, Tensor};
use crate::{PfError, Result};

/// Seed of the named sub-stream derived from a base seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the stream name, mixed into the seed
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Derive a named, independent RNG stream from a base seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}

fn default_lr0() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4
}
fn default_max_iters() -> u64 {
    200_000
}
fn default_decay() -> f64 {
    0.99
}
fn default_decay_every() -> u64 {
    10_000
}
fn default_seed() -> u64 {
    42
}
fn default_checkpoint_every() -> u64 {
    1_000
}
fn default_log_every() -> u64 {
    100
}
fn loss_reduction() -> String {
    "mean".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "loss_reduction")]
    pub loss_reduction: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(PfError::Config(format!("decay {} must be in (0,1]", self.decay)));
        }
        if self.batch == 0 {
            return Err(PfError::Config("batch must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(PfError::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.decay_every == 0 {
            return Err(PfError::Config("decay_every must be >= 1".into()));
        }
        if self.loss_reduction != "mean" {
            return Err(PfError::Config(format!(
                "unsupported loss_reduction {:?} (only \"mean\")",
                self.loss_reduction
            )));
        }
        Ok(())
    }
}

/// Step-decay schedule: lr0 · decay^⌊iter / decay_every⌋.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((iter / cfg.decay_every) as i32)
}

/// Mean absolute error between two equal-shaped tensors.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut e = crate::tensor::Eager::new();
    let loss = e.l1_loss(pred, gt)?;
    Ok(loss.data()[0])
}

/// Per-parameter Adam moments; element layout mirrors the ParamSet order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(ps: &ParamSet) -> Self {
        AdamState {
            step: 0,
            m: ps.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: ps.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `ps`.
pub fn adam_step(ps: &mut ParamSet, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if ps.is_empty() {
        return Err(PfError::Contract("adam_step on an empty parameter set".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in ps.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = p.grad.data().to_vec();
        let vals = p.value.data_mut();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            vals[j] -= lr * mh / (vh.sqrt() + cfg.eps_adam);
        }
        quantize(vals);
        quantize(m);
        quantize(v);
    }
    Ok(())
}

/// One line of the training log (line-delimited JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Stack normalized patch rasters into batched (pan, ms, gt) tensors.
pub fn batch_tensors(pairs: &[PatchPair], picks: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let stack = |get: &dyn Fn(&PatchPair) -> &crate::data::RasterImage| -> Result<Tensor> {
        let first = get(&pairs[picks[0]]);
        let shape = vec![picks.len(), first.height, first.width, first.bands];
        let mut data = Vec::with_capacity(shape.iter().product());
        for &i in picks {
            let t = normalize(get(&pairs[i]));
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    };
    Ok((
        stack(&|p| &p.pan)?,
        stack(&|p| &p.lrms)?,
        stack(&|p| &p.gt)?,
    ))
}

/// Batch composition at a given iteration: uniform with replacement,
/// a pure function of (seed, iter).
pub fn batch_indices(seed: u64, iter: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = substream(seed.wrapping_add(iter.wrapping_mul(0x9e3779b97f4a7c15)), "sampling");
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Run the training loop from `start_iter` to `cfg.max_iters`.
///
/// Deterministic given (seed, config, patch contents). `on_checkpoint`
/// fires every `checkpoint_every` iterations and at the end; `on_log`
/// every `log_every` iterations (both 1-based counters).
pub fn train(
    model: &mut PanFormerModel,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
    resume: Option<AdamState>,
    start_iter: u64,
    mut on_log: impl FnMut(&LogRecord),
    mut on_checkpoint: impl FnMut(u64, &PanFormerModel, &AdamState) -> Result<()>,
) -> Result<AdamState> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(PfError::Config("training manifest is empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| AdamState::new(&model.params));
    let t0 = Instant::now();
    for iter in start_iter..cfg.max_iters {
        let picks = batch_indices(cfg.seed, iter, cfg.batch, pairs.len());
        let (pan, ms, gt) = batch_tensors(pairs, &picks)?;

        let mut tape = Tape::new();
        let pan_v = tape.constant(pan);
        let ms_v = tape.constant(ms);
        let gt_v = tape.constant(gt);
        let pred = model.forward(&mut tape, &pan_v, &ms_v)?;
        let loss_v = tape.l1_loss(&pred, &gt_v)?;
        let loss = tape.value(&loss_v).data()[0];
        if !loss.is_finite() {
            return Err(PfError::Contract(format!(
                "non-finite loss {loss} at iteration {iter}; last checkpoint retained"
            )));
        }

        model.params.zero_grad();
        tape.backward(loss_v, &mut model.params)?;
        let lr = lr_at(iter, cfg);
        adam_step(&mut model.params, &mut state, lr, cfg)?;

        let done = iter + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.max_iters) {
            on_log(&LogRecord {
                iter: done,
                lr,
                loss,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.max_iters
        {
            on_checkpoint(done, model, &state)?;
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"PFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CkptMeta {
    model: PanFormerConfig,
    train: TrainConfig,
    step: u64,
    seed: u64,
}

/// Full training snapshot: configs, parameters, and optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_cfg: PanFormerConfig,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(model: &PanFormerModel, train_cfg: &TrainConfig, state: &AdamState) -> Self {
        Checkpoint {
            model_cfg: model.cfg,
            train_cfg: train_cfg.clone(),
            step: state.step,
            seed: train_cfg.seed,
            params: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
                .collect(),
            adam_m: state.m.clone(),
            adam_v: state.v.clone(),
        }
    }

    /// Rebuild the model and optimizer state for a bitwise continuation.
    pub fn restore(&self) -> Result<(PanFormerModel, AdamState)> {
        let mut model = PanFormerModel::init_seeded(self.model_cfg, self.seed)?;
        if self.params.len() != model.params.len() {
            return Err(PfError::parse(
                "checkpoint",
                format!(
                    "parameter count {} does not match model ({})",
                    self.params.len(),
                    model.params.len()
                ),
            ));
        }
        for (name, shape, data) in &self.params {
            let id = model.params.id_of(name).ok_or_else(|| {
                PfError::parse("checkpoint", format!("unknown parameter name {name}"))
            })?;
            let p = model.params.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(PfError::parse(
                    "checkpoint",
                    format!("parameter {name} shape {shape:?} != model {:?}", p.value.shape()),
                ));
            }
            p.value = Tensor::new(shape.clone(), data.clone())?;
        }
        let state = AdamState { step: self.step, m: self.adam_m.clone(), v: self.adam_v.clone() };
        Ok((model, state))
    }
}

fn write_array(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PfError::parse(
                "checkpoint",
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = CkptMeta {
        model: ckpt.model_cfg,
        train: ckpt.train_cfg.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, vals) in &ckpt.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        write_array(&mut buf, vals);
    }
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    for m in &ckpt.adam_m {
        write_array(&mut buf, m);
    }
    for v in &ckpt.adam_v {
        write_array(&mut buf, v);
    }
    Ok(buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(PfError::parse("checkpoint", "bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(PfError::parse(
            "checkpoint",
            format!("version {version}, expected {CKPT_VERSION}"),
        ));
    }
    let meta_len = r.u32()? as usize;
    let meta: CkptMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| PfError::parse("checkpoint", e.to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let vals = r.array()?;
        let numel: usize = shape.iter().product();
        if vals.len() != numel {
            return Err(PfError::parse(
                "checkpoint",
                format!("parameter {name}: {} values for shape {shape:?}", vals.len()),
            ));
        }
        params.push((name, shape, vals));
    }
    let step = r.u64()?;
    let mut adam_m = Vec::with_capacity(count);
    for _ in 0..count {
        adam_m.push(r.array()?);
    }
    let mut adam_v = Vec::with_capacity(count);
    for _ in 0..count {
        adam_v.push(r.array()?);
    }
    if r.pos != bytes.len() {
        return Err(PfError::parse(
            "checkpoint",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        model_cfg: meta.model,
        train_cfg: meta.train,
        step,
        seed: meta.seed,
        params,
        adam_m,
        adam_v,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
