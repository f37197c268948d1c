//! Pretraining loop: AdamW with warmup + cosine decay, EMA target updates,
//! JSON-lines logging and resumable checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{make_view_pair, MaskPattern};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::{Config, TrainConfig};
use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::geometry::CropSpec;
use crate::loss::{pixel_loss, total_loss, LossReport};
use crate::model::{
    decode_predict, decoder_geometry, ema_momentum, ema_update, encode_online, encode_target, mask_token_embeds,
    normalized_pixel_targets, patchify, DecoderGeometry, EmaSchedule, Net, SimModel, TargetKind,
};
use crate::nn::{BnMode, Fwd, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor};

/// Peak learning rate under the linear scaling rule.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak`, then half-cosine decay to 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let t = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    peak * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers mirroring one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = store.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Moments { m: z.clone(), v: z }
    }
}

/// One decoupled-weight-decay Adam update; `t` is the 1-based step used for bias correction.
/// Rank-1 parameters (norm affines, biases, the mask token) are not decayed.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut Moments<T>,
    t: u64,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(SimError::invalid("adamw", "gradient count does not match parameters"));
    }
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (c1, c2) = (1.0 - hp.beta1.powi(t as i32), 1.0 - hp.beta2.powi(t as i32));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    let (inv_c1, inv_c2) = (T::of(1.0 / c1), T::of(1.0 / c2));
    let one = T::one();
    let names = params.names().to_vec();
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(SimError::shape("adamw", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(SimError::invalid("adamw", format!("non-finite gradient for `{}`", names[i])));
        }
        let wd = T::of(if p.rank() > 1 { hp.weight_decay } else { 0.0 });
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] * inv_c1;
            let vhat = v[j] * inv_c2;
            *x = *x - lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
        }
    }
    Ok(())
}

/// Step counts and learning-rate / momentum schedules of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub ema: EmaSchedule,
}

impl Schedule {
    pub fn new(train: &TrainConfig, dataset_len: usize) -> Result<Self> {
        let steps_per_epoch = dataset_len / train.batch_size;
        if steps_per_epoch == 0 {
            return Err(SimError::Data(format!(
                "{dataset_len} training images cannot fill one batch of {}",
                train.batch_size
            )));
        }
        let total_steps = steps_per_epoch * train.epochs;
        Ok(Schedule {
            steps_per_epoch,
            total_steps,
            warmup_steps: steps_per_epoch * train.warmup_epochs,
            peak_lr: effective_lr(train.base_lr, train.batch_size),
            ema: EmaSchedule::new(train.ema_base, train.ema_final, total_steps)?,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(step, self.warmup_steps, self.total_steps, self.peak_lr)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: SimModel<T>,
    pub adam_encoder: Moments<T>,
    pub adam_decoder: Moments<T>,
    /// Optimiser steps taken so far.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: SimModel<T>) -> Self {
        TrainState {
            adam_encoder: Moments::zeros_like(&model.online.params),
            adam_decoder: Moments::zeros_like(&model.online_decoder.params),
            model,
            step: 0,
        }
    }

    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new(SimModel::new(cfg.model.clone(), cfg.seed)?))
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut tensors = Vec::new();
        let nets = [
            ("online", &self.model.online),
            ("decoder", &self.model.online_decoder),
            ("target", &self.model.target),
        ];
        for (prefix, net) in nets {
            push_net(&mut tensors, prefix, net);
        }
        for (prefix, store, moments) in [
            ("online", &self.model.online.params, &self.adam_encoder),
            ("decoder", &self.model.online_decoder.params, &self.adam_decoder),
        ] {
            for (i, name) in store.names().iter().enumerate() {
                tensors.push(NamedTensor::from_tensor(format!("adam.m.{prefix}.{name}"), &moments.m[i]));
                tensors.push(NamedTensor::from_tensor(format!("adam.v.{prefix}.{name}"), &moments.v[i]));
            }
        }
        Checkpoint {
            step: self.step as u64,
            config: config_text.to_string(),
            tensors,
        }
    }

    /// Rebuilds the run state recorded in a checkpoint, with its embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Config, Self)> {
        let cfg = Config::from_text(&ck.config)?;
        let mut state = Self::init(&cfg)?;
        let model = &mut state.model;
        load_net(ck, "online", &mut model.online)?;
        load_net(ck, "decoder", &mut model.online_decoder)?;
        load_net(ck, "target", &mut model.target)?;
        for (prefix, store, moments) in [
            ("online", &model.online.params, &mut state.adam_encoder),
            ("decoder", &model.online_decoder.params, &mut state.adam_decoder),
        ] {
            for (i, name) in store.names().iter().enumerate() {
                moments.m[i] = load_tensor(ck, &format!("adam.m.{prefix}.{name}"), store.values()[i].shape())?;
                moments.v[i] = load_tensor(ck, &format!("adam.v.{prefix}.{name}"), store.values()[i].shape())?;
            }
        }
        state.step = ck.step as usize;
        Ok((cfg, state))
    }
}

fn push_net<T: Scalar>(out: &mut Vec<NamedTensor>, prefix: &str, net: &Net<T>) {
    for (name, v) in net.params.names().iter().zip(net.params.values()) {
        out.push(NamedTensor::from_tensor(format!("{prefix}.param.{name}"), v));
    }
    for (i, (m, v)) in net.bn.mean.iter().zip(&net.bn.var).enumerate() {
        out.push(NamedTensor::from_slice(format!("{prefix}.bn.{i}.mean"), m));
        out.push(NamedTensor::from_slice(format!("{prefix}.bn.{i}.var"), v));
    }
}

fn load_tensor<T: Scalar>(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = ck.get(name)?;
    if t.shape != shape {
        return Err(SimError::Checkpoint(format!(
            "`{name}` has shape {:?}, model expects {shape:?}",
            t.shape
        )));
    }
    t.to_tensor()
}

fn load_net<T: Scalar>(ck: &Checkpoint, prefix: &str, net: &mut Net<T>) -> Result<()> {
    let names = net.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = net.params.values()[i].shape().to_vec();
        net.params.values_mut()[i] = load_tensor(ck, &format!("{prefix}.param.{name}"), &shape)?;
    }
    for i in 0..net.bn.mean.len() {
        let c = net.bn.mean[i].len();
        net.bn.mean[i] = load_tensor::<T>(ck, &format!("{prefix}.bn.{i}.mean"), &[c])?.into_data();
        net.bn.var[i] = load_tensor::<T>(ck, &format!("{prefix}.bn.{i}.var"), &[c])?.into_data();
    }
    Ok(())
}

/// Loads only the model of a checkpoint.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Config, SimModel<T>)> {
    let ck = Checkpoint::read(path)?;
    let (cfg, state) = TrainState::<T>::from_checkpoint(&ck)?;
    Ok((cfg, state.model))
}

/// Network inputs for one step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub patches_a: Tensor<T>,
    pub patches_b: Tensor<T>,
    pub masks: Vec<MaskPattern>,
    pub crops: Vec<(CropSpec, CropSpec)>,
    pub geometry: DecoderGeometry<T>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the augmentation stream for one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ index as u64)
}

/// Sample visiting order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX));
    order.shuffle(&mut rng);
    order
}

/// Augments and packs the samples at `indices` (dataset positions) for `epoch`.
pub fn make_batch<T: Scalar>(dataset: &Dataset, indices: &[usize], epoch: usize, cfg: &Config, decoder_pos: &Tensor<T>) -> Result<Batch<T>> {
    let m = &cfg.model;
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &dataset.samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i));
        let pair = make_view_pair(&mut rng, &sample.image, &cfg.aug, cfg.same_view, m.image_size, m.num_tokens(), &dataset.norm)
            .map_err(|e| SimError::Data(format!("sample {}: {e}", sample.path.display())))?;
        pairs.push(pair);
    }
    let a: Vec<_> = pairs.iter().map(|p| &p.image_a).collect();
    let b: Vec<_> = pairs.iter().map(|p| &p.image_b).collect();
    let masks: Vec<MaskPattern> = pairs.iter().map(|p| p.mask.clone()).collect();
    let crops: Vec<_> = pairs.iter().map(|p| (p.crop_a, p.crop_b)).collect();
    Ok(Batch {
        patches_a: patchify(&a, m.patch_size)?,
        patches_b: patchify(&b, m.patch_size)?,
        geometry: decoder_geometry(m, decoder_pos, &crops, &masks)?,
        masks,
        crops,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub global: f64,
    pub dense: f64,
    pub align: Option<f64>,
    pub uniform: Option<f64>,
    pub feat_std: f64,
    pub lr: f64,
    pub ema_m: f64,
}

impl StepRecord {
    fn new(step: usize, r: &LossReport, lr: f64, ema_m: f64) -> Self {
        StepRecord {
            step,
            total: r.total,
            global: r.global,
            dense: r.dense,
            align: r.align,
            uniform: r.uniform,
            feat_std: r.feat_std,
            lr,
            ema_m,
        }
    }
}

/// Dense prediction targets: EMA-branch features or normalised pixels of view b.
pub fn targets<T: Scalar>(model: &mut SimModel<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
    match model.cfg.target {
        TargetKind::Pixel => Ok(normalized_pixel_targets(&batch.patches_b)),
        TargetKind::Feature => {
            let mut tape = Tape::new();
            let vars = model.target.params.bind(&mut tape, false);
            let mut bn = std::mem::take(&mut model.target.bn);
            let mut f = Fwd {
                tape: &mut tape,
                vars: &vars,
                bn: BnMode::Train {
                    stats: Some(&mut bn),
                    momentum: model.cfg.bn_momentum,
                },
                identity_attention: false,
            };
            let x = f.tape.constant(batch.patches_b.clone());
            let z = encode_target(&mut f, model, x);
            model.target.bn = bn;
            Ok(tape.value(z?).clone())
        }
    }
}

/// Online forward, loss and backward. Returns the report plus gradients for the
/// online encoder and the decoder (zeros where no gradient flowed).
pub fn loss_and_grads<T: Scalar>(
    model: &mut SimModel<T>,
    batch: &Batch<T>,
    target: &Tensor<T>,
    cfg: &Config,
) -> Result<(LossReport, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let enc_vars = model.online.params.bind(&mut tape, true);
    let dec_vars = model.online_decoder.params.bind(&mut tape, true);
    let momentum = model.cfg.bn_momentum;

    let mut enc_bn = std::mem::take(&mut model.online.bn);
    let mut f = Fwd {
        tape: &mut tape,
        vars: &enc_vars,
        bn: BnMode::Train {
            stats: Some(&mut enc_bn),
            momentum,
        },
        identity_attention: false,
    };
    let xa = f.tape.constant(batch.patches_a.clone());
    let y_a = encode_online(&mut f, model, xa, &batch.masks);
    model.online.bn = enc_bn;
    let y_a = y_a?;

    let mut dec_bn = std::mem::take(&mut model.online_decoder.bn);
    let mut f = Fwd {
        tape: &mut tape,
        vars: &dec_vars,
        bn: BnMode::Train {
            stats: Some(&mut dec_bn),
            momentum,
        },
        identity_attention: false,
    };
    let y_b = (|| {
        let mix = f.tape.constant(batch.geometry.mixer_input.clone());
        let p_b = mask_token_embeds(&mut f, &model.decoder, mix)?;
        let pav = f.tape.constant(batch.geometry.p_a_visible.clone());
        decode_predict(&mut f, &model.decoder, y_a, pav, p_b)
    })();
    model.online_decoder.bn = dec_bn;
    let y_b = y_b?;

    let (root, report) = match model.cfg.target {
        TargetKind::Feature => total_loss(&mut tape, y_b, target, &cfg.loss)?,
        TargetKind::Pixel => pixel_loss(&mut tape, y_b, target, &cfg.loss)?,
    };
    tape.backward(root)?;
    let collect = |tape: &mut Tape<T>, vars: &[crate::tensor::Var], store: &ParamStore<T>| -> Vec<Tensor<T>> {
        vars.iter()
            .zip(store.values())
            .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    };
    let g_enc = collect(&mut tape, &enc_vars, &model.online.params);
    let g_dec = collect(&mut tape, &dec_vars, &model.online_decoder.params);
    Ok((report, g_enc, g_dec))
}

fn clip_gradients<T: Scalar>(groups: &mut [&mut Vec<Tensor<T>>], max_norm: f64) {
    let sq: f64 = groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in groups.iter_mut() {
            for t in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
}

/// Full optimisation step: targets, loss, backward, AdamW, EMA.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &Config, schedule: &Schedule) -> Result<StepRecord> {
    let step = state.step;
    let target = targets(&mut state.model, batch)?;
    let (report, mut g_enc, mut g_dec) = loss_and_grads(&mut state.model, batch, &target, cfg)?;
    if !report.total.is_finite() {
        return Err(SimError::Loss(format!("non-finite loss at step {step}")));
    }
    if cfg.train.grad_clip > 0.0 {
        clip_gradients(&mut [&mut g_enc, &mut g_dec], cfg.train.grad_clip);
    }
    let lr = schedule.lr(step);
    let t = &cfg.train;
    let hp = AdamHyper {
        lr,
        beta1: t.betas.0,
        beta2: t.betas.1,
        eps: t.adam_eps,
        weight_decay: t.weight_decay,
    };
    let model = &mut state.model;
    adamw_step(&mut model.online.params, &g_enc, &mut state.adam_encoder, step as u64 + 1, &hp)?;
    adamw_step(&mut model.online_decoder.params, &g_dec, &mut state.adam_decoder, step as u64 + 1, &hp)?;
    let m = ema_momentum(step, &schedule.ema);
    ema_update(&model.online.params, &mut model.target.params, m)?;
    state.step += 1;
    Ok(StepRecord::new(step, &report, lr, m))
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many total steps have been taken.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub last_checkpoint: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub steps: usize,
    /// Mean total loss of every epoch completed in this call, keyed by epoch index.
    pub epoch_losses: Vec<(usize, f64)>,
    pub min_feat_std: f64,
    pub collapsed: bool,
}

/// Below this per-image feature std the representation is treated as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1e-3;

/// Trains on `train` with `cfg`, writing logs and checkpoints under `cfg.out_dir`.
pub fn fit<T: Scalar>(cfg: &Config, train: &Dataset, opts: &FitOptions) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(SimError::Data("training set is empty".into()));
    }
    cfg.validate()?;
    let (mut state, resumed) = match &opts.resume {
        Some(path) => {
            let (saved_cfg, state) = TrainState::<T>::from_checkpoint(&Checkpoint::read(path)?)?;
            if saved_cfg.model != cfg.model {
                return Err(SimError::Checkpoint(format!(
                    "{}: model config differs from the requested run",
                    path.display()
                )));
            }
            (state, true)
        }
        None => (TrainState::<T>::init(cfg)?, false),
    };
    let schedule = Schedule::new(&cfg.train, train.len())?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    let config_text = cfg.to_text();
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(|e| SimError::io(&log_path, e))?;

    let init_checkpoint = if resumed {
        None
    } else {
        let p = out.join("init.ckpt");
        state.to_checkpoint(&config_text).write(&p)?;
        Some(p)
    };
    let end = opts.stop_after.unwrap_or(schedule.total_steps).min(schedule.total_steps);
    let start = state.step;
    let spe = schedule.steps_per_epoch;
    let bs = cfg.train.batch_size;
    let decoder_pos = state.model.decoder_pos.clone();
    let last = out.join("last.ckpt");

    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    let mut min_feat_std = f64::INFINITY;
    let timer = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch<T>>>(cfg.train.prefetch.max(1));
        let producer = scope.spawn(move || {
            let mut order = Vec::new();
            let mut order_epoch = usize::MAX;
            for step in start..end {
                let epoch = step / spe;
                if epoch != order_epoch {
                    order = epoch_order(cfg.seed, epoch, train.len());
                    order_epoch = epoch;
                }
                let k = step % spe;
                let batch = make_batch(train, &order[k * bs..(k + 1) * bs], epoch, cfg, &decoder_pos);
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in start..end {
            let batch = rx
                .recv()
                .map_err(|_| SimError::Data("batch producer stopped early".into()))??;
            let record = match train_step(&mut state, &batch, cfg, &schedule) {
                Ok(r) => r,
                Err(e) => {
                    let debug = out.join(format!("debug-step{step}.ckpt"));
                    state.to_checkpoint(&config_text).write(&debug)?;
                    return Err(SimError::Loss(format!("step {step} failed ({e}); state saved to {}", debug.display())));
                }
            };
            let line = serde_json::to_string(&record).expect("serialisable record");
            writeln!(log, "{line}").map_err(|e| SimError::io(&log_path, e))?;
            min_feat_std = min_feat_std.min(record.feat_std);
            epoch_sum += record.total;
            epoch_count += 1;
            if step % 50 == 0 {
                log::info!(
                    "step {step}/{} loss {:.5} feat_std {:.4} lr {:.3e} ({:.1}s)",
                    schedule.total_steps,
                    record.total,
                    record.feat_std,
                    record.lr,
                    timer.elapsed().as_secs_f64()
                );
            }
            if (step + 1) % spe == 0 {
                let epoch = step / spe;
                epoch_losses.push((epoch, epoch_sum / epoch_count as f64));
                epoch_sum = 0.0;
                epoch_count = 0;
                let every = cfg.train.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 {
                    state
                        .to_checkpoint(&config_text)
                        .write(&out.join(format!("epoch{:04}.ckpt", epoch + 1)))?;
                }
            }
        }
        drop(rx);
        producer.join().expect("batch producer panicked");
        Ok(())
    })?;
    log.flush().map_err(|e| SimError::io(&log_path, e))?;
    state.to_checkpoint(&config_text).write(&last)?;
    let collapsed = min_feat_std < COLLAPSE_THRESHOLD;
    if collapsed {
        log::warn!("feature std fell to {min_feat_std:.3e}: representation collapsed");
    }
    Ok(FitSummary {
        last_checkpoint: last,
        init_checkpoint,
        log_path,
        steps: state.step - start,
        epoch_losses,
        min_feat_std,
        collapsed,
    })
}
