//! Training: the summed captioning loss over every cascade stage, the
//! hypothesis-reconstruction auxiliary loss against a momentum encoder,
//! scheduled sampling for the initial decoder, the optimizer, and
//! checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decoder::{cascade_teacher_forced, targets_of, StageTF};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::{Model, MomentumEncoder, ProjParams};
use crate::par;
use crate::params::{ema_update, ParamBind, ParamGroup};
use crate::synth::{derive_seed, mask_explanation, Example};
use crate::tensor::{Tape, TensorId};

// ── Losses ───────────────────────────────────────────────────────────

/// Negative log-likelihood summed over every stage, event and position,
/// terminator targets included. Returns the scalar node and the number of
/// summed token positions (for per-token reporting).
pub fn main_loss(
    tape: &mut Tape,
    stages: &[StageTF],
    sentences: &[Vec<usize>],
) -> Result<(TensorId, usize)> {
    if stages.is_empty() {
        return Err(Error::contract("loss over zero stages"));
    }
    let mut total: Option<TensorId> = None;
    let mut tokens = 0usize;
    for st in stages {
        if st.logits.len() != sentences.len() {
            return Err(Error::contract(format!(
                "stage decoded {} events but {} sentences were given",
                st.logits.len(),
                sentences.len()
            )));
        }
        for (ev, words) in sentences.iter().enumerate() {
            let targets = targets_of(words);
            let weights = vec![1.0; targets.len()];
            let ce = tape.cross_entropy_from_logits(st.logits[ev], &targets, &weights)?;
            tokens += targets.len();
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
    }
    Ok((total.expect("at least one stage"), tokens))
}

/// Two-layer projection head.
pub fn proj_forward(
    tape: &mut Tape,
    bind: &mut ParamBind,
    proj: &ProjParams,
    x: TensorId,
) -> Result<TensorId> {
    let w1 = bind.bind(tape, "proj.w1", &proj.w1);
    let b1 = bind.bind(tape, "proj.b1", &proj.b1);
    let w2 = bind.bind(tape, "proj.w2", &proj.w2);
    let b2 = bind.bind(tape, "proj.b2", &proj.b2);
    let h = tape.matmul(x, w1)?;
    let hb = tape.add_row(h, b1)?;
    let a = tape.relu(hb);
    let o = tape.matmul(a, w2)?;
    tape.add_row(o, b2)
}

/// Euclidean distance between the projected online hypothesis embedding and
/// a fixed target vector. The target enters as data, so no gradient can
/// reach the branch that produced it.
pub fn aux_loss(
    tape: &mut Tape,
    bind: &mut ParamBind,
    proj: &ProjParams,
    online_h: TensorId,
    target: &[f64],
) -> Result<TensorId> {
    let p = proj_forward(tape, bind, proj, online_h)?;
    if tape.shape(p)[1] != target.len() {
        return Err(Error::ShapeMismatch {
            op: "aux_loss",
            left: tape.shape(p).to_vec(),
            right: vec![1, target.len()],
        });
    }
    let t = tape.constant(target.to_vec(), &[1, target.len()]);
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Reconstruction target: the frozen momentum encoder run over the
/// unmasked sequence (explanation features restored, no key masking),
/// projected by the momentum head. Plain data out.
pub fn momentum_target(
    momentum: &MomentumEncoder,
    model: &Model,
    features: &[Vec<f64>],
    h: usize,
) -> Result<Vec<f64>> {
    let n = features.len();
    let d_raw = features[0].len();
    let mut tape = Tape::new();
    let mut bind = ParamBind::frozen();
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let fid = tape.constant(flat, &[n, d_raw]);
    let enc = crate::encoder::encode_features(
        &mut tape,
        &mut bind,
        &momentum.encoder,
        &model.cfg,
        fid,
        n,
        None,
    )?;
    let vh = tape.slice_rows(enc.events, h, 1)?;
    let p = proj_forward(&mut tape, &mut bind, &momentum.proj, vh)?;
    Ok(tape.data(p).to_vec())
}

/// `ema <- m*ema + (1-m)*online` over the encoder and projection weights.
pub fn momentum_update(model: &Model, ema: &mut MomentumEncoder, m: f64) -> Result<()> {
    ema_update(&model.encoder, &mut ema.encoder, m)?;
    ema_update(&model.proj, &mut ema.proj, m)
}

// ── Scheduled sampling ───────────────────────────────────────────────

/// Replacement probability at `step`: a linear ramp from 0 to the plateau
/// over the first `ss_ramp_frac` of training.
pub fn sampling_probability(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if cfg.ss_max == 0.0 {
        return 0.0;
    }
    let horizon = (cfg.ss_ramp_frac * total_steps as f64).max(1.0);
    cfg.ss_max * (step as f64 / horizon).min(1.0)
}

/// Independent per-token replacement decisions for one example's sentences.
pub fn sampling_decisions(
    rng: &mut ChaCha8Rng,
    p: f64,
    sentence_lens: &[usize],
) -> Vec<Vec<bool>> {
    sentence_lens
        .iter()
        .map(|&l| (0..l).map(|_| rng.gen_range(0.0..1.0) < p).collect())
        .collect()
}

// ── Per-example forward ──────────────────────────────────────────────

/// Scalar results of one teacher-forced example pass.
pub struct ExampleLoss {
    pub main_sum: f64,
    pub aux: f64,
    pub token_count: usize,
    pub grads: Option<HashMap<String, Vec<f64>>>,
}

/// Encode, cascade teacher-forced, and reduce to `main + lambda * aux`.
/// With `compute_grads` the gradients of that total land in the returned
/// map; the momentum branch only contributes a constant target.
pub fn example_forward(
    model: &Model,
    momentum: &MomentumEncoder,
    ex: &Example,
    lambda: f64,
    d0_inputs: Option<&[Vec<usize>]>,
    compute_grads: bool,
) -> Result<ExampleLoss> {
    let (masked, targets) = mask_explanation(ex);
    let mut tape = Tape::new();
    let mut bind = if compute_grads {
        ParamBind::new()
    } else {
        ParamBind::frozen()
    };
    let enc = encode(&mut tape, &mut bind, &model.encoder, &model.cfg, &masked)?;
    let stages = cascade_teacher_forced(
        &mut tape,
        &mut bind,
        &model.decoder,
        &model.cfg,
        enc.events,
        &targets,
        d0_inputs,
    )?;
    let (main_id, token_count) = main_loss(&mut tape, &stages, &targets)?;
    let main_sum = tape.data(main_id)[0];

    let use_aux = model.cfg.aux_loss && lambda > 0.0;
    let (total_id, aux_val) = if use_aux {
        let target = momentum_target(momentum, model, &ex.features, ex.h)?;
        let vh = tape.slice_rows(enc.events, ex.h, 1)?;
        let aux_id = aux_loss(&mut tape, &mut bind, &model.proj, vh, &target)?;
        let aux_val = tape.data(aux_id)[0];
        let weighted = tape.scale(aux_id, lambda);
        (tape.add(main_id, weighted)?, aux_val)
    } else {
        (main_id, 0.0)
    };

    let total = tape.data(total_id)[0];
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss {total}"),
        });
    }
    let grads = if compute_grads {
        tape.backward(total_id)?;
        Some(bind.grad_map(&tape))
    } else {
        None
    };
    Ok(ExampleLoss {
        main_sum,
        aux: aux_val,
        token_count,
        grads,
    })
}

/// Frozen total loss of a batch, for gradient verification.
pub fn batch_loss_value(
    model: &Model,
    momentum: &MomentumEncoder,
    examples: &[Example],
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let r = example_forward(model, momentum, ex, lambda, None, false)?;
        total += r.main_sum + lambda * r.aux;
    }
    Ok(total)
}

/// Analytic gradients of [`batch_loss_value`], accumulated into the model's
/// grad buffers (zeroed first).
pub fn batch_loss_grads(
    model: &mut Model,
    momentum: &MomentumEncoder,
    examples: &[Example],
    lambda: f64,
) -> Result<f64> {
    model.zero_grads();
    let mut total = 0.0;
    let results: Vec<Result<ExampleLoss>> = par::map_slice(examples, |ex| {
        example_forward(model, momentum, ex, lambda, None, true)
    });
    let mut maps = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        total += r.main_sum + lambda * r.aux;
        maps.push(r.grads.expect("grads requested"));
    }
    fold_grads(model, &maps);
    Ok(total)
}

/// Accumulate per-example gradient maps into the model in example order.
fn fold_grads(model: &mut Model, maps: &[HashMap<String, Vec<f64>>]) {
    model.visit_mut(&mut |name, p| {
        for m in maps {
            if let Some(g) = m.get(name) {
                for (acc, d) in p.grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
    });
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay. State is keyed by
/// parameter name in a sorted map so checkpoints serialize stably.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update from the accumulated gradients.
    pub fn step(&mut self, params: &mut dyn ParamGroup) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let state = &mut self.state;
        params.visit_mut(&mut |name, p| {
            let mom = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            });
            for i in 0..p.numel() {
                let g = p.grad[i];
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                p.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.value[i]);
            }
        });
    }
}

/// Scale gradients so their global norm does not exceed `clip`.
pub fn clip_gradients(params: &mut dyn ParamGroup, clip: f64) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, p| {
        for g in &p.grad {
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        params.visit_mut(&mut |_, p| {
            for g in p.grad.iter_mut() {
                *g *= s;
            }
        });
    }
    norm
}

// ── Training loop ────────────────────────────────────────────────────

/// Loss values of one optimizer step. `total = main + lambda * aux` holds
/// exactly on the reported sums.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub main: f64,
    pub aux: f64,
    pub total: f64,
    pub per_token: f64,
    pub grad_norm: f64,
    pub sampling_p: f64,
}

pub struct Trainer {
    pub model: Model,
    pub momentum: MomentumEncoder,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = MomentumEncoder::from_online(&model);
        let opt = AdamW::new(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7A31));
        Ok(Trainer {
            model,
            momentum,
            opt,
            cfg,
            step: 0,
            rng,
        })
    }

    /// Stage-0 argmax predictions per position, used as replacement tokens.
    fn d0_predictions(&self, ex: &Example) -> Result<Vec<Vec<usize>>> {
        let (masked, targets) = mask_explanation(ex);
        let mut tape = Tape::new();
        let mut bind = ParamBind::frozen();
        let enc = encode(
            &mut tape,
            &mut bind,
            &self.model.encoder,
            &self.model.cfg,
            &masked,
        )?;
        let mut cfg0 = self.model.cfg.clone();
        cfg0.k = 0;
        let stages = cascade_teacher_forced(
            &mut tape,
            &mut bind,
            &self.model.decoder,
            &cfg0,
            enc.events,
            &targets,
            None,
        )?;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(ev, words)| {
                (0..words.len())
                    .map(|pos| tape.argmax_row(stages[0].logits[ev], pos))
                    .collect()
            })
            .collect())
    }

    /// Scheduled-sampling inputs: ground truth with decided positions
    /// replaced by the model's own previous-step greedy predictions.
    fn sampled_inputs(&mut self, ex: &Example, p: f64) -> Result<Option<Vec<Vec<usize>>>> {
        let targets = ex.target_words();
        let lens: Vec<usize> = targets.iter().map(|t| t.len()).collect();
        let decisions = sampling_decisions(&mut self.rng, p, &lens);
        if decisions.iter().all(|d| d.iter().all(|x| !x)) {
            return Ok(None);
        }
        let preds = self.d0_predictions(ex)?;
        let mut inputs = targets;
        for (ev, dec) in decisions.iter().enumerate() {
            for (j, &replace) in dec.iter().enumerate() {
                if replace {
                    // prediction for word j comes from text row j
                    inputs[ev][j] = preds[ev][j].min(self.model.cfg.vocab_size - 1);
                }
            }
        }
        Ok(Some(inputs))
    }

    /// One optimizer step over a batch: forward and backward per example
    /// (fanned out over the pool), ordered gradient fold, clip, update,
    /// momentum refresh.
    pub fn train_step(&mut self, batch: &[Example], total_steps: usize) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let lambda = self.cfg.aux_weight;
        let p = sampling_probability(self.step, total_steps, &self.cfg);

        // decisions draw from the run RNG sequentially, before the parallel
        // fan-out, so scheduling cannot perturb the stream
        let mut d0_inputs: Vec<Option<Vec<Vec<usize>>>> = Vec::with_capacity(batch.len());
        for ex in batch {
            d0_inputs.push(if p > 0.0 {
                self.sampled_inputs(ex, p)?
            } else {
                None
            });
        }

        let model = &self.model;
        let momentum = &self.momentum;
        let items: Vec<(usize, &Example)> = batch.iter().enumerate().collect();
        let results: Vec<Result<ExampleLoss>> = par::map_slice(&items, |(i, ex)| {
            example_forward(model, momentum, ex, lambda, d0_inputs[*i].as_deref(), true)
        });

        let mut main = 0.0;
        let mut aux = 0.0;
        let mut tokens = 0usize;
        let mut maps = Vec::with_capacity(results.len());
        for r in results {
            let r = r.map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    step: self.step,
                    detail,
                },
                other => other,
            })?;
            main += r.main_sum;
            aux += r.aux;
            tokens += r.token_count;
            maps.push(r.grads.expect("grads requested"));
        }
        self.model.zero_grads();
        fold_grads(&mut self.model, &maps);
        // mean over the batch
        let inv = 1.0 / batch.len() as f64;
        self.model.visit_mut(&mut |_, p| {
            for g in p.grad.iter_mut() {
                *g *= inv;
            }
        });
        let grad_norm = clip_gradients(&mut self.model, self.cfg.grad_clip);
        self.opt.step(&mut self.model);
        momentum_update(&self.model, &mut self.momentum, self.cfg.momentum)?;

        let total = main + lambda * aux;
        if !total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite loss {total}"),
            });
        }
        let report = StepReport {
            step: self.step,
            main,
            aux,
            total,
            per_token: main / tokens as f64,
            grad_norm,
            sampling_p: p,
        };
        self.step += 1;
        Ok(report)
    }

    /// Run `steps` optimizer steps over cyclic deterministic batches.
    pub fn train(
        &mut self,
        data: &[Example],
        steps: usize,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let bs = self.cfg.batch_size.min(data.len());
        let mut reports = Vec::with_capacity(steps);
        let total = self.step + steps;
        for _ in 0..steps {
            let start = (self.step * bs) % data.len();
            let batch: Vec<Example> = (0..bs)
                .map(|i| data[(start + i) % data.len()].clone())
                .collect();
            let rep = self.train_step(&batch, total)?;
            on_step(&rep);
            reports.push(rep);
        }
        Ok(reports)
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    step: usize,
    train_cfg: TrainConfig,
    model: Model,
    momentum: MomentumEncoder,
    opt: AdamW,
}

/// Portable JSON checkpoint; values survive a round trip exactly.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        step: trainer.step,
        train_cfg: trainer.cfg.clone(),
        model: trainer.model.clone(),
        momentum: trainer.momentum.clone(),
        opt: trainer.opt.clone(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let r = BufReader::new(File::open(path)?);
    let ck: Checkpoint = serde_json::from_reader(r)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: ck.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut model = ck.model;
    model.ensure_grads();
    let mut momentum = ck.momentum;
    momentum.visit_mut(&mut |_, p| p.ensure_grad());
    let rng = ChaCha8Rng::seed_from_u64(derive_seed(ck.train_cfg.seed, ck.step as u64));
    Ok(Trainer {
        model,
        momentum,
        opt: ck.opt,
        cfg: ck.train_cfg,
        step: ck.step,
        rng,
    })
}
