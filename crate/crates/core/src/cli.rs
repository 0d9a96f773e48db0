//! Operator commands: dataset generation, training, evaluation, sentence
//! generation, gradient checking and the ablation matrix. The binary is a
//! thin argument parser over these functions so integration tests can call
//! them directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PositionMode, TrainConfig};
use crate::decoder::{cascade_decode, targets_of, Vocabulary, EOS};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::metrics::{score_report, MetricReport, Role, ScoredCorpus, ScoredItem};
use crate::model::Model;
use crate::par;
use crate::params::{ParamBind, ParamGroup};
use crate::synth::{
    dataset_stats, derive_seed, generate_splits, read_dataset, write_dataset, Example, GenConfig,
};
use crate::tensor::{grad_check, Tape};
use crate::training::{
    batch_loss_grads, batch_loss_value, load_checkpoint, save_checkpoint, StepReport, Trainer,
};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::FormatVersion { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

/// Everything a run needs; parseable from a TOML file, overridable from
/// the command line, and written back beside each run's outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()
    }
}

fn write_resolved_config(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("serializing resolved config: {e}")))?;
    fs::write(out_dir.join("config.resolved.toml"), text)?;
    Ok(())
}

// ── gen-data ─────────────────────────────────────────────────────────

/// Write train/val/test splits plus a statistics report.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<[PathBuf; 3]> {
    cfg.gen.validate()?;
    fs::create_dir_all(out_dir)?;
    let (grammar, splits) = generate_splits(&cfg.gen)?;
    let names = ["train.jsonl", "val.jsonl", "test.jsonl"];
    let mut paths = Vec::new();
    for (name, split) in names.iter().zip(&splits) {
        let p = out_dir.join(name);
        write_dataset(&p, &grammar.vocab, split)?;
        paths.push(p);
    }
    let stats: Vec<_> = splits.iter().map(|s| dataset_stats(s)).collect();
    let stats_json = serde_json::to_string_pretty(&stats)?;
    fs::write(out_dir.join("stats.json"), stats_json)?;
    write_resolved_config(out_dir, cfg)?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        splits[0].len(),
        splits[1].len(),
        splits[2].len(),
        out_dir.display()
    );
    Ok([paths.remove(0), paths.remove(0), paths.remove(0)])
}

// ── train ────────────────────────────────────────────────────────────

/// Fit model hyperparameters that must agree with the dataset.
fn align_model_cfg(mut model: ModelConfig, vocab: &Vocabulary, examples: &[Example]) -> Result<ModelConfig> {
    model.vocab_size = vocab.len();
    if let Some(ex) = examples.first() {
        model.d_raw = ex.features[0].len();
        let max_n = examples.iter().map(|e| e.n()).max().unwrap_or(2);
        if model.n_max < max_n {
            model.n_max = max_n;
        }
        let max_words = examples
            .iter()
            .flat_map(|e| e.target_words())
            .map(|w| w.len())
            .max()
            .unwrap_or(0);
        if model.l_max < max_words {
            return Err(Error::config(format!(
                "dataset sentences reach {max_words} words but l_max is {}",
                model.l_max
            )));
        }
    }
    model.validate()?;
    Ok(model)
}

/// Train on a dataset file; writes a checkpoint, a loss log and the
/// resolved config into `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Vec<StepReport>> {
    cfg.train.validate()?;
    fs::create_dir_all(out_dir)?;
    let (vocab, examples) = read_dataset(data_path)?;
    if examples.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut trainer = match resume {
        Some(ck) => load_checkpoint(ck)?,
        None => {
            let model_cfg = align_model_cfg(cfg.model.clone(), &vocab, &examples)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0x140D31));
            let model = Model::new(model_cfg, &mut rng)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };

    let mut log = String::new();
    let log_every = cfg.train.log_every.max(1);
    let reports = trainer.train(&examples, cfg.train.steps, |r| {
        log.push_str(&serde_json::to_string(r).expect("report serializes"));
        log.push('\n');
        if r.step % log_every == 0 {
            println!(
                "step {:>6}  total {:>12.4}  main {:>12.4}  aux {:>8.4}  per-token {:>7.4}",
                r.step, r.total, r.main, r.aux, r.per_token
            );
        }
    })?;
    fs::write(out_dir.join("loss_log.jsonl"), log)?;
    save_checkpoint(&out_dir.join("checkpoint.json"), &trainer)?;
    write_resolved_config(out_dir, cfg)?;
    Ok(reports)
}

// ── eval / generate ──────────────────────────────────────────────────

/// Model outputs scored against the ground truth.
pub struct EvalOutcome {
    pub report: MetricReport,
    pub corpus: ScoredCorpus,
    /// Exact-token accuracy over every event.
    pub token_accuracy: f64,
    /// Exact-token accuracy over explanation events only.
    pub explanation_token_accuracy: f64,
}

fn exact_token_accuracy(generated: &[usize], gt_words: &[usize]) -> (usize, usize) {
    let target = targets_of(gt_words);
    let mut gen = generated.to_vec();
    gen.push(EOS);
    let hits = target
        .iter()
        .enumerate()
        .filter(|(i, t)| gen.get(*i) == Some(t))
        .count();
    (hits, target.len())
}

/// Encode and greedily decode every example, then score the final stage.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[Example],
) -> Result<EvalOutcome> {
    if examples.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    if vocab.len() != model.cfg.vocab_size {
        return Err(Error::config(format!(
            "dataset vocabulary ({}) does not match the model ({})",
            vocab.len(),
            model.cfg.vocab_size
        )));
    }
    struct PerExample {
        items: Vec<ScoredItem>,
        hits: usize,
        total: usize,
        expl_hits: usize,
        expl_total: usize,
    }
    let results: Vec<Result<PerExample>> = par::map_indexed(examples.len(), |i| {
        let ex = &examples[i];
        let (masked, gt_words) = crate::synth::mask_explanation(ex);
        let mut tape = Tape::new();
        let mut bind = ParamBind::frozen();
        let enc = encode(&mut tape, &mut bind, &model.encoder, &model.cfg, &masked)?;
        let d = model.cfg.d;
        let rows: Vec<Vec<f64>> = (0..ex.n())
            .map(|r| tape.data(enc.events)[r * d..(r + 1) * d].to_vec())
            .collect();
        let stages = cascade_decode(&model.decoder, &model.cfg, &rows, model.cfg.k)?;
        let last = stages.last().expect("at least one stage");
        let mut out = PerExample {
            items: Vec::with_capacity(ex.n()),
            hits: 0,
            total: 0,
            expl_hits: 0,
            expl_total: 0,
        };
        for ev in 0..ex.n() {
            let role = if ev == ex.h {
                Role::Explanation
            } else {
                Role::Premise
            };
            out.items.push(ScoredItem {
                id: format!("ex{i}_ev{ev}"),
                candidate: vocab.render(&last.sentences[ev]),
                references: vec![vocab.render(&gt_words[ev])],
                role,
            });
            let (h, t) = exact_token_accuracy(&last.sentences[ev], &gt_words[ev]);
            out.hits += h;
            out.total += t;
            if ev == ex.h {
                out.expl_hits += h;
                out.expl_total += t;
            }
        }
        Ok(out)
    });

    let mut corpus = ScoredCorpus::default();
    let (mut hits, mut total, mut eh, mut et) = (0usize, 0usize, 0usize, 0usize);
    for r in results {
        let r = r?;
        corpus.items.extend(r.items);
        hits += r.hits;
        total += r.total;
        eh += r.expl_hits;
        et += r.expl_total;
    }
    let report = score_report(&corpus)?;
    Ok(EvalOutcome {
        report,
        corpus,
        token_accuracy: hits as f64 / total as f64,
        explanation_token_accuracy: eh as f64 / et.max(1) as f64,
    })
}

/// Score a checkpoint against a dataset; `ground_truth` scores the
/// references against themselves instead (a scoring sanity check).
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    data_path: &Path,
    out_dir: Option<&Path>,
    ground_truth: bool,
) -> Result<MetricReport> {
    let (vocab, examples) = read_dataset(data_path)?;
    let report = if ground_truth {
        let mut corpus = ScoredCorpus::default();
        for (i, ex) in examples.iter().enumerate() {
            for (ev, words) in ex.target_words().iter().enumerate() {
                let s = vocab.render(words);
                corpus.items.push(ScoredItem {
                    id: format!("ex{i}_ev{ev}"),
                    candidate: s.clone(),
                    references: vec![s],
                    role: if ev == ex.h {
                        Role::Explanation
                    } else {
                        Role::Premise
                    },
                });
            }
        }
        score_report(&corpus)?
    } else {
        let ck = checkpoint.ok_or_else(|| Error::config("--checkpoint is required"))?;
        let trainer = load_checkpoint(ck)?;
        let outcome = evaluate_model(&trainer.model, &vocab, &examples)?;
        println!(
            "token accuracy: {:.4} overall, {:.4} on explanation events",
            outcome.token_accuracy, outcome.explanation_token_accuracy
        );
        outcome.report
    };
    print!("{}", report.table());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

/// Print generated sentences next to the ground truth.
pub fn cmd_generate(checkpoint: &Path, data_path: &Path, limit: usize) -> Result<()> {
    let trainer = load_checkpoint(checkpoint)?;
    let (vocab, examples) = read_dataset(data_path)?;
    let model = &trainer.model;
    for (i, ex) in examples.iter().take(limit).enumerate() {
        let (masked, gt) = crate::synth::mask_explanation(ex);
        let mut tape = Tape::new();
        let mut bind = ParamBind::frozen();
        let enc = encode(&mut tape, &mut bind, &model.encoder, &model.cfg, &masked)?;
        let d = model.cfg.d;
        let rows: Vec<Vec<f64>> = (0..ex.n())
            .map(|r| tape.data(enc.events)[r * d..(r + 1) * d].to_vec())
            .collect();
        let stages = cascade_decode(&model.decoder, &model.cfg, &rows, model.cfg.k)?;
        let last = stages.last().expect("at least one stage");
        println!("example {i} (explanation event {}):", ex.h);
        for ev in 0..ex.n() {
            let tag = if ev == ex.h { "explain" } else { "premise" };
            println!("  [{tag}] gt : {}", vocab.render(&gt[ev]));
            println!("  [{tag}] gen: {}  (conf {:.3})", vocab.render(&last.sentences[ev]), last.raw_conf[ev]);
        }
    }
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub d: usize,
    pub heads: usize,
    pub n_events: usize,
    pub vocab_size: usize,
    pub k: usize,
    pub eps: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Corrupt this parameter's analytic gradient to prove the check can
    /// fail (negative control).
    pub break_param: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            d: 16,
            heads: 4,
            n_events: 3,
            vocab_size: 20,
            k: 2,
            eps: 1e-5,
            samples_per_tensor: 6,
            seed: 0,
            break_param: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords_checked: usize,
    pub pass: bool,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Check analytic gradients of the full training loss on a small random
/// instance against central finite differences, sampling a few coordinates
/// from every parameter tensor.
pub fn cmd_gradcheck(gc: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let cfg = ModelConfig {
        d: gc.d,
        heads: gc.heads,
        enc_blocks: 2,
        dec_blocks: 2,
        k: gc.k,
        buckets: 10,
        l_max: 8,
        n_max: gc.n_events.max(2) + 1,
        vocab_size: gc.vocab_size,
        d_raw: 8,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gc.seed, 0x6C));
    let mut model = Model::new(cfg.clone(), &mut rng)?;
    let momentum = crate::model::MomentumEncoder::from_online(&model);

    // random instances; sentences use only word ids
    let examples: Vec<Example> = (0..2)
        .map(|_| {
            let n = gc.n_events.max(2);
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..cfg.d_raw).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let sentences: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let l = rng.gen_range(3..=5);
                    let mut s: Vec<usize> =
                        (0..l).map(|_| rng.gen_range(3..cfg.vocab_size)).collect();
                    s.push(EOS);
                    s
                })
                .collect();
            Example {
                features,
                sentences,
                h: rng.gen_range(0..n),
                chain: None,
            }
        })
        .collect();

    let lambda = 0.2;
    batch_loss_grads(&mut model, &momentum, &examples, lambda)?;
    let mut analytic = model.flatten_grads();
    let theta = model.flatten();
    let segments = model.segments();

    if let Some(broken) = &gc.break_param {
        let seg = segments
            .iter()
            .find(|(name, _, _)| name == broken)
            .ok_or_else(|| Error::config(format!("no parameter named {broken}")))?;
        analytic[seg.1] += analytic[seg.1].abs() + 1.0;
    }

    // sampled coordinates, a fixed spread from every tensor
    let mut coords = Vec::new();
    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(gc.seed, 0xC0));
    for (_, off, len) in &segments {
        let take = gc.samples_per_tensor.min(*len);
        let mut picked: Vec<usize> = (0..take)
            .map(|_| off + crng.gen_range(0..*len))
            .collect();
        picked.sort_unstable();
        picked.dedup();
        coords.extend(picked);
    }

    let mut shadow = model.clone();
    let mom = momentum.clone();
    let exv = examples.clone();
    let mut f = move |flat: &[f64]| -> Result<f64> {
        shadow.unflatten(flat);
        batch_loss_value(&shadow, &mom, &exv, lambda)
    };
    let report = grad_check(&mut f, &theta, &analytic, gc.eps, &coords, &|i| {
        model.coord_name(i)
    })?;

    // per-tensor worst errors for the report
    let mut per_tensor: HashMap<String, f64> = HashMap::new();
    {
        let mut shadow2 = model.clone();
        let mom2 = momentum.clone();
        let exv2 = examples.clone();
        let mut f2 = move |flat: &[f64]| -> Result<f64> {
            shadow2.unflatten(flat);
            batch_loss_value(&shadow2, &mom2, &exv2, lambda)
        };
        for &c in &coords {
            let rep = grad_check(&mut f2, &theta, &analytic, gc.eps, &[c], &|i| {
                model.coord_name(i)
            })?;
            let name = segments
                .iter()
                .find(|(_, off, len)| c >= *off && c < off + len)
                .map(|(n, _, _)| n.clone())
                .unwrap_or_default();
            let e = per_tensor.entry(name).or_insert(0.0);
            if rep.max_rel_err > *e {
                *e = rep.max_rel_err;
            }
        }
    }
    let mut per_tensor: Vec<(String, f64)> = per_tensor.into_iter().collect();
    per_tensor.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

    Ok(GradcheckOutcome {
        pass: report.max_rel_err < 1e-4,
        max_rel_err: report.max_rel_err,
        worst: report.worst,
        coords_checked: report.coords_checked,
        per_tensor,
    })
}

// ── ablate ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub pos_mode: PositionMode,
    pub k: usize,
    pub confidence_bias: bool,
    pub aux_loss: bool,
}

/// Distinct configurations covering the component / position / cascade /
/// bias / objective comparisons. `k_full` is the full model's stage count.
pub fn ablation_matrix(k_full: usize, k_sweep_max: usize) -> Vec<AblationSpec> {
    let mut specs = vec![
        AblationSpec {
            name: "basic".into(),
            pos_mode: PositionMode::Absolute,
            k: 0,
            confidence_bias: true,
            aux_loss: true,
        },
        AblationSpec {
            name: "encoder-only".into(),
            pos_mode: PositionMode::ContextualDirectional,
            k: 0,
            confidence_bias: true,
            aux_loss: true,
        },
        AblationSpec {
            name: "decoder-only".into(),
            pos_mode: PositionMode::Absolute,
            k: k_full,
            confidence_bias: true,
            aux_loss: true,
        },
        AblationSpec {
            name: "full".into(),
            pos_mode: PositionMode::ContextualDirectional,
            k: k_full,
            confidence_bias: true,
            aux_loss: true,
        },
        AblationSpec {
            name: "directional".into(),
            pos_mode: PositionMode::Directional,
            k: k_full,
            confidence_bias: true,
            aux_loss: true,
        },
        AblationSpec {
            name: "no-confidence-bias".into(),
            pos_mode: PositionMode::ContextualDirectional,
            k: k_full,
            confidence_bias: false,
            aux_loss: true,
        },
        AblationSpec {
            name: "no-aux-loss".into(),
            pos_mode: PositionMode::ContextualDirectional,
            k: k_full,
            confidence_bias: true,
            aux_loss: false,
        },
    ];
    for k in 0..=k_sweep_max {
        specs.push(AblationSpec {
            name: format!("k{k}"),
            pos_mode: PositionMode::ContextualDirectional,
            k,
            confidence_bias: true,
            aux_loss: true,
        });
    }
    // dedup identical configurations, keeping the first name
    let mut seen: Vec<(PositionMode, usize, bool, bool)> = Vec::new();
    specs.retain(|s| {
        let key = (s.pos_mode, s.k, s.confidence_bias, s.aux_loss);
        if seen.contains(&key) {
            false
        } else {
            seen.push(key);
            true
        }
    });
    specs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub spec: AblationSpec,
    pub seeds: Vec<u64>,
    /// Explanation-role scores per seed.
    pub cider_explanation: Vec<f64>,
    pub bleu4_explanation: Vec<f64>,
    pub cider_median: f64,
    pub cider_std: f64,
    pub bleu4_median: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Train one configuration from scratch and score the held-out split.
pub fn run_one_ablation(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    spec: &AblationSpec,
    seed: u64,
    vocab: &Vocabulary,
    train_set: &[Example],
    eval_set: &[Example],
) -> Result<(f64, f64)> {
    let mut mc = base_model.clone();
    mc.pos_mode = spec.pos_mode;
    mc.k = spec.k;
    mc.confidence_bias = spec.confidence_bias;
    mc.aux_loss = spec.aux_loss;
    let mc = align_model_cfg(mc, vocab, train_set)?;
    let mut tc = base_train.clone();
    tc.seed = seed;
    if !spec.aux_loss {
        tc.aux_weight = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x140D31));
    let model = Model::new(mc, &mut rng)?;
    let mut trainer = Trainer::new(model, tc.clone())?;
    trainer.train(train_set, tc.steps, |_| {})?;
    let outcome = evaluate_model(&trainer.model, vocab, eval_set)?;
    let cid = outcome
        .report
        .get("cider", "explanation")
        .ok_or_else(|| Error::contract("no explanation-role score"))?;
    let bleu = outcome.report.get("bleu4", "explanation").unwrap_or(0.0);
    Ok((cid, bleu))
}

/// Run `specs x seeds` training jobs (fanned out over the pool) and fold
/// per-seed scores into medians.
pub fn run_ablation_matrix(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    specs: &[AblationSpec],
    seeds: &[u64],
    vocab: &Vocabulary,
    train_set: &[Example],
    eval_set: &[Example],
) -> Result<Vec<AblationCell>> {
    let jobs: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |s| (i, *s)))
        .collect();
    let results: Vec<Result<(f64, f64)>> = par::map_slice(&jobs, |(i, seed)| {
        run_one_ablation(
            base_model, base_train, &specs[*i], *seed, vocab, train_set, eval_set,
        )
    });
    let mut cells: Vec<AblationCell> = specs
        .iter()
        .map(|s| AblationCell {
            spec: s.clone(),
            seeds: seeds.to_vec(),
            cider_explanation: Vec::new(),
            bleu4_explanation: Vec::new(),
            cider_median: 0.0,
            cider_std: 0.0,
            bleu4_median: 0.0,
        })
        .collect();
    for ((i, _), res) in jobs.iter().zip(results) {
        let (cid, bleu) = res?;
        cells[*i].cider_explanation.push(cid);
        cells[*i].bleu4_explanation.push(bleu);
    }
    for c in &mut cells {
        c.cider_median = median(&c.cider_explanation);
        c.cider_std = std_dev(&c.cider_explanation);
        c.bleu4_median = median(&c.bleu4_explanation);
    }
    Ok(cells)
}

/// Full ablation command over a generated dataset directory.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    seeds: usize,
    k_sweep_max: usize,
) -> Result<Vec<AblationCell>> {
    if seeds < 1 {
        return Err(Error::config("need at least one seed"));
    }
    fs::create_dir_all(out_dir)?;
    let (vocab, train_set) = read_dataset(&data_dir.join("train.jsonl"))?;
    let (_, eval_set) = read_dataset(&data_dir.join("test.jsonl"))?;
    let specs = ablation_matrix(cfg.model.k, k_sweep_max);
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| derive_seed(cfg.train.seed, 100 + s)).collect();
    let cells = run_ablation_matrix(
        &cfg.model,
        &cfg.train,
        &specs,
        &seed_list,
        &vocab,
        &train_set,
        &eval_set,
    )?;
    println!(
        "{:<20} {:>3} {:>12} {:>10} {:>12}",
        "configuration", "k", "cider(med)", "(std)", "bleu4(med)"
    );
    for c in &cells {
        println!(
            "{:<20} {:>3} {:>12.4} {:>10.4} {:>12.4}",
            c.spec.name, c.spec.k, c.cider_median, c.cider_std, c.bleu4_median
        );
    }
    fs::write(
        out_dir.join("ablate.json"),
        serde_json::to_string_pretty(&cells)?,
    )?;
    write_resolved_config(out_dir, cfg)?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_matrix_covers_components_and_sweep_without_duplicates() {
        let specs = ablation_matrix(3, 5);
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        for required in [
            "basic",
            "encoder-only",
            "decoder-only",
            "full",
            "directional",
            "no-confidence-bias",
            "no-aux-loss",
        ] {
            assert!(names.contains(&required), "{required} missing");
        }
        // sweep entries k0/k3 collapse into existing configs
        assert!(names.contains(&"k1"));
        assert!(names.contains(&"k2"));
        assert!(names.contains(&"k4"));
        assert!(names.contains(&"k5"));
        assert!(!names.contains(&"k0"));
        assert!(!names.contains(&"k3"));
        let mut keys: Vec<_> = specs
            .iter()
            .map(|s| (s.pos_mode, s.k, s.confidence_bias, s.aux_loss))
            .collect();
        keys.sort_by_key(|k| (format!("{:?}", k.0), k.1, k.2, k.3));
        let before = keys.len();
        keys.dedup();
        assert_eq!(before, keys.len());
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((std_dev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(std_dev(&[5.0]), 0.0);
    }

    #[test]
    fn exact_token_accuracy_counts_terminator() {
        let (h, t) = exact_token_accuracy(&[4, 5], &[4, 5]);
        assert_eq!((h, t), (3, 3));
        let (h, t) = exact_token_accuracy(&[4, 6], &[4, 5]);
        assert_eq!((h, t), (2, 3));
        // missing terminator counts against the candidate
        let (h, t) = exact_token_accuracy(&[4, 5, 7], &[4, 5]);
        assert_eq!((h, t), (2, 3));
    }
}
