//! Synthetic abductive-sequence benchmark with planted cause-effect
//! structure, plus the line-delimited dataset format.
//!
//! A grammar holds a set of core archetypes arranged in one causal cycle
//! (each archetype has a unique successor) and a pool of unrelated
//! distractor archetypes. An example is a chain walk: position `p` carries
//! either the `i`-th chain archetype (where `i` counts non-distractor
//! positions before `p`) or a distractor. Distractor placement and identity
//! are deterministic functions of the subject and position, so every
//! event's sentence is a function of the latent chain and a rule-based
//! reader can always reconstruct a masked sentence from the premise
//! events alone. Feature noise is the only stochastic part the model sees.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Vocabulary, EOS};
use crate::encoder::MaskedEventSequence;
use crate::error::{Error, Result};
use crate::par;

pub const DATASET_FORMAT: &str = "event-captions";
pub const DATASET_VERSION: u32 = 1;

// ── Grammar ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_examples: usize,
    /// Events per example, drawn uniformly from `[n_min, n_max]`.
    pub n_min: usize,
    pub n_max: usize,
    pub d_raw: usize,
    /// Gaussian noise scale on event features.
    pub noise: f64,
    /// Expected fraction of distractor positions.
    pub distractor_rate: f64,
    pub n_core: usize,
    pub n_distractors: usize,
    pub n_subjects: usize,
    /// Total vocabulary size target; padded with unused filler words.
    pub vocab_size: usize,
    pub seed: u64,
    /// Split fractions for train/val/test; must sum to 1.
    pub split: [f64; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_examples: 512,
            n_min: 3,
            n_max: 6,
            d_raw: 16,
            noise: 0.35,
            distractor_rate: 0.2,
            n_core: 6,
            n_distractors: 3,
            n_subjects: 10,
            vocab_size: 200,
            seed: 0,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(Error::config("need 2 <= n_min <= n_max"));
        }
        if self.n_core < 2 {
            return Err(Error::config("need at least 2 core archetypes"));
        }
        if self.n_subjects < 1 || self.d_raw < 1 {
            return Err(Error::config("need subjects and a feature width"));
        }
        if !(0.0..=0.9).contains(&self.distractor_rate) {
            return Err(Error::config("distractor_rate must lie in [0, 0.9]"));
        }
        let s: f64 = self.split.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return Err(Error::config("split fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TemplateTok {
    Word(usize),
    Subject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    /// Noise-free feature signature, length `d_raw`.
    pub base: Vec<f64>,
    pub template: Vec<TemplateTok>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalGrammar {
    pub d_raw: usize,
    pub noise: f64,
    pub distractor_rate: f64,
    pub seed: u64,
    pub core: Vec<Archetype>,
    /// Successor core index per core index; a single cycle covering all.
    pub successor: Vec<usize>,
    pub distractors: Vec<Archetype>,
    /// Token id of each subject word.
    pub subject_words: Vec<usize>,
    /// Per-subject feature offset, length `d_raw`.
    pub subject_offsets: Vec<Vec<f64>>,
    pub vocab: Vocabulary,
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// FNV-1a over a word list; stable across platforms and releases.
fn stable_hash(vals: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in vals {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Derive an independent stream for item `idx` (splitmix-style).
pub fn derive_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl CausalGrammar {
    pub fn build(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA11CE));

        // vocabulary: subjects, per-archetype marker words, shared fillers,
        // then padding up to the configured size
        let mut words: Vec<String> = Vec::new();
        let mut subject_words = Vec::new();
        for i in 0..cfg.n_subjects {
            subject_words.push(3 + words.len());
            words.push(format!("agent{i}"));
        }
        let mut core_marks = Vec::new();
        for i in 0..cfg.n_core {
            core_marks.push((3 + words.len(), 3 + words.len() + 1));
            words.push(format!("act{i}"));
            words.push(format!("obj{i}"));
        }
        let mut dis_marks = Vec::new();
        for i in 0..cfg.n_distractors {
            dis_marks.push((3 + words.len(), 3 + words.len() + 1));
            words.push(format!("side{i}"));
            words.push(format!("item{i}"));
        }
        let n_fillers = 24usize;
        let filler_base = 3 + words.len();
        for i in 0..n_fillers {
            words.push(format!("then{i}"));
        }
        while words.len() + 3 < cfg.vocab_size {
            words.push(format!("spare{}", words.len()));
        }
        let vocab = Vocabulary::new(words)?;

        let mut template = |mark: (usize, usize), rng: &mut ChaCha8Rng| -> Vec<TemplateTok> {
            // subject + marker pair + 2..=9 fillers keeps lengths in 5..=12
            let extra = rng.gen_range(2..=9usize);
            let mut t = vec![
                TemplateTok::Subject,
                TemplateTok::Word(mark.0),
                TemplateTok::Word(mark.1),
            ];
            for _ in 0..extra {
                t.push(TemplateTok::Word(filler_base + rng.gen_range(0..n_fillers)));
            }
            t
        };

        let mut base = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..cfg.d_raw).map(|_| randn(rng)).collect()
        };

        let core: Vec<Archetype> = (0..cfg.n_core)
            .map(|i| Archetype {
                name: format!("core{i}"),
                base: base(&mut rng),
                template: template(core_marks[i], &mut rng),
            })
            .collect();
        let distractors: Vec<Archetype> = (0..cfg.n_distractors)
            .map(|i| Archetype {
                name: format!("distractor{i}"),
                base: base(&mut rng),
                template: template(dis_marks[i], &mut rng),
            })
            .collect();

        // one full causal cycle over the core archetypes
        let mut order: Vec<usize> = (0..cfg.n_core).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut successor = vec![0usize; cfg.n_core];
        for i in 0..cfg.n_core {
            successor[order[i]] = order[(i + 1) % cfg.n_core];
        }

        let subject_offsets: Vec<Vec<f64>> = (0..cfg.n_subjects)
            .map(|_| (0..cfg.d_raw).map(|_| 0.6 * randn(&mut rng)).collect())
            .collect();

        let g = CausalGrammar {
            d_raw: cfg.d_raw,
            noise: cfg.noise,
            distractor_rate: cfg.distractor_rate,
            seed: cfg.seed,
            core,
            successor,
            distractors,
            subject_words,
            subject_offsets,
            vocab,
        };
        g.validate()?;
        Ok(g)
    }

    /// Every archetype reachable: the successor map is one full cycle.
    pub fn validate(&self) -> Result<()> {
        let n = self.core.len();
        if self.successor.len() != n {
            return Err(Error::config("successor map size mismatch"));
        }
        let mut seen = vec![false; n];
        let mut cur = 0usize;
        for _ in 0..n {
            if seen[cur] {
                return Err(Error::config("successor map is not a single cycle"));
            }
            seen[cur] = true;
            cur = self.successor[cur];
        }
        if cur != 0 || seen.iter().any(|s| !s) {
            return Err(Error::config("successor map is not a single cycle"));
        }
        Ok(())
    }

    /// Chain archetype after `steps` transitions from `start`.
    pub fn advance(&self, start: usize, steps: usize) -> usize {
        let mut cur = start;
        for _ in 0..steps {
            cur = self.successor[cur];
        }
        cur
    }

    /// Deterministic event-kind layout for a subject over `n` positions:
    /// distractors fall where a position hash lands under the rate, with a
    /// repair pass guaranteeing at least two chain positions.
    pub fn kind_layout(&self, subject: usize, n: usize) -> Vec<bool> {
        // true = distractor
        let thresh = (self.distractor_rate * 10_000.0) as u64;
        let mut kinds: Vec<bool> = (0..n)
            .map(|p| {
                !self.distractors.is_empty()
                    && stable_hash(&[self.seed, subject as u64, p as u64, 0xD15]) % 10_000 < thresh
            })
            .collect();
        let mut chain_count = kinds.iter().filter(|k| !**k).count();
        while chain_count < 2.min(n) {
            // flip the distractor position with the smallest tie-broken hash
            let flip = (0..n)
                .filter(|p| kinds[*p])
                .min_by_key(|p| (stable_hash(&[self.seed, subject as u64, *p as u64, 0xF11]), *p))
                .expect("at least one distractor when chain_count < n");
            kinds[flip] = false;
            chain_count += 1;
        }
        kinds
    }

    /// Distractor archetype planted at `(subject, position)`.
    pub fn distractor_at(&self, subject: usize, position: usize) -> usize {
        (stable_hash(&[self.seed, subject as u64, position as u64, 0xD2])
            % self.distractors.len() as u64) as usize
    }

    /// Archetype of every position given the latent chain.
    pub fn archetypes_for(&self, subject: usize, start: usize, n: usize) -> Vec<EventKind> {
        let kinds = self.kind_layout(subject, n);
        let mut chain_idx = 0usize;
        kinds
            .iter()
            .enumerate()
            .map(|(p, &is_distractor)| {
                if is_distractor {
                    EventKind::Distractor(self.distractor_at(subject, p))
                } else {
                    let a = self.advance(start, chain_idx);
                    chain_idx += 1;
                    EventKind::Chain(a)
                }
            })
            .collect()
    }

    fn archetype(&self, kind: &EventKind) -> &Archetype {
        match kind {
            EventKind::Chain(i) => &self.core[*i],
            EventKind::Distractor(i) => &self.distractors[*i],
        }
    }

    /// Render a template with the subject filled in, terminator appended.
    pub fn sentence(&self, kind: &EventKind, subject: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .archetype(kind)
            .template
            .iter()
            .map(|t| match t {
                TemplateTok::Word(w) => *w,
                TemplateTok::Subject => self.subject_words[subject],
            })
            .collect();
        s.push(EOS);
        s
    }
}

// ── Examples ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Chain(usize),
    Distractor(usize),
}

/// Latent chain behind an example; for verification only, never model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub subject: usize,
    pub start: usize,
    pub kinds: Vec<EventKind>,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// `n x d_raw` event features.
    pub features: Vec<Vec<f64>>,
    /// Ground-truth sentences, each terminated.
    pub sentences: Vec<Vec<usize>>,
    /// Zero-based explanation index.
    pub h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainState>,
}

impl Example {
    pub fn n(&self) -> usize {
        self.features.len()
    }

    /// Ground-truth words per event with the terminator stripped, the form
    /// the decoder consumes.
    pub fn target_words(&self) -> Vec<Vec<usize>> {
        self.sentences
            .iter()
            .map(|s| {
                let mut w = s.clone();
                if w.last() == Some(&EOS) {
                    w.pop();
                }
                w
            })
            .collect()
    }
}

/// Sample one example: a chain walk with planted distractors, noisy
/// features, and a uniformly chosen explanation slot.
pub fn generate_example(
    grammar: &CausalGrammar,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Example> {
    if n < 2 {
        return Err(Error::Generation(format!(
            "cannot build a chain of length {n}"
        )));
    }
    let subject = rng.gen_range(0..grammar.subject_offsets.len());
    let start = rng.gen_range(0..grammar.core.len());
    let kinds = grammar.archetypes_for(subject, start, n);

    let mut features = Vec::with_capacity(n);
    let mut sentences = Vec::with_capacity(n);
    for kind in &kinds {
        let arch = grammar.archetype(kind);
        let row: Vec<f64> = arch
            .base
            .iter()
            .zip(&grammar.subject_offsets[subject])
            .map(|(b, o)| b + o + grammar.noise * randn(rng))
            .collect();
        features.push(row);
        sentences.push(grammar.sentence(kind, subject));
    }
    let h = rng.gen_range(0..n);
    Ok(Example {
        features,
        sentences,
        h,
        chain: Some(ChainState {
            subject,
            start,
            kinds,
        }),
    })
}

/// Zero the explanation features and hand back decode targets.
pub fn mask_explanation(ex: &Example) -> (MaskedEventSequence, Vec<Vec<usize>>) {
    let mut features = ex.features.clone();
    features[ex.h] = vec![0.0; features[ex.h].len()];
    (
        MaskedEventSequence { features, h: ex.h },
        ex.target_words(),
    )
}

// ── Rule-based premise reader ────────────────────────────────────────

/// Reconstruct the masked sentence from premise sentences alone. Reads the
/// subject and the chain positions from the premises, rewinds the cycle to
/// the chain start, and rebuilds the masked slot's archetype. Succeeding on
/// every example is the proof that the task is solvable from the premises.
pub fn premise_oracle(grammar: &CausalGrammar, ex: &Example) -> Result<Vec<usize>> {
    let n = ex.n();
    // subject: any premise sentence carries the subject word
    let mut subject = None;
    'outer: for (p, s) in ex.sentences.iter().enumerate() {
        if p == ex.h {
            continue;
        }
        for w in s {
            if let Some(si) = grammar.subject_words.iter().position(|sw| sw == w) {
                subject = Some(si);
                break 'outer;
            }
        }
    }
    let subject = subject.ok_or_else(|| Error::Generation("no subject word in premises".into()))?;

    let kinds = grammar.kind_layout(subject, n);
    let chain_index_of = |p: usize| kinds[..p].iter().filter(|k| !**k).count();

    if kinds[ex.h] {
        let d = grammar.distractor_at(subject, ex.h);
        return Ok(grammar.sentence(&EventKind::Distractor(d), subject));
    }

    // identify one premise chain archetype by its unique marker word
    let mut anchor: Option<(usize, usize)> = None; // (position, core idx)
    for (p, s) in ex.sentences.iter().enumerate() {
        if p == ex.h || kinds[p] {
            continue;
        }
        for (ci, arch) in grammar.core.iter().enumerate() {
            let mark = arch.template.iter().find_map(|t| match t {
                TemplateTok::Word(w) => Some(*w),
                TemplateTok::Subject => None,
            });
            if let Some(mark) = mark {
                if s.contains(&mark) {
                    anchor = Some((p, ci));
                    break;
                }
            }
        }
        if anchor.is_some() {
            break;
        }
    }
    let (anchor_p, anchor_arch) =
        anchor.ok_or_else(|| Error::Generation("no chain premise to anchor on".into()))?;

    // rewind the anchor to the start, then advance to the masked slot
    let anchor_ci = chain_index_of(anchor_p);
    let cycle = grammar.core.len();
    let mut start = anchor_arch;
    for _ in 0..anchor_ci {
        // walk the cycle backwards
        start = (0..cycle)
            .find(|&i| grammar.successor[i] == start)
            .expect("validated single cycle");
    }
    let masked_arch = grammar.advance(start, chain_index_of(ex.h));
    Ok(grammar.sentence(&EventKind::Chain(masked_arch), subject))
}

// ── Dataset generation with splits ───────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    /// Histogram keyed by event count.
    pub event_counts: Vec<(usize, usize)>,
    /// Histogram keyed by sentence length (terminator included).
    pub sentence_lengths: Vec<(usize, usize)>,
    pub distractor_events: usize,
    pub total_events: usize,
}

pub fn dataset_stats(examples: &[Example]) -> DatasetStats {
    use std::collections::BTreeMap;
    let mut ec: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sl: BTreeMap<usize, usize> = BTreeMap::new();
    let mut distractors = 0usize;
    let mut total = 0usize;
    for ex in examples {
        *ec.entry(ex.n()).or_default() += 1;
        for s in &ex.sentences {
            *sl.entry(s.len()).or_default() += 1;
        }
        total += ex.n();
        if let Some(chain) = &ex.chain {
            distractors += chain
                .kinds
                .iter()
                .filter(|k| matches!(k, EventKind::Distractor(_)))
                .count();
        }
    }
    DatasetStats {
        examples: examples.len(),
        event_counts: ec.into_iter().collect(),
        sentence_lengths: sl.into_iter().collect(),
        distractor_events: distractors,
        total_events: total,
    }
}

/// Split-assignment signature: examples sharing a latent chain always land
/// in the same split.
fn chain_signature(grammar: &CausalGrammar, chain: &ChainState, n: usize) -> u64 {
    stable_hash(&[
        grammar.seed,
        chain.subject as u64,
        chain.start as u64,
        n as u64,
        0x5161,
    ])
}

/// Generate the three splits. Example `i` draws from its own derived RNG
/// stream, so generation is order-independent and reproducible.
pub fn generate_splits(cfg: &GenConfig) -> Result<(CausalGrammar, [Vec<Example>; 3])> {
    let grammar = CausalGrammar::build(cfg)?;
    let results = par::map_indexed(cfg.n_examples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + i as u64));
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        generate_example(&grammar, &mut rng, n)
    });
    let mut splits: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let t_train = (cfg.split[0] * 10_000.0) as u64;
    let t_val = ((cfg.split[0] + cfg.split[1]) * 10_000.0) as u64;
    for res in results {
        let ex = res?;
        let chain = ex.chain.as_ref().expect("generator always records chains");
        let r = chain_signature(&grammar, chain, ex.n()) % 10_000;
        let slot = if r < t_train {
            0
        } else if r < t_val {
            1
        } else {
            2
        };
        splits[slot].push(ex);
    }
    Ok((grammar, splits))
}

// ── Dataset files ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d_raw: usize,
    vocab: Vec<String>,
}

/// Write a line-delimited dataset: a JSON header line, then one JSON
/// example per line.
pub fn write_dataset(path: &Path, vocab: &Vocabulary, examples: &[Example]) -> Result<()> {
    let d_raw = examples
        .first()
        .map(|e| e.features[0].len())
        .unwrap_or(0);
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        d_raw,
        vocab: vocab.tokens.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset file. Malformed lines fail with their line number;
/// an unknown version fails before any example is parsed.
pub fn read_dataset(path: &Path) -> Result<(Vocabulary, Vec<Example>)> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            msg: "empty file, expected a header line".into(),
        })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != DATASET_VERSION {
        return Err(Error::FormatVersion {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let vocab = Vocabulary {
        tokens: header.vocab,
    };
    vocab.validate()?;
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        if ex.n() == 0 || ex.h >= ex.n() || ex.sentences.len() != ex.n() {
            return Err(Error::Parse {
                line: i + 2,
                msg: "inconsistent example: event, sentence and index counts disagree".into(),
            });
        }
        if ex.features.iter().any(|f| f.len() != header.d_raw) {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("feature width differs from header d_raw {}", header.d_raw),
            });
        }
        examples.push(ex);
    }
    Ok((vocab, examples))
}
