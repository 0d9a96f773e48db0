//! Corpus-level captioning metrics.
//!
//! All three metrics run on a fixed tokenization (lowercase, punctuation
//! stripped, whitespace split) because their values are tokenizer-dependent.
//! The exact formulas, frozen here and mirrored by the test oracles:
//!
//! * `bleu4`: corpus-level clipped n-gram precision for n = 1..4 with
//!   add-one smoothing on the numerator and denominator for n >= 2 (an
//!   unseen-order-n fallback; order 1 stays unsmoothed so disjoint corpora
//!   score zero), geometric mean, times the brevity penalty
//!   `min(1, exp(1 - r/c))` where `r` sums each item's closest reference
//!   length (ties to the shorter).
//! * `rouge_l`: per item the max over references of the LCS F-measure with
//!   beta = 1.2 (`F = (1+b^2)PR / (R + b^2 P)`), averaged over items.
//! * `cider`: TF-IDF n-gram cosine for n = 1..4 averaged over n and
//!   references, times 10. Document frequency counts reference sets;
//!   `idf(g) = ln((M+1) / max(1, df(g)))` with add-one corpus smoothing so
//!   a single-item corpus still carries weight. The default variant clips
//!   the candidate count at the reference count and applies a Gaussian
//!   length penalty `exp(-(lc-lr)^2 / (2*6^2))`; the plain variant is the
//!   raw cosine without clipping or penalty.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Premise,
    Explanation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
    pub role: Role,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoredCorpus {
    pub items: Vec<ScoredItem>,
}

impl ScoredCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::contract("empty corpus"));
        }
        let mut ids = HashSet::new();
        for it in &self.items {
            if it.references.is_empty() {
                return Err(Error::contract(format!(
                    "candidate {} has no reference",
                    it.id
                )));
            }
            if !ids.insert(&it.id) {
                return Err(Error::contract(format!("duplicate id {}", it.id)));
            }
        }
        Ok(())
    }

    fn filtered(&self, role: Option<Role>) -> Vec<&ScoredItem> {
        self.items
            .iter()
            .filter(|it| role.map(|r| it.role == r).unwrap_or(true))
            .collect()
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram, f64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

// ── BLEU ─────────────────────────────────────────────────────────────

/// Raw corpus counts: clipped matches and candidate totals per order, plus
/// candidate and effective reference lengths. Role reports reuse these, and
/// pooled counts are exactly the per-role sums.
pub fn bleu_counts(items: &[&ScoredItem]) -> ([f64; 4], [f64; 4], usize, usize) {
    let mut matches = [0.0; 4];
    let mut totals = [0.0; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for it in items {
        let cand = tokenize(&it.candidate);
        let refs: Vec<Vec<String>> = it.references.iter().map(|r| tokenize(r)).collect();
        cand_len += cand.len();
        // closest reference length, ties to the shorter
        let best = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let d = (l as isize - cand.len() as isize).abs();
                (d, l)
            })
            .unwrap_or(0);
        ref_len += best;
        for n in 1..=4 {
            let cc = ngram_counts(&cand, n);
            let mut max_ref: BTreeMap<Ngram, f64> = BTreeMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0.0);
                    if c > *e {
                        *e = c;
                    }
                }
            }
            for (g, c) in &cc {
                totals[n - 1] += c;
                if let Some(rc) = max_ref.get(g) {
                    matches[n - 1] += c.min(*rc);
                }
            }
        }
    }
    (matches, totals, cand_len, ref_len)
}

fn bleu_from_counts(matches: &[f64; 4], totals: &[f64; 4], c: usize, r: usize) -> f64 {
    if totals[0] == 0.0 || matches[0] == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if n == 0 {
            matches[0] / totals[0]
        } else {
            (matches[n] + 1.0) / (totals[n] + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

fn bleu4_role(corpus: &ScoredCorpus, role: Option<Role>) -> Result<f64> {
    corpus.validate()?;
    let items = corpus.filtered(role);
    if items.is_empty() {
        return Err(Error::contract("no items for requested role"));
    }
    let (m, t, c, r) = bleu_counts(&items);
    Ok(bleu_from_counts(&m, &t, c, r))
}

/// Corpus-level BLEU@4 in `[0, 1]`.
pub fn bleu4(corpus: &ScoredCorpus) -> Result<f64> {
    bleu4_role(corpus, None)
}

// ── ROUGE-L ──────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev = 0usize;
        for (j, bj) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ai == bj {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_item(it: &ScoredItem) -> f64 {
    let cand = tokenize(&it.candidate);
    let mut best = 0.0f64;
    for r in &it.references {
        let rt = tokenize(r);
        if cand.is_empty() || rt.is_empty() {
            continue;
        }
        let l = lcs_len(&cand, &rt) as f64;
        let p = l / cand.len() as f64;
        let rec = l / rt.len() as f64;
        let denom = rec + ROUGE_BETA * ROUGE_BETA * p;
        let f = if denom > 0.0 {
            (1.0 + ROUGE_BETA * ROUGE_BETA) * p * rec / denom
        } else {
            0.0
        };
        best = best.max(f);
    }
    best
}

fn rouge_l_role(corpus: &ScoredCorpus, role: Option<Role>) -> Result<f64> {
    corpus.validate()?;
    let items = corpus.filtered(role);
    if items.is_empty() {
        return Err(Error::contract("no items for requested role"));
    }
    Ok(items.iter().map(|it| rouge_item(it)).sum::<f64>() / items.len() as f64)
}

/// Longest-common-subsequence F-measure averaged over the corpus.
pub fn rouge_l(corpus: &ScoredCorpus) -> Result<f64> {
    rouge_l_role(corpus, None)
}

// ── CIDEr ────────────────────────────────────────────────────────────

const CIDER_SIGMA: f64 = 6.0;

/// Per-item scores. Document frequencies always come from the full corpus,
/// so a role subset's mean and the pooled mean combine exactly.
pub fn cider_item_scores(corpus: &ScoredCorpus, clipped_with_penalty: bool) -> Result<Vec<f64>> {
    corpus.validate()?;
    let m = corpus.items.len() as f64;
    // document frequency per order: number of items whose reference set
    // contains the n-gram
    let mut df: Vec<BTreeMap<Ngram, f64>> = vec![BTreeMap::new(); 4];
    for it in &corpus.items {
        for n in 1..=4 {
            let mut seen: std::collections::BTreeSet<Ngram> = std::collections::BTreeSet::new();
            for r in &it.references {
                for g in ngram_counts(&tokenize(r), n).into_keys() {
                    seen.insert(g);
                }
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, g: &Ngram| -> f64 {
        let d = df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
        ((m + 1.0) / d).ln()
    };

    let mut scores = Vec::with_capacity(corpus.items.len());
    for it in &corpus.items {
        let cand = tokenize(&it.candidate);
        let mut item_score = 0.0;
        for r in &it.references {
            let rt = tokenize(r);
            let mut sum_n = 0.0;
            for n in 1..=4 {
                let cv: BTreeMap<Ngram, f64> = ngram_counts(&cand, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = idf(n, &g);
                        (g, c * w)
                    })
                    .collect();
                let rv: BTreeMap<Ngram, f64> = ngram_counts(&rt, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = idf(n, &g);
                        (g, c * w)
                    })
                    .collect();
                let cn: f64 = cv.values().map(|v| v * v).sum::<f64>().sqrt();
                let rn: f64 = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = cv
                    .iter()
                    .filter_map(|(g, c)| {
                        rv.get(g).map(|rvg| {
                            if clipped_with_penalty {
                                c.min(*rvg) * rvg
                            } else {
                                c * rvg
                            }
                        })
                    })
                    .sum();
                let mut val = dot / (cn * rn);
                if clipped_with_penalty {
                    let delta = cand.len() as f64 - rt.len() as f64;
                    val *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                }
                sum_n += val;
            }
            item_score += sum_n / 4.0;
        }
        scores.push(10.0 * item_score / it.references.len() as f64);
    }
    Ok(scores)
}

fn cider_role(corpus: &ScoredCorpus, role: Option<Role>, clipped: bool) -> Result<f64> {
    let scores = cider_item_scores(corpus, clipped)?;
    let picked: Vec<f64> = corpus
        .items
        .iter()
        .zip(&scores)
        .filter(|(it, _)| role.map(|r| it.role == r).unwrap_or(true))
        .map(|(_, s)| *s)
        .collect();
    if picked.is_empty() {
        return Err(Error::contract("no items for requested role"));
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// Consensus TF-IDF metric, clipped variant with length penalty.
pub fn cider(corpus: &ScoredCorpus) -> Result<f64> {
    cider_role(corpus, None, true)
}

/// Plain cosine variant without clipping or length penalty.
pub fn cider_plain(corpus: &ScoredCorpus) -> Result<f64> {
    cider_role(corpus, None, false)
}

// ── Report ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub role: String,
    pub score: f64,
    pub items: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn get(&self, metric: &str, role: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.role == role)
            .map(|r| r.score)
    }

    /// Fixed-width human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::from(format!(
            "{:<10} {:<12} {:>12} {:>8}\n",
            "metric", "role", "score", "items"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<12} {:>12.6} {:>8}\n",
                r.metric, r.role, r.score, r.items
            ));
        }
        out
    }
}

/// One row per metric and role split (premise, explanation, pooled).
/// Splits missing from the corpus are skipped.
pub fn score_report(corpus: &ScoredCorpus) -> Result<MetricReport> {
    corpus.validate()?;
    let mut rows = Vec::new();
    let roles: [(Option<Role>, &str); 3] = [
        (Some(Role::Premise), "premise"),
        (Some(Role::Explanation), "explanation"),
        (None, "pooled"),
    ];
    for (role, label) in roles {
        let count = corpus.filtered(role).len();
        if count == 0 {
            continue;
        }
        for (name, val) in [
            ("bleu4", bleu4_role(corpus, role)?),
            ("rouge_l", rouge_l_role(corpus, role)?),
            ("cider", cider_role(corpus, role, true)?),
        ] {
            rows.push(MetricRow {
                metric: name.to_string(),
                role: label.to_string(),
                score: val,
                items: count,
            });
        }
    }
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, cand: &str, refs: &[&str], role: Role) -> ScoredItem {
        ScoredItem {
            id: id.to_string(),
            candidate: cand.to_string(),
            references: refs.iter().map(|s| s.to_string()).collect(),
            role,
        }
    }

    fn single(cand: &str, reference: &str) -> ScoredCorpus {
        ScoredCorpus {
            items: vec![item("0", cand, &[reference], Role::Premise)],
        }
    }

    #[test]
    fn tokenization_is_lowercased_and_stripped() {
        assert_eq!(
            tokenize("The cat, sat!  DOWN."),
            vec!["the", "cat", "sat", "down"]
        );
        assert!(tokenize("...").is_empty());
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        assert!((bleu4(&single("the cat sat down", "the cat sat down")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&single("a b c d", "x y z w")).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_computed_brevity_case() {
        // three unigram/bigram/trigram matches out of three, smoothed
        // 4-gram fallback 1, brevity penalty exp(1 - 4/3)
        let got = bleu4(&single("the cat sat", "the cat sat down")).unwrap();
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn bleu_empty_corpus_is_error() {
        assert!(bleu4(&ScoredCorpus::default()).is_err());
        let no_ref = ScoredCorpus {
            items: vec![ScoredItem {
                id: "0".into(),
                candidate: "a".into(),
                references: vec![],
                role: Role::Premise,
            }],
        };
        assert!(bleu4(&no_ref).is_err());
    }

    #[test]
    fn rouge_perfect_disjoint_and_lcs_case() {
        assert!((rouge_l(&single("a b c d", "a b c d")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&single("a b", "x y")).unwrap(), 0.0);
        // lcs("a b c d", "a c b d") = 3, P = R = 3/4 so F = 0.75 at any beta
        let got = rouge_l(&single("a b c d", "a c b d")).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cider_identical_single_item_is_maximal_and_disjoint_zero() {
        let got = cider(&single("a b c d e", "a b c d e")).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "{got}");
        assert_eq!(cider(&single("a b c d", "w x y z")).unwrap(), 0.0);
    }

    // Frozen fixture: expected values computed by an independent
    // spreadsheet-style implementation of the documented formulas
    // (tools/metrics_oracle.py), not by this module.
    fn fixture() -> ScoredCorpus {
        ScoredCorpus {
            items: vec![
                item("e1", "a b c d", &["a b c d"], Role::Premise),
                item("e2", "a a b x", &["a b c e"], Role::Explanation),
                item("e3", "p q r s", &["p q r u t"], Role::Premise),
            ],
        }
    }

    #[test]
    fn fixture_matches_independent_oracle() {
        let c = fixture();
        let bleu = bleu4(&c).unwrap();
        let rouge = rouge_l(&c).unwrap();
        let cid = cider(&c).unwrap();
        let cid_plain = cider_plain(&c).unwrap();
        assert!((bleu - ORACLE_BLEU4).abs() < 1e-9, "{bleu}");
        assert!((rouge - ORACLE_ROUGE_L).abs() < 1e-9, "{rouge}");
        assert!((cid - ORACLE_CIDER_D).abs() < 1e-9, "{cid}");
        assert!((cid_plain - ORACLE_CIDER_PLAIN).abs() < 1e-9, "{cid_plain}");
    }

    // values frozen from tools/metrics_oracle.py
    const ORACLE_BLEU4: f64 = 0.572573979793902;
    const ORACLE_ROUGE_L: f64 = 0.7178571428571429;
    const ORACLE_CIDER_D: f64 = 5.0180260320752526;
    const ORACLE_CIDER_PLAIN: f64 = 5.142055157833839;

    #[test]
    fn metrics_are_order_invariant() {
        let c = fixture();
        let mut rev = c.clone();
        rev.items.reverse();
        assert_eq!(bleu4(&c).unwrap(), bleu4(&rev).unwrap());
        assert_eq!(rouge_l(&c).unwrap(), rouge_l(&rev).unwrap());
        assert_eq!(cider(&c).unwrap(), cider(&rev).unwrap());
    }

    #[test]
    fn corrupting_a_perfect_candidate_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];
        for trial in 0..30 {
            let items: Vec<ScoredItem> = (0..4)
                .map(|i| {
                    let len = rng.gen_range(4..8);
                    let sent: Vec<&str> =
                        (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
                    let s = sent.join(" ");
                    item(&format!("i{i}"), &s, &[&s], Role::Premise)
                })
                .collect();
            let perfect = ScoredCorpus { items };
            let b0 = bleu4(&perfect).unwrap();
            let r0 = rouge_l(&perfect).unwrap();
            let c0 = cider(&perfect).unwrap();

            let mut corrupted = perfect.clone();
            let which = rng.gen_range(0..corrupted.items.len());
            let mut toks = tokenize(&corrupted.items[which].candidate);
            let pos = rng.gen_range(0..toks.len());
            toks[pos] = "zzz".to_string();
            corrupted.items[which].candidate = toks.join(" ");

            let b1 = bleu4(&corrupted).unwrap();
            let r1 = rouge_l(&corrupted).unwrap();
            let c1 = cider(&corrupted).unwrap();
            assert!(b1 <= b0 + 1e-12, "trial {trial} bleu {b0} -> {b1}");
            assert!(r1 <= r0 + 1e-12, "trial {trial} rouge {r0} -> {r1}");
            assert!(c1 <= c0 + 1e-9, "trial {trial} cider {c0} -> {c1}");
        }
    }

    #[test]
    fn role_report_is_sum_consistent() {
        let c = fixture();
        let report = score_report(&c).unwrap();
        // item-mean metrics: pooled mean equals the weighted role mean
        for metric in ["rouge_l", "cider"] {
            let p = report.get(metric, "premise").unwrap();
            let e = report.get(metric, "explanation").unwrap();
            let pooled = report.get(metric, "pooled").unwrap();
            let expect = (2.0 * p + 1.0 * e) / 3.0;
            assert!((pooled - expect).abs() < 1e-12, "{metric}");
        }
        // corpus-count metric: pooled counts equal the per-role sums
        let prem: Vec<&ScoredItem> = c.items.iter().filter(|i| i.role == Role::Premise).collect();
        let expl: Vec<&ScoredItem> = c
            .items
            .iter()
            .filter(|i| i.role == Role::Explanation)
            .collect();
        let all: Vec<&ScoredItem> = c.items.iter().collect();
        let (mp, tp, cp, rp) = bleu_counts(&prem);
        let (me, te, ce, re) = bleu_counts(&expl);
        let (ma, ta, ca, ra) = bleu_counts(&all);
        for n in 0..4 {
            assert_eq!(mp[n] + me[n], ma[n]);
            assert_eq!(tp[n] + te[n], ta[n]);
        }
        assert_eq!(cp + ce, ca);
        assert_eq!(rp + re, ra);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let c = ScoredCorpus {
            items: vec![
                item("x", "a", &["a"], Role::Premise),
                item("x", "b", &["b"], Role::Premise),
            ],
        };
        assert!(c.validate().is_err());
    }
}
