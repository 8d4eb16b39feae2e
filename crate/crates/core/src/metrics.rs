//! Reference-based caption scores over tokenized corpora.
//!
//! Item `i` pairs `candidates[i]` with `references[i]` (one or more). All
//! scores are corpus-order invariant.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CfdError, Result};
use crate::model::vocab::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

pub type Tokens = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Filled only by an external scorer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spice: Option<f64>,
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(CfdError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(CfdError::LengthMismatch(format!(
            "{} candidates, {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(CfdError::InvalidConfig(format!("item {i} has no reference")));
    }
    Ok(())
}

/// Corpus BLEU with uniform 1..4-gram weights and brevity penalty. An order
/// with no clipped match scores `1 / (total + 1)` instead of zero.
pub fn bleu4(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        cand_len += c.len();
        // closest reference length, shorter on ties
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let cand = ngrams(c, n);
            let mut max_ref: Counts<'_> = HashMap::new();
            for r in refs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..MAX_N {
        let p = if matched[n] == 0 {
            1.0 / (total[n] as f64 + 1.0)
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_p += p.ln() / MAX_N as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((bp * log_p.exp()).clamp(0.0, 1.0))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_item(c: &[String], refs: &[Tokens]) -> f64 {
    refs.iter()
        .map(|r| {
            let l = lcs_len(c, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean over items of the LCS F-measure against the best reference.
pub fn rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check(candidates, references)?;
    let sum: f64 = candidates
        .par_iter()
        .zip(references)
        .map(|(c, r)| rouge_item(c, r))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(sum / candidates.len() as f64)
}

struct TfIdf {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut v = BTreeMap::new();
        for (g, tf) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            v.insert(g.to_vec(), tf as f64 * (log_n - d.ln()));
        }
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut acc = 0.0;
    for n in 0..MAX_N {
        let mut dot = 0.0;
        for (g, hv) in &h.vecs[n] {
            if let Some(rv) = r.vecs[n].get(g) {
                dot += hv.min(*rv) * rv;
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            dot /= h.norms[n] * r.norms[n];
        }
        acc += dot * penalty;
    }
    acc / MAX_N as f64
}

/// CIDEr-D: clipped tf-idf cosine over 1..4-grams with a Gaussian length
/// penalty, averaged over references and items, times 10. Document
/// frequency counts items whose references contain the n-gram.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check(candidates, references)?;
    if candidates.len() < 2 {
        return Err(CfdError::CorpusTooSmall(candidates.len()));
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for refs in references {
        let mut seen: std::collections::HashSet<&[String]> = Default::default();
        for r in refs {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    let per_item: Vec<f64> = candidates
        .par_iter()
        .zip(references)
        .map(|(c, refs)| {
            let h = tfidf(c, &df, log_n);
            let s: f64 = refs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_n))).sum();
            10.0 * s / refs.len() as f64
        })
        .collect();
    Ok(per_item.iter().sum::<f64>() / per_item.len() as f64)
}

/// All three scores; CIDEr is 0 on a single-item corpus.
pub fn score_tokens(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<ScoreSet> {
    let cider = match cider(candidates, references) {
        Err(CfdError::CorpusTooSmall(_)) => 0.0,
        other => other?,
    };
    Ok(ScoreSet {
        bleu4: bleu4(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        cider,
        spice: None,
    })
}

/// Tokenizes raw strings and scores them.
pub fn score_corpus<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<ScoreSet> {
    let c: Vec<Tokens> = candidates.iter().map(|s| tokenize(s.as_ref())).collect();
    let r: Vec<Vec<Tokens>> = references
        .iter()
        .map(|rs| rs.iter().map(|s| tokenize(s.as_ref())).collect())
        .collect();
    score_tokens(&c, &r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub image_id: String,
    pub captions: Vec<String>,
}

fn read_jsonl<L: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<L>> {
    let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CfdError::ManifestParseError {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Scores a predictions file against a references file, joined on image id.
pub fn score_files(pred: &Path, refs: &Path) -> Result<ScoreSet> {
    let preds: Vec<PredictionLine> = read_jsonl(pred)?;
    let refs: BTreeMap<String, Vec<String>> = read_jsonl::<ReferenceLine>(refs)?
        .into_iter()
        .map(|r| (r.image_id, r.captions))
        .collect();
    let mut cands = Vec::with_capacity(preds.len());
    let mut rs = Vec::with_capacity(preds.len());
    for p in preds {
        let r = refs.get(&p.image_id).ok_or_else(|| CfdError::MissingImage(p.image_id.clone()))?;
        cands.push(p.caption);
        rs.push(r.clone());
    }
    score_corpus(&cands, &rs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_scores() {
        let c = vec![t("a red circle on grass"), t("a big blue square")];
        let r: Vec<Vec<Tokens>> = c.iter().map(|x| vec![x.clone()]).collect();
        assert_eq!(bleu4(&c, &r).unwrap(), 1.0);
        assert_eq!(rouge_l(&c, &r).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_scores() {
        let c = vec![t("a b c d e f g h"), t("i j k l m n o p"), t("q r s t u v w x")];
        let r = vec![vec![t("z y z y z y z y")]; 3];
        let b = bleu4(&c, &r).unwrap();
        assert!(b > 0.0 && b < 0.05, "{b}");
        assert_eq!(rouge_l(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_lcs() {
        let c = vec![t("a b c d")];
        let r = vec![vec![t("a c d e")]];
        assert_eq!(lcs_len(&c[0], &r[0][0]), 3);
        // P = R = 3/4 so F = 3/4
        assert!((rouge_l(&c, &r).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bleu_hand_counts() {
        // cand 1 "the cat sat on the mat" vs "the cat is on the mat":
        //   1g 5/6, 2g 3/5, 3g 1/4, 4g 0/3
        // cand 2 "a dog runs" vs "a dog runs fast":
        //   1g 3/3, 2g 2/2, 3g 1/1, 4g 0/0
        // corpus: 8/9, 5/7, 2/5, 0/3 -> 1/4 smoothed; c = 9, r = 10
        let c = vec![t("the cat sat on the mat"), t("a dog runs")];
        let r = vec![vec![t("the cat is on the mat")], vec![t("a dog runs fast")]];
        let want = (1.0f64 - 10.0 / 9.0).exp() * (8.0 / 9.0 * 5.0 / 7.0 * 2.0 / 5.0 * 1.0 / 4.0f64).powf(0.25);
        assert!((bleu4(&c, &r).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cider_two_item_oracle() {
        // Every n-gram appears in exactly one of two items: idf = ln 2 for
        // all, cosine 1 for n = 1, 2 and empty for n = 3, 4.
        let c = vec![t("red circle"), t("blue square")];
        let r: Vec<Vec<Tokens>> = c.iter().map(|x| vec![x.clone()]).collect();
        assert!((cider(&c, &r).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cider_zero_idf() {
        let c = vec![t("a b"), t("a b")];
        let r = vec![vec![t("a b")], vec![t("a b")]];
        assert_eq!(cider(&c, &r).unwrap(), 0.0);
        assert!(matches!(cider(&c[..1], &r[..1]), Err(CfdError::CorpusTooSmall(1))));
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu4(&[], &[]), Err(CfdError::EmptyCorpus)));
        assert!(matches!(rouge_l(&[], &[]), Err(CfdError::EmptyCorpus)));
    }

    #[test]
    fn score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        let r = dir.path().join("refs.jsonl");
        fs::write(&p, "{\"image_id\":\"x\",\"caption\":\"a red circle\"}\n{\"image_id\":\"y\",\"caption\":\"a blue bar\"}\n").unwrap();
        fs::write(
            &r,
            "{\"image_id\":\"y\",\"captions\":[\"a blue bar\"]}\n{\"image_id\":\"x\",\"captions\":[\"a red circle\",\"a circle\"]}\n",
        )
        .unwrap();
        let s = score_files(&p, &r).unwrap();
        assert_eq!(s.rouge_l, 1.0);
        assert!(s.cider > 0.0 && s.spice.is_none());
    }

    fn corpus() -> impl Strategy<Value = (Vec<Tokens>, Vec<Vec<Tokens>>)> {
        let sent = prop::collection::vec(0u8..6, 1..8).prop_map(|v| v.iter().map(|x| format!("w{x}")).collect::<Tokens>());
        prop::collection::vec((sent.clone(), prop::collection::vec(sent, 1..3)), 2..6).prop_map(|items| items.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn order_invariant((c, r) in corpus()) {
            let a = score_tokens(&c, &r).unwrap();
            let (mut c2, mut r2) = (c.clone(), r.clone());
            c2.reverse();
            r2.reverse();
            let b = score_tokens(&c2, &r2).unwrap();
            prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.cider - b.cider).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&a.bleu4) && (0.0..=1.0).contains(&a.rouge_l) && a.cider >= 0.0);
        }

        #[test]
        fn renaming_invariant((c, r) in corpus()) {
            let rename = |x: &Tokens| x.iter().map(|w| format!("z{w}")).collect::<Tokens>();
            let c2: Vec<Tokens> = c.iter().map(rename).collect();
            let r2: Vec<Vec<Tokens>> = r.iter().map(|rs| rs.iter().map(rename).collect()).collect();
            prop_assert_eq!(bleu4(&c, &r).unwrap(), bleu4(&c2, &r2).unwrap());
            prop_assert_eq!(rouge_l(&c, &r).unwrap(), rouge_l(&c2, &r2).unwrap());
        }

        #[test]
        fn extra_matching_reference_never_lowers_rouge((c, r) in corpus()) {
            let before = rouge_item(&c[0], &r[0]);
            let mut more = r[0].clone();
            more.push(c[0].clone());
            prop_assert!(rouge_item(&c[0], &more) >= before);
        }
    }
}
