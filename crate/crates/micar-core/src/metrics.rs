//! Caption metrics: cumulative BLEU-1..4 (clipped n-gram precision with
//! brevity penalty, corpus-level statistics) and LCS-based ROUGE-L F-measure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROUGE-L recall weight (beta squared, beta = 1.2).
pub const ROUGE_BETA_SQ: f64 = 1.44;

/// Accumulable BLEU sufficient statistics: clipped and total n-gram counts
/// for n = 1..=4 plus candidate/reference lengths. Corpus BLEU sums these
/// across examples before applying the precision/brevity formula.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub clipped: [usize; 4],
    pub total: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn of(candidate: &[String], reference: &[String]) -> BleuStats {
        let mut s = BleuStats {
            cand_len: candidate.len(),
            ref_len: reference.len(),
            ..BleuStats::default()
        };
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            for (gram, &c) in &cand {
                s.total[n - 1] += c;
                s.clipped[n - 1] += c.min(refs.get(gram).copied().unwrap_or(0));
            }
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for i in 0..4 {
            self.clipped[i] += other.clipped[i];
            self.total[i] += other.total[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Cumulative BLEU-n: geometric mean of the first `n` clipped precisions
    /// times the brevity penalty. Any zero precision (or an empty candidate)
    /// collapses the score to 0.
    pub fn bleu(&self, n: usize) -> f64 {
        assert!((1..=4).contains(&n), "BLEU order {n} out of range");
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..n {
            if self.clipped[i] == 0 || self.total[i] == 0 {
                return 0.0;
            }
            log_sum += (self.clipped[i] as f64 / self.total[i] as f64).ln();
        }
        let brevity = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        brevity * (log_sum / n as f64).exp()
    }
}

/// Sentence-level cumulative BLEU-n.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> f64 {
    BleuStats::of(candidate, reference).bleu(n)
}

/// Length of the longest common subsequence.
fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev_diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { prev_diag + 1 } else { up.max(row[j]) };
            prev_diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F-measure with recall weight `ROUGE_BETA_SQ`: precision is
/// LCS/len(candidate), recall LCS/len(reference).
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("ROUGE-L needs a nonempty reference".into()));
    }
    let l = lcs(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok((1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p))
}

/// Mean of the four cumulative BLEU orders.
pub fn average_bleu(bleu: [f64; 4]) -> f64 {
    bleu.iter().sum::<f64>() / 4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub avg_bleu: f64,
    pub rouge_l: f64,
    pub per_example: Vec<ExampleMetrics>,
}

/// Corpus evaluation: BLEU from summed n-gram statistics (the convention
/// for reported table numbers), ROUGE-L macro-averaged per example.
/// Prediction and reference id sets must match exactly.
pub fn evaluate_corpus(
    predictions: &[(String, Vec<String>)],
    references: &[(String, Vec<String>)],
) -> Result<MetricReport> {
    if references.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty reference set".into()));
    }
    let preds: BTreeMap<&str, &Vec<String>> =
        predictions.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let refs: BTreeMap<&str, &Vec<String>> =
        references.iter().map(|(id, t)| (id.as_str(), t)).collect();

    let missing_pred: Vec<&str> = refs.keys().filter(|id| !preds.contains_key(*id)).copied().collect();
    let missing_ref: Vec<&str> = preds.keys().filter(|id| !refs.contains_key(*id)).copied().collect();
    if !missing_pred.is_empty() || !missing_ref.is_empty() {
        return Err(Error::Contract(format!(
            "prediction/reference ids disagree: missing predictions for {missing_pred:?}, \
             missing references for {missing_ref:?}"
        )));
    }

    let mut corpus = BleuStats::default();
    let mut rouge_sum = 0.0;
    let mut per_example = Vec::with_capacity(refs.len());
    for (id, reference) in &refs {
        let candidate = preds[id];
        let stats = BleuStats::of(candidate, reference);
        corpus.add(&stats);
        let rl = rouge_l(candidate, reference)?;
        rouge_sum += rl;
        per_example.push(ExampleMetrics {
            id: id.to_string(),
            bleu: [stats.bleu(1), stats.bleu(2), stats.bleu(3), stats.bleu(4)],
            rouge_l: rl,
        });
    }

    let bleu = [corpus.bleu(1), corpus.bleu(2), corpus.bleu(3), corpus.bleu(4)];
    Ok(MetricReport {
        bleu_1: bleu[0],
        bleu_2: bleu[1],
        bleu_3: bleu[2],
        bleu_4: bleu[3],
        avg_bleu: average_bleu(bleu),
        rouge_l: rouge_sum / refs.len() as f64,
        per_example,
    })
}
