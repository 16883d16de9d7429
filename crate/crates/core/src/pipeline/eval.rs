//! Recognition accuracy and token-usage statistics.

use std::fmt::Write as _;

use diffcore::SeededRng;
use serde::{Deserialize, Serialize};

use crate::biasreg::{js_divergence, zipf_target};
use crate::codec::Codec;
use crate::error::Result;
use crate::pipeline::train::{candidate_list, recognizer_latents};
use crate::recognizer::{
    build_instruction, predict, split_words, BaseLm, LoraAdapters, Prediction,
};
use crate::skeldata::SkeletonDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Decodes that are not any allowed class name; also counted wrong.
    pub invalid: usize,
    /// Per-run accuracies when the evaluation was repeated.
    pub runs: Vec<f64>,
}

/// Exact-match accuracy of `predictions` against `truth` names.
pub fn score(predictions: &[Prediction], truth: &[String]) -> EvalReport {
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.text == **t)
        .count();
    let invalid = predictions.iter().filter(|p| !p.valid).count();
    let total = truth.len();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    EvalReport {
        accuracy,
        correct,
        total,
        invalid,
        runs: vec![accuracy],
    }
}

/// What the recognizer needs besides the test data.
pub struct Recognizer<'a> {
    pub codec: &'a Codec,
    pub base: &'a BaseLm,
    pub adapters: Option<&'a LoraAdapters>,
    pub template: &'a str,
    pub list_template: &'a str,
    pub no_discretization: bool,
}

const EVAL_CHUNK: usize = 64;

impl Recognizer<'_> {
    /// Greedy predictions for `test`; `lists[i]` is the candidate list of
    /// sample `i` (empty for the plain template).
    pub fn predict(
        &self,
        test: &SkeletonDataset,
        lists: &[Vec<String>],
    ) -> Result<Vec<Prediction>> {
        let allowed = &test.class_names;
        let max_words = allowed
            .iter()
            .map(|n| split_words(n).len())
            .max()
            .unwrap_or(1);
        let mut out = Vec::with_capacity(test.len());
        for (chunk, chunk_lists) in test
            .samples
            .chunks(EVAL_CHUNK)
            .zip(lists.chunks(EVAL_CHUNK))
        {
            let instructions = chunk
                .iter()
                .zip(chunk_lists)
                .map(|(s, list)| {
                    let lat = recognizer_latents(self.codec, s, self.no_discretization)?;
                    build_instruction(&lat, self.base, self.template, self.list_template, list)
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(predict(
                self.base,
                self.adapters,
                &instructions,
                allowed,
                max_words,
            )?);
        }
        Ok(out)
    }

    /// Top-1 accuracy with the plain template.
    pub fn evaluate(&self, test: &SkeletonDataset) -> Result<EvalReport> {
        let lists = vec![Vec::new(); test.len()];
        let preds = self.predict(test, &lists)?;
        Ok(score(&preds, &truth(test)))
    }

    /// Unseen-class accuracy: every test sample is asked to choose from the
    /// held-out classes in a shuffled order. Repeated `runs` times with
    /// different orders; the reported accuracy is the mean.
    pub fn evaluate_unseen(
        &self,
        test: &SkeletonDataset,
        unseen: &[usize],
        runs: usize,
        seed: u64,
    ) -> Result<EvalReport> {
        let truth = truth(test);
        let labels = test.labels();
        let mut accs = Vec::with_capacity(runs);
        let mut agg = EvalReport {
            accuracy: 0.0,
            correct: 0,
            total: 0,
            invalid: 0,
            runs: Vec::new(),
        };
        for run in 0..runs.max(1) {
            let mut rng = SeededRng::new(seed).fork(100 + run as u64);
            let lists: Vec<Vec<String>> = labels
                .iter()
                .map(|&k| {
                    candidate_list(k, unseen, &mut rng)
                        .into_iter()
                        .map(|c| test.class_names[c].clone())
                        .collect()
                })
                .collect();
            let r = score(&self.predict(test, &lists)?, &truth);
            accs.push(r.accuracy);
            agg.correct += r.correct;
            agg.total += r.total;
            agg.invalid += r.invalid;
        }
        agg.accuracy = accs.iter().sum::<f64>() / accs.len() as f64;
        agg.runs = accs;
        Ok(agg)
    }
}

fn truth(test: &SkeletonDataset) -> Vec<String> {
    test.labels()
        .iter()
        .map(|&k| test.class_names[k].clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub empirical_prob: f64,
    pub zipf_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub rows: Vec<RankRow>,
    pub js_to_zipf: f64,
}

impl UsageStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,empirical_prob,zipf_prob\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.rank, r.empirical_prob, r.zipf_prob).expect("string write");
        }
        s
    }
}

/// Hard-quantization histogram of every token over `data`, sorted by
/// frequency and compared with the Zipf target.
pub fn usage_stats(
    codec: &Codec,
    data: &SkeletonDataset,
    alpha: f64,
    beta: f64,
) -> Result<UsageStats> {
    let u = codec.config().codebook_size;
    let mut counts = vec![0.0; u];
    for s in &data.samples {
        for i in codec.tokenize(s)?.indices {
            counts[i] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let mut probs: Vec<f64> = counts
        .iter()
        .map(|c| if total > 0.0 { c / total } else { 0.0 })
        .collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    let target = zipf_target(u, alpha, beta)?;
    let js = js_divergence(&probs, &target.probabilities);
    let rows = probs
        .iter()
        .zip(&target.probabilities)
        .enumerate()
        .map(|(r, (&p, &q))| RankRow {
            rank: r + 1,
            empirical_prob: p,
            zipf_prob: q,
        })
        .collect();
    Ok(UsageStats {
        rows,
        js_to_zipf: js,
    })
}

/// Action sentences for `data`, one row of token indices per sample.
pub fn tokenize_all(codec: &Codec, data: &SkeletonDataset) -> Result<Vec<Vec<usize>>> {
    data.samples
        .iter()
        .map(|s| Ok(codec.tokenize(s)?.indices))
        .collect()
}
