//! Answer-quality metrics, judges and the evaluation report.

mod judge;
mod metrics;

pub use judge::{
    extract_verdict, fill_prompt, judge_pairs, Decision, FailurePolicy, Judge, JudgeTally,
    Judgement, KeywordJudge, PairOutcome, RemoteJudge, DEFAULT_PROMPT,
};
pub use metrics::{bleu_n, cider, corpus_bleu, rouge_l, Smoothing, ROUGE_BETA};

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ForensicExample, Label};
use crate::error::{Error, Result};
use crate::model::{generate_from_features, ModelParams};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub question: String,
    pub reference: String,
    pub hypothesis: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    #[default]
    Keyword,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub judge: JudgeKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub prompt_template: String,
    pub failure_policy: FailurePolicy,
    pub max_new_tokens: usize,
    /// Gaussian length penalty width for CIDEr; `None` disables it.
    pub cider_sigma: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            judge: JudgeKind::Keyword,
            endpoint: None,
            timeout_ms: 5000,
            max_in_flight: 4,
            prompt_template: DEFAULT_PROMPT.to_string(),
            failure_policy: FailurePolicy::Abort,
            max_new_tokens: 32,
            cider_sigma: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.judge == JudgeKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config("the remote judge needs an endpoint".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn make_judge(&self) -> Result<Box<dyn Judge>> {
        self.validate()?;
        Ok(match self.judge {
            JudgeKind::Keyword => Box::new(KeywordJudge),
            JudgeKind::Remote => Box::new(RemoteJudge::new(
                self.endpoint.as_deref().unwrap_or_default(),
                &self.prompt_template,
                Duration::from_millis(self.timeout_ms),
                self.max_in_flight,
            )),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub reference: String,
    pub hypothesis: String,
    pub label: Label,
    /// `None` when the judge call failed and was skipped.
    pub correct: Option<bool>,
    pub no_verdict: bool,
    pub error: Option<String>,
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_examples: usize,
    pub n_judged: usize,
    pub n_skipped: usize,
    pub n_no_verdict: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fraction of pairs the judge accepts.
pub fn judge_accuracy(
    pairs: &[EvalPair],
    judge: &dyn Judge,
    policy: FailurePolicy,
) -> Result<JudgeTally> {
    let texts: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.hypothesis.as_str(), p.reference.as_str()))
        .collect();
    judge_pairs(&texts, judge, policy)
}

/// Scores generated answers with every metric and the judge.
pub fn score_pairs(pairs: &[EvalPair], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.reference.trim().is_empty()) {
        return Err(Error::Validation(format!(
            "empty reference for question `{}`",
            p.question
        )));
    }
    let judge = cfg.make_judge()?;
    let tally = judge_accuracy(pairs, judge.as_ref(), cfg.failure_policy)?;
    let texts: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.hypothesis.as_str(), p.reference.as_str()))
        .collect();
    let records: Vec<EvalRecord> = pairs
        .iter()
        .zip(&tally.outcomes)
        .map(|(p, o)| {
            let (correct, no_verdict, error) = match o {
                PairOutcome::Judged(j) => (Some(j.decision == Decision::Yes), j.no_verdict, None),
                PairOutcome::Failed(e) => (None, false, Some(e.clone())),
            };
            EvalRecord {
                question: p.question.clone(),
                reference: p.reference.clone(),
                hypothesis: p.hypothesis.clone(),
                label: p.label,
                correct,
                no_verdict,
                error,
                bleu4: bleu_n(&p.hypothesis, &[&p.reference], 4, Smoothing::AddEpsilon),
                rouge_l: rouge_l(&p.hypothesis, &p.reference, ROUGE_BETA),
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: tally.accuracy,
        bleu3: corpus_bleu(&texts, 3, Smoothing::None),
        bleu4: corpus_bleu(&texts, 4, Smoothing::None),
        rouge_l: records.iter().map(|r| r.rouge_l).sum::<f64>() / records.len() as f64,
        cider: cider(&texts, 4, cfg.cider_sigma),
        n_examples: pairs.len(),
        n_judged: tally.n_judged,
        n_skipped: tally.n_failed,
        n_no_verdict: tally.n_no_verdict,
        records,
    })
}

/// Generates an answer for every example (in parallel, each one
/// deterministic).
pub fn generate_answers(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    dataset: &[ForensicExample],
    max_new: usize,
) -> Result<Vec<EvalPair>> {
    dataset
        .par_iter()
        .map(|ex| {
            let feats = params.encode(&ex.image)?;
            let hypothesis =
                generate_from_features(&feats, &ex.question, params, vocab, max_new)?;
            Ok(EvalPair {
                question: ex.question.clone(),
                reference: ex.answer.clone(),
                hypothesis,
                label: ex.label,
            })
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    dataset: &[ForensicExample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("the test set is empty".into()));
    }
    let pairs = generate_answers(params, vocab, dataset, cfg.max_new_tokens)?;
    score_pairs(&pairs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: &str, r: &str) -> EvalPair {
        EvalPair {
            question: "q".into(),
            reference: r.into(),
            hypothesis: h.into(),
            label: Label::Fake,
        }
    }

    #[test]
    fn report_has_every_metric_in_range() {
        let pairs = vec![
            pair("The image looks fake.", "The image looks fake. The center region has unnatural texture."),
            pair("It looks real.", "It looks real."),
            pair("Top row: red.", "It looks fake."),
        ];
        let r = score_pairs(&pairs, &EvalConfig::default()).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.n_no_verdict, 1);
        for v in [r.bleu3, r.bleu4, r.rouge_l] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.cider >= 0.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["accuracy", "bleu3", "bleu4", "rouge_l", "cider"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn adding_a_perfect_pair_never_lowers_accuracy() {
        let mut pairs = vec![pair("real", "fake"), pair("fake", "fake")];
        let before = score_pairs(&pairs, &EvalConfig::default()).unwrap().accuracy;
        pairs.push(pair("It looks fake.", "It looks fake."));
        let after = score_pairs(&pairs, &EvalConfig::default()).unwrap().accuracy;
        assert!(after >= before);
    }

    #[test]
    fn empty_inputs_and_missing_endpoint_are_rejected() {
        assert!(score_pairs(&[], &EvalConfig::default()).is_err());
        assert!(score_pairs(&[pair("a", " ")], &EvalConfig::default()).is_err());
        let cfg = EvalConfig {
            judge: JudgeKind::Remote,
            ..EvalConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
