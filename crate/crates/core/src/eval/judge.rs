//! Judges decide whether a generated answer and the reference reach the same
//! real/fake conclusion.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::text::split_words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub decision: Decision,
    /// The hypothesis (or reference) carried no verdict keyword.
    pub no_verdict: bool,
}

pub trait Judge: Sync {
    fn judge(&self, hypothesis: &str, reference: &str) -> Result<Judgement>;

    /// Upper bound on concurrent calls to [`Judge::judge`].
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// First "real" or "fake" word, flipped when directly preceded by "not".
pub fn extract_verdict(text: &str) -> Option<Label> {
    let words = split_words(text);
    let pos = words.iter().position(|w| w == "real" || w == "fake")?;
    let base = if words[pos] == "real" {
        Label::Real
    } else {
        Label::Fake
    };
    let negated = pos > 0 && words[pos - 1] == "not";
    Some(match (base, negated) {
        (Label::Real, true) => Label::Fake,
        (Label::Fake, true) => Label::Real,
        (l, false) => l,
    })
}

/// Compares the keyword verdicts of both texts.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordJudge;

impl Judge for KeywordJudge {
    fn judge(&self, hypothesis: &str, reference: &str) -> Result<Judgement> {
        Ok(match (extract_verdict(hypothesis), extract_verdict(reference)) {
            (Some(h), Some(r)) => Judgement {
                decision: if h == r { Decision::Yes } else { Decision::No },
                no_verdict: false,
            },
            _ => Judgement {
                decision: Decision::No,
                no_verdict: true,
            },
        })
    }
}

pub const DEFAULT_PROMPT: &str = "You compare a ground-truth explanation with a predicted \
explanation of whether an image is real or fake. Reply \"yes\" if both reach the same \
conclusion, otherwise \"no\".\nGround truth: {reference}\nPrediction: {hypothesis}";

/// Fills `{reference}` and `{hypothesis}` in a prompt template.
pub fn fill_prompt(template: &str, hypothesis: &str, reference: &str) -> String {
    template
        .replace("{reference}", reference)
        .replace("{hypothesis}", hypothesis)
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct VerdictReply {
    verdict: String,
}

/// POSTs `{"prompt": ...}` to an HTTP endpoint and expects
/// `{"verdict": "yes" | "no"}`. A failed attempt is retried once.
pub struct RemoteJudge {
    endpoint: String,
    template: String,
    agent: ureq::Agent,
    max_in_flight: usize,
}

impl RemoteJudge {
    pub fn new(endpoint: &str, template: &str, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            template: template.to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            max_in_flight: max_in_flight.max(1),
        }
    }

    fn attempt(&self, prompt: &str) -> Result<Decision> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .send_json(PromptBody { prompt })
            .map_err(|e| Error::Transport(e.to_string()))?;
        let reply: VerdictReply = resp
            .into_json()
            .map_err(|e| Error::Transport(format!("malformed judge reply: {e}")))?;
        match reply.verdict.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Decision::Yes),
            "no" => Ok(Decision::No),
            other => Err(Error::Transport(format!("judge replied `{other}`, not yes/no"))),
        }
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, hypothesis: &str, reference: &str) -> Result<Judgement> {
        let prompt = fill_prompt(&self.template, hypothesis, reference);
        let decision = match self.attempt(&prompt) {
            Ok(d) => d,
            Err(first) => {
                log::warn!("judge request failed, retrying: {first}");
                self.attempt(&prompt)?
            }
        };
        Ok(Judgement {
            decision,
            no_verdict: false,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// What to do when a judge call fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Stop at the first failure and return its error.
    #[default]
    Abort,
    /// Leave failed pairs out of the accuracy and report them.
    SkipAndReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Judged(Judgement),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeTally {
    /// Correct over judged pairs; zero when nothing was judged.
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_judged: usize,
    pub n_failed: usize,
    pub n_no_verdict: usize,
    pub outcomes: Vec<PairOutcome>,
}

/// Judges every `(hypothesis, reference)` pair with at most
/// `judge.max_in_flight()` calls running at once. Outcomes keep input order.
pub fn judge_pairs(
    pairs: &[(&str, &str)],
    judge: &dyn Judge,
    policy: FailurePolicy,
) -> Result<JudgeTally> {
    let workers = judge
        .max_in_flight()
        .min(pairs.len())
        .min(64)
        .max(1);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<Judgement>>>> =
        pairs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pairs.len() {
                    break;
                }
                let r = judge.judge(pairs[i].0, pairs[i].1);
                if r.is_err() && policy == FailurePolicy::Abort {
                    stop.store(true, Ordering::Relaxed);
                }
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let mut results: Vec<Option<Result<Judgement>>> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock"))
        .collect();
    if policy == FailurePolicy::Abort {
        if let Some(i) = results.iter().position(|r| matches!(r, Some(Err(_)))) {
            if let Some(Err(e)) = results.swap_remove(i) {
                return Err(e);
            }
        }
    }
    let mut outcomes = Vec::with_capacity(pairs.len());
    for r in results {
        match r {
            Some(Ok(j)) => outcomes.push(PairOutcome::Judged(j)),
            Some(Err(e)) => outcomes.push(PairOutcome::Failed(e.to_string())),
            None => {
                return Err(Error::Transport("judging stopped after an earlier failure".into()))
            }
        }
    }
    let judged: Vec<&Judgement> = outcomes
        .iter()
        .filter_map(|o| match o {
            PairOutcome::Judged(j) => Some(j),
            PairOutcome::Failed(_) => None,
        })
        .collect();
    let n_correct = judged.iter().filter(|j| j.decision == Decision::Yes).count();
    let n_judged = judged.len();
    Ok(JudgeTally {
        accuracy: if n_judged == 0 {
            0.0
        } else {
            n_correct as f64 / n_judged as f64
        },
        n_correct,
        n_judged,
        n_failed: pairs.len() - n_judged,
        n_no_verdict: judged.iter().filter(|j| j.no_verdict).count(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_extraction() {
        assert_eq!(extract_verdict("The image looks real"), Some(Label::Real));
        assert_eq!(extract_verdict("this is not real"), Some(Label::Fake));
        assert_eq!(extract_verdict("It is not fake, it is real."), Some(Label::Real));
        assert_eq!(extract_verdict("Top row: red."), None);
        assert_eq!(extract_verdict("FAKE!"), Some(Label::Fake));
    }

    #[test]
    fn keyword_judge_examples() {
        let j = KeywordJudge;
        let same = j
            .judge(
                "The image looks fake. The nose region has unnatural texture.",
                "The image looks fake.",
            )
            .unwrap();
        assert_eq!(same.decision, Decision::Yes);
        assert_eq!(j.judge("looks real", "looks fake").unwrap().decision, Decision::No);
        let none = j.judge("top row: red", "looks fake").unwrap();
        assert_eq!(none.decision, Decision::No);
        assert!(none.no_verdict);
    }

    #[test]
    fn tally_counts_and_keeps_order() {
        let pairs = [
            ("real", "real"),
            ("fake", "real"),
            ("nothing", "real"),
            ("fake", "fake"),
        ];
        let t = judge_pairs(&pairs, &KeywordJudge, FailurePolicy::Abort).unwrap();
        assert_eq!((t.n_correct, t.n_judged, t.n_no_verdict), (2, 4, 1));
        assert_eq!(t.accuracy, 0.5);
        assert!(matches!(t.outcomes[2], PairOutcome::Judged(Judgement { no_verdict: true, .. })));
    }

    struct Flaky;

    impl Judge for Flaky {
        fn judge(&self, h: &str, _: &str) -> Result<Judgement> {
            if h == "bad" {
                Err(Error::Transport("down".into()))
            } else {
                Ok(Judgement {
                    decision: Decision::Yes,
                    no_verdict: false,
                })
            }
        }
    }

    #[test]
    fn failure_policies() {
        let pairs = [("ok", "x"), ("bad", "x"), ("ok", "x")];
        assert!(matches!(
            judge_pairs(&pairs, &Flaky, FailurePolicy::Abort),
            Err(Error::Transport(_))
        ));
        let t = judge_pairs(&pairs, &Flaky, FailurePolicy::SkipAndReport).unwrap();
        assert_eq!((t.n_judged, t.n_failed, t.accuracy), (2, 1, 1.0));
        assert!(matches!(t.outcomes[1], PairOutcome::Failed(_)));
    }

    #[test]
    fn prompt_template_is_filled() {
        let p = fill_prompt("R={reference} H={hypothesis}", "h1", "r1");
        assert_eq!(p, "R=r1 H=h1");
    }
}
