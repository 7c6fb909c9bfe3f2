use std::sync::OnceLock;

use regex::Regex;

use super::{QualityDetail, QualityScore, QualityScorer};
use crate::error::{Error, Result};
use crate::gateway::Gateway;

fn blank_line_run() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // a newline followed by one or more lines that hold only spaces/tabs
    RE.get_or_init(|| Regex::new(r"\n(?:[ \t]*\n)+").unwrap())
}

/// Splits a reasoning trace into steps on blank lines, falling back to
/// single newlines when the trace has no blank line. Steps are trimmed and
/// empty ones dropped.
pub fn split_reasoning_steps(response: &str) -> Vec<String> {
    let text = response.replace("\r\n", "\n");
    let collect = |parts: &mut dyn Iterator<Item = &str>| -> Vec<String> {
        parts
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    };
    let steps = collect(&mut blank_line_run().split(&text));
    if steps.len() > 1 {
        return steps;
    }
    collect(&mut text.split('\n'))
}

/// A trace is only as good as its weakest step.
pub fn min_step_score(step_scores: &[f64]) -> Option<f64> {
    step_scores.iter().copied().reduce(f64::min)
}

pub fn score_math(gateway: &Gateway, problem: &str, response: &str) -> Result<QualityScore> {
    let steps = split_reasoning_steps(response);
    if steps.is_empty() {
        return Err(Error::precondition("empty response"));
    }
    let step_scores = gateway.score_prm(problem, &steps)?;
    let value = min_step_score(&step_scores).expect("at least one step");
    Ok(QualityScore {
        value,
        scorer: QualityScorer::Math,
        detail: QualityDetail::Math { step_scores },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn double_newlines_split() {
        assert_eq!(split_reasoning_steps("A\n\nB\n\nC"), ["A", "B", "C"]);
        assert_eq!(split_reasoning_steps("A\n\n\n\nB"), ["A", "B"]);
        assert_eq!(split_reasoning_steps("A\r\n\r\nB"), ["A", "B"]);
        assert_eq!(split_reasoning_steps("A\n  \nB"), ["A", "B"]);
    }

    #[test]
    fn single_newline_fallback() {
        assert_eq!(split_reasoning_steps("A\nB"), ["A", "B"]);
        assert_eq!(split_reasoning_steps("A\nB\n\n"), ["A", "B"]);
        // once blank lines exist, single newlines stay inside a step
        assert_eq!(split_reasoning_steps("A\nB\n\nC"), ["A\nB", "C"]);
    }

    #[test]
    fn no_delimiter() {
        assert_eq!(split_reasoning_steps("A"), ["A"]);
        assert!(split_reasoning_steps(" \n\n ").is_empty());
    }

    #[test]
    fn min_aggregation() {
        assert_eq!(min_step_score(&[0.9, 0.8, 0.1]), Some(0.1));
        assert_eq!(min_step_score(&[0.7]), Some(0.7));
        assert_eq!(min_step_score(&[1.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(min_step_score(&[]), None);
    }

    proptest! {
        #[test]
        fn steps_are_nonempty_and_keep_content(text in "[a-c \n]{0,40}") {
            let steps = split_reasoning_steps(&text);
            prop_assert!(steps.iter().all(|s| !s.trim().is_empty()));
            let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(squash(&steps.join("\n\n")), squash(&text));
        }
    }
}
