//! Code quality from a reviewer's verdict and revision.
//!
//! The score is the normalized line-level Levenshtein similarity between
//! the original snippet and the reviewer's revision, halved when the
//! original is judged incorrect.

use serde::{Deserialize, Serialize};

use super::{QualityDetail, QualityScore, QualityScorer};

/// Parsed reply of a code reviewer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeReview {
    pub correct: bool,
    pub has_code: bool,
    pub original_lines: Vec<String>,
    pub revised_lines: Vec<String>,
    pub review_text: String,
}

const NO_CODE: &str = "no code";
const NO_REVISION: &str = "no revision";

fn is_marker(text: &str, marker: &str) -> bool {
    let t = text.trim().trim_matches(|c| c == '"' || c == '.' || c == '\'');
    t.eq_ignore_ascii_case(marker)
}

/// Splits a snippet into lines with trailing whitespace removed. Leading
/// indentation is kept. A single enclosing markdown fence and leading or
/// trailing blank lines are dropped.
pub fn code_lines(code: &str) -> Vec<String> {
    let mut lines: Vec<String> = code.lines().map(|l| l.trim_end().to_string()).collect();
    if lines.len() >= 2
        && lines.first().is_some_and(|l| l.trim_start().starts_with("```"))
        && lines.last().is_some_and(|l| l.trim() == "```")
    {
        lines.pop();
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let lead = lines.iter().take_while(|l| l.is_empty()).count();
    lines.drain(..lead);
    lines
}

impl CodeReview {
    /// Builds a review from the four reply fields. Returns `None` when the
    /// verdict is neither correct nor incorrect.
    pub fn from_fields(review: &str, verdict: &str, original: &str, revision: &str) -> Option<Self> {
        let correct = match verdict.trim().trim_matches(|c| c == '\'' || c == '"').to_ascii_lowercase().as_str() {
            "correct" => true,
            "incorrect" => false,
            _ => return None,
        };
        if is_marker(original, NO_CODE) {
            return Some(Self {
                correct,
                has_code: false,
                original_lines: Vec::new(),
                revised_lines: Vec::new(),
                review_text: review.to_string(),
            });
        }
        let original_lines = code_lines(original);
        let revised_lines = if is_marker(revision, NO_REVISION) {
            original_lines.clone()
        } else {
            code_lines(revision)
        };
        Some(Self {
            correct,
            has_code: true,
            original_lines,
            revised_lines,
            review_text: review.to_string(),
        })
    }
}

/// Unit-cost edit distance where each whole line is one symbol. Lines are
/// compared after stripping trailing whitespace.
pub fn line_lev<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> usize {
    let a: Vec<&str> = a.iter().map(|l| l.as_ref().trim_end()).collect();
    let b: Vec<&str> = b.iter().map(|l| l.as_ref().trim_end()).collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, la) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, lb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(la != lb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(max(n, m) - lev) / max(n, m)`; 1.0 for two empty snippets.
pub fn normalized_line_similarity<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    (longest - line_lev(a, b)) as f64 / longest as f64
}

pub fn score_code(review: &CodeReview) -> QualityScore {
    let (n, m) = (review.original_lines.len(), review.revised_lines.len());
    let has_code = review.has_code && (n > 0 || m > 0);
    let (value, lev, nls) = if has_code {
        let lev = line_lev(&review.original_lines, &review.revised_lines);
        let nls = normalized_line_similarity(&review.original_lines, &review.revised_lines);
        (if review.correct { nls } else { nls / 2.0 }, Some(lev), Some(nls))
    } else if review.correct {
        (0.5, None, None)
    } else {
        (0.0, None, None)
    };
    QualityScore {
        value,
        scorer: QualityScorer::Code,
        detail: QualityDetail::Code {
            correct: review.correct,
            has_code,
            original_lines: n,
            revised_lines: m,
            lev,
            nls,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn review(correct: bool, orig: &[&str], rev: &[&str]) -> CodeReview {
        CodeReview {
            correct,
            has_code: true,
            original_lines: lines(orig),
            revised_lines: lines(rev),
            review_text: String::new(),
        }
    }

    #[test]
    fn lev_examples() {
        assert_eq!(line_lev(&["x", "y"], &["x", "y"]), 0);
        assert_eq!(line_lev(&["x", "y", "z", "w"], &["x", "Q", "z", "w"]), 1);
        assert_eq!(line_lev::<&str, &str>(&[], &["a", "b"]), 2);
        assert_eq!(line_lev(&["a", "b"], &[] as &[&str]), 2);
        assert_eq!(line_lev(&["kitten"], &["sitting"]), 1);
    }

    #[test]
    fn trailing_whitespace_ignored_indentation_kept() {
        assert_eq!(line_lev(&["x = 1  \t"], &["x = 1"]), 0);
        assert_eq!(line_lev(&["    return x"], &["return x"]), 1);
    }

    #[test]
    fn code_rule_table() {
        let four = ["a", "b", "c", "d"];
        assert_eq!(score_code(&review(true, &four, &four)).value, 1.0);
        assert_eq!(score_code(&review(false, &four, &four)).value, 0.5);
        assert_eq!(score_code(&review(true, &four, &["a", "B", "c", "d"])).value, 0.75);
        assert_eq!(score_code(&review(false, &four, &["a", "B", "c", "d"])).value, 0.375);
        let no_code = |correct| CodeReview {
            correct,
            has_code: false,
            original_lines: vec![],
            revised_lines: vec![],
            review_text: String::new(),
        };
        assert_eq!(score_code(&no_code(true)).value, 0.5);
        assert_eq!(score_code(&no_code(false)).value, 0.0);
    }

    #[test]
    fn degenerate_empty_code_counts_as_no_code() {
        assert_eq!(score_code(&review(true, &[], &[])).value, 0.5);
        assert_eq!(score_code(&review(false, &[], &[])).value, 0.0);
    }

    #[test]
    fn review_fields() {
        let r = CodeReview::from_fields("fine", "correct", "def f():\n    return 1\n", "no revision").unwrap();
        assert!(r.correct && r.has_code);
        assert_eq!(r.revised_lines, r.original_lines);
        assert_eq!(r.original_lines, ["def f():", "    return 1"]);

        let r = CodeReview::from_fields("", "incorrect", "no code", "no revision").unwrap();
        assert!(!r.has_code && r.original_lines.is_empty());

        let r = CodeReview::from_fields("", "Correct", "```python\nx = 1\n```", "\"no revision\"").unwrap();
        assert_eq!(r.original_lines, ["x = 1"]);
        assert!(CodeReview::from_fields("", "maybe", "x", "y").is_none());
    }

    proptest! {
        #[test]
        fn nls_bounds_and_halving(
            a in prop::collection::vec("[xyz] ?", 0..8),
            b in prop::collection::vec("[xyz] ?", 0..8),
        ) {
            let nls = normalized_line_similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&nls));
            let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.trim_end() == y.trim_end());
            prop_assert_eq!(nls == 1.0, same);
            prop_assert_eq!(line_lev(&a, &b), line_lev(&b, &a));
            if !a.is_empty() || !b.is_empty() {
                let good = score_code(&CodeReview { correct: true, has_code: true, original_lines: a.clone(), revised_lines: b.clone(), review_text: String::new() });
                let bad = score_code(&CodeReview { correct: false, has_code: true, original_lines: a, revised_lines: b, review_text: String::new() });
                prop_assert_eq!(bad.value, good.value / 2.0);
            }
        }
    }
}
