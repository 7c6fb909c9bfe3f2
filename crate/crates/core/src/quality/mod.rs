//! Category-specific response quality.
//!
//! | category                               | scorer                      |
//! |----------------------------------------|-----------------------------|
//! | Math                                   | weakest PRM step            |
//! | Coding                                 | review + line similarity    |
//! | Generation, Brainstorming              | verifiable constraints      |
//! | Reasoning, FactualQA, Extraction       | deita quality passthrough   |
//!
//! Raw values live on different scales; they are normalized per scorer in
//! [`crate::preference`].

pub mod code;
pub mod constraints;
pub mod steps;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use code::{line_lev, normalized_line_similarity, score_code, CodeReview};
pub use constraints::{
    if_score, parse_constraint_params, score_iffollow, verify_heuristic, Constraint, ConstraintSet, ConstraintType,
};
pub use steps::{score_math, split_reasoning_steps};

use crate::classifier::CategoryLabel;
use crate::corpus::Turn;
use crate::error::{Error, Result};
use crate::gateway::Gateway;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityScorer {
    Math,
    Code,
    #[serde(rename = "iffollow")]
    IfFollow,
    Deita,
}

impl QualityScorer {
    pub const ALL: [QualityScorer; 4] = [
        QualityScorer::Math,
        QualityScorer::Code,
        QualityScorer::IfFollow,
        QualityScorer::Deita,
    ];

    pub fn for_category(category: CategoryLabel) -> Self {
        match category {
            CategoryLabel::Math => QualityScorer::Math,
            CategoryLabel::Coding => QualityScorer::Code,
            CategoryLabel::Generation | CategoryLabel::Brainstorming => QualityScorer::IfFollow,
            CategoryLabel::Reasoning | CategoryLabel::FactualQA | CategoryLabel::Extraction => QualityScorer::Deita,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QualityScorer::Math => "math",
            QualityScorer::Code => "code",
            QualityScorer::IfFollow => "iffollow",
            QualityScorer::Deita => "deita",
        }
    }
}

impl fmt::Display for QualityScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QualityScorer::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown quality scorer `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QualityDetail {
    Math {
        step_scores: Vec<f64>,
    },
    Code {
        correct: bool,
        has_code: bool,
        original_lines: usize,
        revised_lines: usize,
        lev: Option<usize>,
        nls: Option<f64>,
    },
    IfFollow {
        constraints: ConstraintSet,
        judge_score: Option<u8>,
    },
    Deita,
}

/// Raw (pre-normalization) quality of one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub scorer: QualityScorer,
    pub detail: QualityDetail,
}

pub fn score_deita_quality(gateway: &Gateway, turns: &[Turn]) -> Result<QualityScore> {
    Ok(QualityScore {
        value: gateway.score_deita_quality(turns)?,
        scorer: QualityScorer::Deita,
        detail: QualityDetail::Deita,
    })
}

/// Scores one exchange with the scorer its category calls for.
pub fn score_turn_quality(
    gateway: &Gateway,
    category: CategoryLabel,
    instruction: &str,
    response: &str,
) -> Result<QualityScore> {
    match QualityScorer::for_category(category) {
        QualityScorer::Math => score_math(gateway, instruction, response),
        QualityScorer::Code => Ok(score_code(&gateway.review_code(instruction, response)?)),
        QualityScorer::IfFollow => score_iffollow(gateway, instruction, response),
        QualityScorer::Deita => score_deita_quality(gateway, &[Turn::user(instruction), Turn::assistant(response)]),
    }
}
