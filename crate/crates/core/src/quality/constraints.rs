//! Verifiable-constraint scoring for instruction following.
//!
//! An annotator labels spans of the instruction with a constraint type.
//! Spans of the heuristic types are parsed into parameters and checked
//! locally against the response; everything else (and any span the parser
//! cannot read) is put to an LLM judge as a yes/no question.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{QualityDetail, QualityScore, QualityScorer};
use crate::error::{Error, Result};
use crate::gateway::Gateway;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintType {
    LetterCase,
    PlaceholderAndPostscript,
    RepeatPrompt,
    OutputCombination,
    ChooseOutput,
    OutputFormat,
    KeywordIncluded,
    KeywordAvoided,
    KeywordFrequency,
    Language,
    Length,
    Punctuation,
    StartAndEnding,
    WritingStyle,
    WritingType,
    Topic,
}

impl ConstraintType {
    pub const ALL: [ConstraintType; 16] = [
        ConstraintType::LetterCase,
        ConstraintType::PlaceholderAndPostscript,
        ConstraintType::RepeatPrompt,
        ConstraintType::OutputCombination,
        ConstraintType::ChooseOutput,
        ConstraintType::OutputFormat,
        ConstraintType::KeywordIncluded,
        ConstraintType::KeywordAvoided,
        ConstraintType::KeywordFrequency,
        ConstraintType::Language,
        ConstraintType::Length,
        ConstraintType::Punctuation,
        ConstraintType::StartAndEnding,
        ConstraintType::WritingStyle,
        ConstraintType::WritingType,
        ConstraintType::Topic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintType::LetterCase => "letter_case",
            ConstraintType::PlaceholderAndPostscript => "placeholder_and_postscript",
            ConstraintType::RepeatPrompt => "repeat_prompt",
            ConstraintType::OutputCombination => "output_combination",
            ConstraintType::ChooseOutput => "choose_output",
            ConstraintType::OutputFormat => "output_format",
            ConstraintType::KeywordIncluded => "keyword_included",
            ConstraintType::KeywordAvoided => "keyword_avoided",
            ConstraintType::KeywordFrequency => "keyword_frequency",
            ConstraintType::Language => "language",
            ConstraintType::Length => "length",
            ConstraintType::Punctuation => "punctuation",
            ConstraintType::StartAndEnding => "start_and_ending",
            ConstraintType::WritingStyle => "writing_style",
            ConstraintType::WritingType => "writing_type",
            ConstraintType::Topic => "topic",
        }
    }

    /// Types with a local checker.
    pub fn is_heuristic(self) -> bool {
        matches!(
            self,
            ConstraintType::Length
                | ConstraintType::LetterCase
                | ConstraintType::Punctuation
                | ConstraintType::KeywordIncluded
                | ConstraintType::KeywordAvoided
                | ConstraintType::KeywordFrequency
                | ConstraintType::StartAndEnding
        )
    }
}

impl fmt::Display for ConstraintType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConstraintType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        ConstraintType::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| Error::Format(format!("unknown constraint type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "==")]
    Exactly,
    #[serde(rename = ">")]
    MoreThan,
    #[serde(rename = "<")]
    LessThan,
}

impl Comparator {
    pub fn holds(self, actual: usize, n: usize) -> bool {
        match self {
            Comparator::AtLeast => actual >= n,
            Comparator::AtMost => actual <= n,
            Comparator::Exactly => actual == n,
            Comparator::MoreThan => actual > n,
            Comparator::LessThan => actual < n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    Words,
    Sentences,
    Paragraphs,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyTarget {
    Letter(char),
    Word(String),
    Hashtags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseRule {
    Lowercase,
    Uppercase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PunctuationRule {
    NoCommas,
    NoExclamation,
    WrapInQuotes,
}

/// Parameters the local checkers need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum ConstraintParams {
    Length {
        unit: LengthUnit,
        cmp: Comparator,
        n: usize,
    },
    Keywords {
        keywords: Vec<String>,
    },
    Frequency {
        target: FrequencyTarget,
        cmp: Comparator,
        n: usize,
    },
    LetterCase {
        case: CaseRule,
    },
    Punctuation {
        rule: PunctuationRule,
    },
    StartEnd {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        end: Option<String>,
    },
}

/// A (span, type) pair from the annotator, plus parsed parameters when the
/// type has a local checker and the span could be read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub span: String,
    pub ctype: ConstraintType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ConstraintParams>,
}

impl Constraint {
    pub fn new(span: impl Into<String>, ctype: ConstraintType) -> Self {
        Self {
            span: span.into(),
            ctype,
            params: None,
        }
    }

    /// Verified locally iff parameters were parsed.
    pub fn is_heuristic(&self) -> bool {
        self.ctype.is_heuristic() && self.params.is_some()
    }

    /// Yes/no question for the judge.
    pub fn judge_question(&self) -> String {
        format!(
            "Does the following text follow the [{}] constraint of [{}]?",
            self.ctype.as_str().replace('_', " "),
            self.span
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Heuristic,
    Judge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckedConstraint {
    #[serde(flatten)]
    pub constraint: Constraint,
    pub satisfied: bool,
    pub checked_by: CheckMethod,
}

/// Expressed constraints with their verification outcome; the verified
/// set is the satisfied subset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub constraints: Vec<CheckedConstraint>,
}

impl ConstraintSet {
    pub fn n_exp(&self) -> usize {
        self.constraints.len()
    }

    pub fn n_true(&self) -> usize {
        self.verified().count()
    }

    pub fn verified(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints
            .iter()
            .filter(|c| c.satisfied)
            .map(|c| &c.constraint)
    }
}

/// `n_true * (n_true / n_exp)`: the satisfied fraction weighted by how
/// many constraints were satisfied.
pub fn if_score(n_true: usize, n_exp: usize) -> Result<f64> {
    if n_exp == 0 || n_true > n_exp {
        return Err(Error::precondition(format!(
            "invalid constraint counts n_true={n_true} n_exp={n_exp}"
        )));
    }
    let t = n_true as f64;
    Ok(t * (t / n_exp as f64))
}

// ---------------------------------------------------------------------------
// span parsing

const NUMBER: &str = r"(\d[\d,]*|zero|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|thirteen|fourteen|fifteen|sixteen|seventeen|eighteen|nineteen|twenty|thirty|forty|fifty|sixty|seventy|eighty|ninety|hundred|a hundred|once|twice|thrice)";

const PRE_CMP: &str = r"(at least|no less than|not less than|no fewer than|a minimum of|minimum of|more than|greater than|over|at most|no more than|not more than|a maximum of|maximum of|up to|less than|fewer than|under|exactly|precisely)?";

const POST_CMP: &str = r"(or more|or fewer|or less|\+)?";

fn parse_number(s: &str) -> Option<usize> {
    let s = s.trim();
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        return s.replace(',', "").parse().ok();
    }
    Some(match s {
        "zero" => 0,
        "one" | "once" => 1,
        "two" | "twice" => 2,
        "three" | "thrice" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        "eleven" => 11,
        "twelve" => 12,
        "thirteen" => 13,
        "fourteen" => 14,
        "fifteen" => 15,
        "sixteen" => 16,
        "seventeen" => 17,
        "eighteen" => 18,
        "nineteen" => 19,
        "twenty" => 20,
        "thirty" => 30,
        "forty" => 40,
        "fifty" => 50,
        "sixty" => 60,
        "seventy" => 70,
        "eighty" => 80,
        "ninety" => 90,
        "hundred" | "a hundred" => 100,
        _ => return None,
    })
}

fn comparator(pre: Option<&str>, post: Option<&str>, default: Comparator) -> Comparator {
    match post.map(str::trim) {
        Some("or more") | Some("+") => return Comparator::AtLeast,
        Some("or fewer") | Some("or less") => return Comparator::AtMost,
        _ => {}
    }
    match pre.map(str::trim) {
        Some("at least" | "no less than" | "not less than" | "no fewer than" | "a minimum of" | "minimum of") => {
            Comparator::AtLeast
        }
        Some("more than" | "greater than" | "over") => Comparator::MoreThan,
        Some("at most" | "no more than" | "not more than" | "a maximum of" | "maximum of" | "up to") => {
            Comparator::AtMost
        }
        Some("less than" | "fewer than" | "under") => Comparator::LessThan,
        Some("exactly" | "precisely") => Comparator::Exactly,
        _ => default,
    }
}

fn length_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"{PRE_CMP}\s*{NUMBER}\s*{POST_CMP}[\s-]*(words?|sentences?|paragraphs?)\b\s*{POST_CMP}"
        ))
        .unwrap()
    })
}

fn count_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r"{PRE_CMP}\s*\b{NUMBER}\b\s*{POST_CMP}\s*(?:times?)?\s*{POST_CMP}")).unwrap()
    })
}

fn hashtag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"{PRE_CMP}\s*{NUMBER}\s*{POST_CMP}\s*hashtags?")).unwrap())
}

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"letter\s+["'‘“]?([[:alpha:]])["'’”]?"#).unwrap())
}

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#""([^"]+)"|“([^”]+)”|‘([^’]+)’|(?:^|[\s(\[:])'([^']+)'(?:$|[\s,.;:!?)\]])"#).unwrap()
    })
}

/// Quoted substrings, in order, with their byte offsets.
fn quoted(span: &str) -> Vec<(usize, String)> {
    quoted_re()
        .captures_iter(span)
        .filter_map(|c| {
            (1..=4)
                .find_map(|i| c.get(i))
                .map(|m| (m.start(), m.as_str().trim().to_string()))
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

fn keywords_from_span(span: &str) -> Vec<String> {
    let quotes = quoted(span);
    if !quotes.is_empty() {
        return quotes.into_iter().map(|(_, s)| s.to_lowercase()).collect();
    }
    const CUES: [&str; 14] = [
        "keywords", "keyword", "words", "word", "terms", "term", "phrase", "mention", "including", "include",
        "using", "use", "containing", "contain",
    ];
    let lower = span.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    let Some(pos) = tokens.iter().rposition(|t| CUES.contains(&t.trim_matches(|c: char| !c.is_alphanumeric()))) else {
        return Vec::new();
    };
    let rest = tokens[pos + 1..].join(" ");
    rest.split([',', ';'])
        .flat_map(|s| s.split(" and "))
        .flat_map(|s| s.split(" or "))
        .map(|s| {
            s.trim()
                .trim_start_matches("the ")
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_length(span: &str) -> Option<ConstraintParams> {
    let lower = span.to_lowercase();
    let caps = length_re().captures(&lower)?;
    let n = parse_number(caps.get(2)?.as_str())?;
    let post = caps.get(3).or_else(|| caps.get(5)).map(|m| m.as_str());
    let cmp = comparator(caps.get(1).map(|m| m.as_str()), post, Comparator::Exactly);
    let unit = match caps.get(4)?.as_str().trim_end_matches('s') {
        "word" => LengthUnit::Words,
        "sentence" => LengthUnit::Sentences,
        _ => LengthUnit::Paragraphs,
    };
    Some(ConstraintParams::Length { unit, cmp, n })
}

fn parse_count(text: &str) -> Option<(Comparator, usize)> {
    let caps = count_re().captures(text)?;
    let n = parse_number(caps.get(2)?.as_str())?;
    let post = caps.get(3).or_else(|| caps.get(4)).map(|m| m.as_str());
    // frequency spans without a comparator ("'but' two times") read as a floor
    Some((comparator(caps.get(1).map(|m| m.as_str()), post, Comparator::AtLeast), n))
}

fn parse_frequency(span: &str) -> Option<ConstraintParams> {
    let lower = span.to_lowercase();
    if let Some(caps) = hashtag_re().captures(&lower) {
        let n = parse_number(caps.get(2)?.as_str())?;
        let cmp = comparator(caps.get(1).map(|m| m.as_str()), caps.get(3).map(|m| m.as_str()), Comparator::AtLeast);
        return Some(ConstraintParams::Frequency {
            target: FrequencyTarget::Hashtags,
            cmp,
            n,
        });
    }
    if let Some(caps) = letter_re().captures(span) {
        let m = caps.get(1)?;
        let letter = m.as_str().chars().next()?.to_lowercase().next()?;
        let (cmp, n) = parse_count(&lower[m.end()..])?;
        return Some(ConstraintParams::Frequency {
            target: FrequencyTarget::Letter(letter),
            cmp,
            n,
        });
    }
    let quotes = quoted(span);
    let (start, word) = quotes.into_iter().next()?;
    // search for the count after the quoted word (and its closing quote)
    let after = lower.get(start + word.len()..).unwrap_or("");
    let (cmp, n) = parse_count(after.trim_start_matches(|c: char| !c.is_whitespace() && !c.is_alphanumeric()))?;
    Some(ConstraintParams::Frequency {
        target: FrequencyTarget::Word(word.to_lowercase()),
        cmp,
        n,
    })
}

fn parse_letter_case(span: &str) -> Option<ConstraintParams> {
    let lower = span.to_lowercase();
    let has = |xs: &[&str]| xs.iter().any(|x| lower.contains(x));
    let case = if has(&["lowercase", "lower case", "lower-case", "small letters", "no capital"]) {
        CaseRule::Lowercase
    } else if has(&["all capital", "uppercase", "upper case", "upper-case", "all caps", "capital letters", "capitalized"]) {
        CaseRule::Uppercase
    } else {
        return None;
    };
    Some(ConstraintParams::LetterCase { case })
}

fn parse_punctuation(span: &str) -> Option<ConstraintParams> {
    let lower = span.to_lowercase();
    let negated = ["no ", "without", "avoid", "not ", "don't", "do not", "never", "refrain"]
        .iter()
        .any(|n| lower.contains(n));
    let rule = if lower.contains("comma") && negated {
        PunctuationRule::NoCommas
    } else if lower.contains("exclamation") && negated {
        PunctuationRule::NoExclamation
    } else if lower.contains("quotation") || lower.contains("double quote") || lower.contains("in quotes") {
        PunctuationRule::WrapInQuotes
    } else {
        return None;
    };
    Some(ConstraintParams::Punctuation { rule })
}

fn parse_start_end(span: &str) -> Option<ConstraintParams> {
    let lower = span.to_lowercase();
    let quotes = quoted(span);
    if quotes.is_empty() {
        return None;
    }
    let cue = |words: &[&str]| words.iter().filter_map(|w| lower.find(w)).min();
    let start_cue = cue(&["start", "begin", "open"]);
    let end_cue = cue(&["end", "finish", "conclude", "close"]);
    let first_after = |pos: Option<usize>, other: Option<usize>| {
        let pos = pos?;
        quotes
            .iter()
            .filter(|(at, _)| *at > pos)
            // a quote belongs to the nearest preceding cue
            .find(|(at, _)| other.is_none_or(|o| o < pos || o > *at))
            .map(|(_, s)| s.clone())
    };
    let start = first_after(start_cue, end_cue);
    let end = first_after(end_cue, start_cue);
    if start.is_none() && end.is_none() {
        return None;
    }
    Some(ConstraintParams::StartEnd { start, end })
}

/// Fills in `params` for heuristic types when the span can be read;
/// otherwise leaves them empty so the constraint goes to the judge.
pub fn parse_constraint_params(mut c: Constraint) -> Constraint {
    c.params = match c.ctype {
        ConstraintType::Length => parse_length(&c.span),
        ConstraintType::KeywordIncluded | ConstraintType::KeywordAvoided => {
            let keywords = keywords_from_span(&c.span);
            (!keywords.is_empty()).then_some(ConstraintParams::Keywords { keywords })
        }
        ConstraintType::KeywordFrequency => parse_frequency(&c.span),
        ConstraintType::LetterCase => parse_letter_case(&c.span),
        ConstraintType::Punctuation => parse_punctuation(&c.span),
        ConstraintType::StartAndEnding => parse_start_end(&c.span),
        _ => None,
    };
    c
}

// ---------------------------------------------------------------------------
// local checkers

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn sentence_end() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]+(?:\s+|$)").unwrap())
}

/// Segments terminated by `.`, `!` or `?` followed by whitespace or the
/// end of text; a non-empty unterminated tail also counts.
pub fn sentence_count(text: &str) -> usize {
    sentence_end()
        .split(text)
        .filter(|s| !s.trim().is_empty())
        .count()
}

/// Blocks separated by blank lines.
pub fn paragraph_count(text: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\n(?:[ \t]*\n)+").unwrap());
    re.split(&text.replace("\r\n", "\n"))
        .filter(|s| !s.trim().is_empty())
        .count()
}

/// Whole-word occurrences of `needle` in `haystack`, case-insensitive.
/// Word boundaries are transitions to non-alphanumeric characters, so
/// "sleep" does not match inside "sleeping".
pub fn count_word(haystack: &str, needle: &str) -> usize {
    let hay = haystack.to_lowercase();
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return 0;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    hay.match_indices(&needle)
        .filter(|(at, m)| {
            let before = hay[..*at].chars().next_back();
            let after = hay[at + m.len()..].chars().next();
            !before.is_some_and(is_word) && !after.is_some_and(is_word)
        })
        .count()
}

/// `Some(satisfied)` for constraints with a local checker, `None` when the
/// constraint must go to the judge.
pub fn verify_heuristic(c: &Constraint, response: &str) -> Option<bool> {
    if !c.ctype.is_heuristic() {
        return None;
    }
    let params = c.params.as_ref()?;
    Some(match params {
        ConstraintParams::Length { unit, cmp, n } => {
            let actual = match unit {
                LengthUnit::Words => word_count(response),
                LengthUnit::Sentences => sentence_count(response),
                LengthUnit::Paragraphs => paragraph_count(response),
            };
            cmp.holds(actual, *n)
        }
        ConstraintParams::Keywords { keywords } => {
            let present = |k: &String| count_word(response, k) > 0;
            match c.ctype {
                ConstraintType::KeywordAvoided => !keywords.iter().any(present),
                _ => keywords.iter().all(present),
            }
        }
        ConstraintParams::Frequency { target, cmp, n } => {
            let actual = match target {
                FrequencyTarget::Letter(ch) => response
                    .chars()
                    .flat_map(char::to_lowercase)
                    .filter(|x| x == ch)
                    .count(),
                FrequencyTarget::Word(w) => count_word(response, w),
                FrequencyTarget::Hashtags => response
                    .split_whitespace()
                    .filter(|t| t.len() > 1 && t.starts_with('#'))
                    .count(),
            };
            cmp.holds(actual, *n)
        }
        ConstraintParams::LetterCase { case } => {
            let has_cased = response.chars().any(|c| c.is_lowercase() || c.is_uppercase());
            has_cased
                && match case {
                    CaseRule::Lowercase => !response.chars().any(char::is_uppercase),
                    CaseRule::Uppercase => !response.chars().any(char::is_lowercase),
                }
        }
        ConstraintParams::Punctuation { rule } => match rule {
            PunctuationRule::NoCommas => !response.contains([',', '，', '、']),
            PunctuationRule::NoExclamation => !response.contains(['!', '！']),
            PunctuationRule::WrapInQuotes => {
                let t = response.trim();
                t.chars().count() > 1 && t.starts_with('"') && t.ends_with('"')
            }
        },
        ConstraintParams::StartEnd { start, end } => {
            let text = response.trim().to_lowercase();
            start.as_ref().is_none_or(|s| text.starts_with(&s.to_lowercase()))
                && end.as_ref().is_none_or(|e| text.ends_with(&e.to_lowercase()))
        }
    })
}

/// Checks every expressed constraint, using the judge for the ones without
/// a local checker.
pub fn check_constraints(
    gateway: &Gateway,
    constraints: Vec<Constraint>,
    response: &str,
) -> Result<ConstraintSet> {
    let mut checked: Vec<Option<CheckedConstraint>> = Vec::with_capacity(constraints.len());
    let mut pending = Vec::new();
    for (i, c) in constraints.iter().enumerate() {
        match verify_heuristic(c, response) {
            Some(satisfied) => checked.push(Some(CheckedConstraint {
                constraint: c.clone(),
                satisfied,
                checked_by: CheckMethod::Heuristic,
            })),
            None => {
                checked.push(None);
                pending.push(i);
            }
        }
    }
    if !pending.is_empty() {
        let questions: Vec<String> = pending.iter().map(|&i| constraints[i].judge_question()).collect();
        let answers = gateway.judge_bool(&questions, response)?;
        for (q, &i) in pending.iter().enumerate() {
            checked[i] = Some(CheckedConstraint {
                constraint: constraints[i].clone(),
                satisfied: answers[q],
                checked_by: CheckMethod::Judge,
            });
        }
    }
    Ok(ConstraintSet {
        constraints: checked.into_iter().map(|c| c.expect("every constraint checked")).collect(),
    })
}

pub fn score_iffollow(gateway: &Gateway, instruction: &str, response: &str) -> Result<QualityScore> {
    let expressed: Vec<Constraint> = gateway
        .annotate_constraints(instruction)?
        .into_iter()
        .filter_map(|(span, kind)| match kind.parse::<ConstraintType>() {
            Ok(ctype) => Some(parse_constraint_params(Constraint::new(span, ctype))),
            Err(_) => {
                tracing::warn!(%span, %kind, "ignoring unknown constraint type");
                None
            }
        })
        .collect();
    if expressed.is_empty() {
        let judge = gateway.judge_overall(instruction, response)?;
        return Ok(QualityScore {
            value: f64::from(judge) / 10.0,
            scorer: QualityScorer::IfFollow,
            detail: QualityDetail::IfFollow {
                constraints: ConstraintSet::default(),
                judge_score: Some(judge),
            },
        });
    }
    let set = check_constraints(gateway, expressed, response)?;
    Ok(QualityScore {
        value: if_score(set.n_true(), set.n_exp())?,
        scorer: QualityScorer::IfFollow,
        detail: QualityDetail::IfFollow {
            constraints: set,
            judge_score: None,
        },
    })
}
