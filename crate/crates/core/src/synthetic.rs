//! Seeded synthetic conversations for tests, benchmarks and dry runs.
//!
//! Each category draws from its own templates and vocabulary, so a head
//! trained on [`seed_set`] separates them reasonably even with the mock
//! embedder.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{CategoryLabel, LabeledSeedSet, SeedExample};
use crate::corpus::{Conversation, Turn};
use crate::error::Result;
use crate::io::JsonlWriter;

const TOPICS: [&str; 12] = [
    "autumn", "the ocean", "a lighthouse", "city traffic", "a lost key", "friendship", "mountains", "coffee",
    "a rainy morning", "old libraries", "trains", "the night sky",
];
const FORMS: [&str; 5] = ["poem", "short story", "blog post", "letter", "product description"];
const TASKS: [&str; 8] = [
    "reverses a string",
    "returns the n-th Fibonacci number",
    "checks whether a number is prime",
    "counts the vowels in a string",
    "merges two sorted lists",
    "removes duplicates from a list",
    "computes the factorial of n",
    "flattens a nested list",
];
const COUNTRIES: [(&str, &str); 8] = [
    ("France", "Paris"),
    ("Japan", "Tokyo"),
    ("Kenya", "Nairobi"),
    ("Peru", "Lima"),
    ("Norway", "Oslo"),
    ("Egypt", "Cairo"),
    ("Canada", "Ottawa"),
    ("Vietnam", "Hanoi"),
];
const NAMES: [&str; 8] = ["Alice", "Bob", "Chen", "Dana", "Emil", "Fatima", "Goran", "Hiro"];
const FILLER: [&str; 16] = [
    "light", "quiet", "window", "river", "morning", "stone", "voice", "garden", "shadow", "warm", "slowly", "bright",
    "open", "field", "dream", "road",
];

fn prose(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut out = Vec::with_capacity(words);
    for i in 0..words {
        let w = *FILLER.choose(rng).expect("non-empty");
        out.push(if i % 12 == 11 { format!("{w}.") } else { w.to_string() });
    }
    out.join(" ")
}

fn exchange(rng: &mut ChaCha8Rng, l: CategoryLabel) -> (String, String) {
    match l {
        CategoryLabel::Math => {
            let (a, x, b) = (rng.random_range(2..10), rng.random_range(1..20), rng.random_range(1..50));
            let c = a * x + b;
            (
                format!("Solve for x: {a}x + {b} = {c}. Show each step of the equation."),
                format!(
                    "Step 1: Subtract {b} from both sides to get {a}x = {}.\nStep 2: Divide both sides by {a}.\nStep 3: Therefore x = {x}.",
                    c - b
                ),
            )
        }
        CategoryLabel::Coding => {
            let task = *TASKS.choose(rng).expect("non-empty");
            let body = rng.random_range(2..6);
            let mut code = String::from("def solve(x):\n");
            for i in 0..body {
                code.push_str(&format!("    step_{i} = x\n"));
            }
            code.push_str("    return x\n");
            (
                format!("Write a Python function that {task}. Include code."),
                format!("Here is a function:\n\n```python\n{code}```\n\nIt runs in linear time."),
            )
        }
        CategoryLabel::Generation => {
            let (form, topic) = (*FORMS.choose(rng).expect("non-empty"), *TOPICS.choose(rng).expect("non-empty"));
            let n = rng.random_range(2..8) * 10;
            let words = rng.random_range(n - 10..n + 30);
            (
                format!("Write a {form} about {topic} in at least {n} words."),
                prose(rng, words),
            )
        }
        CategoryLabel::Reasoning => {
            let (p, q) = (*NAMES.choose(rng).expect("non-empty"), *NAMES.choose(rng).expect("non-empty"));
            let (a, b) = (rng.random_range(3..30), rng.random_range(3..30));
            (
                format!(
                    "{p} is older than {q} by {a} years and {q} is {b} years old. If the statement is true, what can we deduce about {p}'s age? Explain the logic."
                ),
                format!("Since {q} is {b}, and {p} is {a} years older, {p} must be {}. The inference follows directly.", a + b),
            )
        }
        CategoryLabel::Brainstorming => {
            let topic = *TOPICS.choose(rng).expect("non-empty");
            let n = rng.random_range(3..7);
            let ideas: Vec<String> = (1..=n).map(|i| format!("{i}. {}", prose(rng, 5))).collect();
            (
                format!("Brainstorm {n} creative ideas for a weekend project about {topic}."),
                ideas.join("\n"),
            )
        }
        CategoryLabel::FactualQA => {
            let (country, capital) = *COUNTRIES.choose(rng).expect("non-empty");
            (
                format!("What is the capital city of {country}?"),
                format!("The capital city of {country} is {capital}."),
            )
        }
        CategoryLabel::Extraction => {
            let name = *NAMES.choose(rng).expect("non-empty");
            let (d, m) = (rng.random_range(1..29), rng.random_range(1..13));
            (
                format!(
                    "Extract every person name and date from this passage: \"{name} signed the lease on 2023-{m:02}-{d:02} in the downtown office.\""
                ),
                format!("Names: {name}\nDates: 2023-{m:02}-{d:02}"),
            )
        }
    }
}

/// `n` conversations with ids `syn-00000...`, categories spread uniformly at
/// random; about one in five has two exchanges. Records carry no category.
pub fn corpus(n: usize, seed: u64) -> Vec<Conversation> {
    labeled_corpus(n, seed).into_iter().map(|(c, _)| c).collect()
}

/// Like [`corpus`], paired with the category each item was generated from.
pub fn labeled_corpus(n: usize, seed: u64) -> Vec<(Conversation, CategoryLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let l = CategoryLabel::ALL[rng.random_range(0..CategoryLabel::COUNT)];
            let exchanges = if rng.random_bool(0.2) { 2 } else { 1 };
            let mut turns = Vec::new();
            for _ in 0..exchanges {
                let (u, a) = exchange(&mut rng, l);
                turns.push(Turn::user(u));
                turns.push(Turn::assistant(a));
            }
            let dataset = ["alpha", "beta", "gamma"][i % 3];
            (Conversation::new(format!("syn-{i:05}"), dataset, turns).expect("well-formed"), l)
        })
        .collect()
}

/// `per_class` single-exchange examples per category.
pub fn seed_set(per_class: usize, seed: u64) -> LabeledSeedSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    for l in CategoryLabel::ALL {
        for _ in 0..per_class {
            let (u, _) = exchange(&mut rng, l);
            examples.push(SeedExample { text: u, label: l });
        }
    }
    LabeledSeedSet::new(examples)
}

/// Writes a seed set in the format [`LabeledSeedSet::load`] reads.
pub fn write_seed_file(set: &LabeledSeedSet, path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for (i, e) in set.examples.iter().enumerate() {
        w.write(&serde_json::json!({
            "id": format!("seed-{i:04}"),
            "turns": [Turn::user(e.text.clone()), Turn::assistant("ok")],
            "label": e.label,
        }))?;
    }
    w.finish()?;
    Ok(())
}

/// Writes conversations as canonical JSONL.
pub fn write_corpus(convs: &[Conversation], path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for c in convs {
        w.write(c)?;
    }
    w.finish()?;
    Ok(())
}
