//! Versioned prompt templates. They are sent to the scorer service as-is
//! (placeholders included); filling them in is the service's job.

pub const VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub name: &'static str,
    pub template: &'static str,
}

impl Prompt {
    pub fn id(&self) -> String {
        format!("{}/{VERSION}", self.name)
    }
}

pub const CATEGORIZE: Prompt = Prompt {
    name: "categorize",
    template: include_str!("../../assets/prompts/categorize.v1.txt"),
};

pub const CODE_REVIEW: Prompt = Prompt {
    name: "code_review",
    template: include_str!("../../assets/prompts/code_review.v1.txt"),
};

pub const CONSTRAINT_ANNOTATE: Prompt = Prompt {
    name: "constraint_annotate",
    template: include_str!("../../assets/prompts/constraint_annotate.v1.txt"),
};

pub const CONSTRAINT_VERIFY: Prompt = Prompt {
    name: "constraint_verify",
    template: include_str!("../../assets/prompts/constraint_verify.v1.txt"),
};

pub const RESPONSE_EVAL: Prompt = Prompt {
    name: "response_eval",
    template: include_str!("../../assets/prompts/response_eval.v1.txt"),
};

pub const ALL: [Prompt; 5] = [CATEGORIZE, CODE_REVIEW, CONSTRAINT_ANNOTATE, CONSTRAINT_VERIFY, RESPONSE_EVAL];
