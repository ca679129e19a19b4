//! Deterministic synthetic corpora for the three unlearning tasks.

mod gen;
mod grammar;

pub use gen::{
    gen_api, gen_copyright, gen_insecure, generate, ApiMeta, ApiSummary, DatasetMeta, Record,
    Split, Task, TaskDataset, TEMPLATE_TEXT,
};
pub use grammar::{
    insecure_patterns, recognize_program, retain_lexicon, GRAMMAR_VERSION, PRNG_NAME,
};
