//! Fixed-context autoregressive language model and character tokenizer.

mod model;
mod vocab;

pub use model::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, LmConfig,
    LmModel, ModelVars, Stage,
};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD, STANDARD_ALPHABET};
