//! Synthetic entity-labelled corpus: schema, generator, labeller and vocabulary.

mod corpus;
mod default_schema;
mod schema;
mod vocab;

pub use corpus::{
    entity_word_fraction, generate_corpus, read_corpus, token_counts, write_corpus, Sample, MIN_CATEGORIES,
};
pub use default_schema::default_schema;
pub use schema::{AttributeSchema, LabelId, Piece, Segment, NORMAL_WORD};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
