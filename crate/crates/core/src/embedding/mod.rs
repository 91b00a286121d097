//! Vocabulary, input composition (`[CLS] S1 [SEP] S2 [SEP]`), the summed
//! token/segment/position embedding, and pretrained word-vector tables used
//! for synonym retrieval.

mod input;
mod vocab;
mod wordvec;

pub use input::{
    compose_input, compose_input_with, embed, embed_backward, ComposeOptions, EmbeddingParams,
    KeywordMaskScope, ModelInput,
};
pub use vocab::{build_vocab, Vocab, CLS, CLS_TOKEN, PAD, PAD_TOKEN, RESERVED, SEP, SEP_TOKEN, UNK, UNK_TOKEN};
pub use wordvec::{cosine, nearest_synonyms, EmbeddingTable, SynonymSet};
