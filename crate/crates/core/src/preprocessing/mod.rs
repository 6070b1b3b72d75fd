//! Patch grids, WordPiece tokenization, sentence splitting and image files.

mod image_io;
mod patches;
mod sentences;
mod tokenizer;

pub use image_io::{load_image, save_image, Image};
pub use patches::{normalize_patch_targets, patchify, unpatchify, PatchGrid, PATCH_NORM_EPS};
pub use sentences::{split_sentences, ABBREVIATIONS};
pub use tokenizer::{
    split_words, wordpiece_tokenize, ReservedIds, TokenSeq, Vocabulary, CLS, CONTINUATION_PREFIX, MASK, PAD,
    RESERVED_TOKENS, SEP, UNK,
};
