//! Building blocks for a desk-scale Chinese-English translation recipe: text
//! normalization, bitext filtering, BPE, data augmentation, a toy transformer, BLEU
//! based ensemble selection and a staged pipeline driver.

pub mod augment;
pub mod corpus;
pub mod digest;
pub mod evalsel;
pub mod filter;
pub mod model;
pub mod pipeline;
pub mod subword;
pub mod text_norm;
