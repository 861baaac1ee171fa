//! Retrieval-augmented fact-checking of image-text claims.

pub mod claim;
pub mod embedding;
pub mod fewshot;
pub mod generation;
pub mod image_retrieval;
pub mod knowledge_store;
pub mod pipeline;
pub mod prompt;
pub mod provider;
pub mod replay;
pub mod text_retrieval;
