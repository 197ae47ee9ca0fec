//! Chinese text normalization with a rule-guided flat-lattice tagger.
//!
//! The pipeline builds a flat lattice of characters, lexicon words and
//! regex-proposed NSW candidates, encodes it with relative-position
//! self-attention, tags characters with a linear-chain CRF and verbalizes
//! the tagged spans into spoken-form Chinese.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod embeddings;
pub mod encoder;
pub mod lattice;
pub mod model;
pub mod params;
pub mod relpos;
pub mod rules;
pub mod tags;
pub mod train;
pub mod verbalizer;
