pub mod audio;
mod binio;
pub mod codec;
pub mod dataset;
pub mod eval;
pub mod midi_tok;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod timbre;
