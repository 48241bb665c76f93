//! Static–dynamic multi-modal face presentation attack detection at desk
//! scale: rank-pooled dynamic images, SD-Net and PSMM-Net fusion graphs on a
//! small reverse-mode tape, PAD metrics, the four cross-condition protocols,
//! a synthetic multi-modal corpus and a CLI tying them together.

pub mod cli;
pub mod datasyn;
pub mod diffcore;
pub mod dynimg;
pub mod kv;
pub mod metrics;
mod modality;
pub mod netgraph;
pub mod protocols;
pub mod trainer;

pub use modality::Modality;
