//! Procedurally generated micro-gesture clips with ground-truth
//! four-attribute semantics and templated descriptions.

mod attributes;
mod dataset;
mod gesture;
pub mod io;
pub mod render;
mod text;

pub use attributes::{AdmissibleSet, Direction, Initiator, MotionType, Receiver, SemanticAttributes};
pub use dataset::{build_dataset, DatasetConfig, DatasetSplit, Sample, Split};
pub use gesture::{sample_gesture, GestureInstance, MotionRanges};
pub use render::{render_clip, VideoClip, NUM_JOINTS};
pub use text::{
    category_name, compose_category_text, compose_fg_text, CategoryText, FineGrainedText, Text, TokenId, Vocabulary,
};
