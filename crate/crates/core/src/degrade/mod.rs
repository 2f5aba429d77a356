//! Degraded conditions for the generator and the fixed augmentation family.

mod augment;
mod condition;
mod dataset;

pub use augment::{
    apply_transform, enumerate_transforms, transformed_dims, AugmentTransform, TransformKind, TRANSFORM_COUNT, TRANSLATION_STRIDE,
};
pub use condition::{make_condition, pixelate, ConditionKind, DEFAULT_PEAK};
pub use dataset::{
    build_training_set, build_training_set_with, load_training_set, plan_training_set, save_training_set, BlockSelector, PairKey,
    TrainingPair, TrainingSetOptions, MANIFEST_NAME,
};
