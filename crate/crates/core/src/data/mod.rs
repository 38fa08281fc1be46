//! Dataset loading, padding, normalization, augmentation and splits.

mod augment;
mod io;
mod normalize;
mod pad;
mod sample;
mod scheme;
mod split;
mod stats;
mod synth;

pub use augment::{apply_flips, augment_flips, FlipDraw};
pub use io::{
    list_ids, load_dataset, load_image, load_mask, load_sample, mask_to_rgb, save_gray, save_mask, DatasetManifest,
};
pub use normalize::{NormalizationStats, STD_FLOOR};
pub use pad::{
    bounding_target, crop_labels, pad_dataset, pad_to_target, padding_for, Padding, PaddingSpec, PatchSource,
    DEFAULT_TARGET_HW,
};
pub use sample::{batch_tensor, ImageBuf, SegmentationSample};
pub use scheme::{ClassInfo, ClassScheme};
pub use split::{kfold, split_train_val, val_count, SplitPlan};
pub use stats::{class_distribution, ClassDistribution};
pub use synth::{synth_generate, synth_id, synth_samples, SynthConfig};
