//! Records, manifests, synthetic shapes and class-incremental task sequences.

mod image;
mod record;
mod split;
pub mod synth;
mod tasks;

pub use image::Image;
pub use record::{
    export_records, load_entry, load_mask_png, parse_manifest, read_manifest, resize_mask, save_mask_png,
    write_manifest, ImageRecord, ManifestEntry, Split,
};
pub(crate) use record::atomic_write;
pub use split::{build_split, clear_image_filter, halve, universe_classes, ClassSplits, ClearImageMode};
pub use synth::{synth_generate, SplitCounts, SHAPES};
pub use tasks::{make_task_sequence, Task, TaskSequence, TaskSummary};
