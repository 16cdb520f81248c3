//! Dataset indexing, preprocessing, augmentation, split protocols and the
//! synthetic fixture.

pub mod augment;
pub mod dataset;
pub mod fixture;
pub mod loader;
pub mod preprocess;
pub mod split;

pub use augment::{augment, augment_image, AugmentPolicy};
pub use dataset::{load_dataset, DatasetIndex, Entry, LoadOptions, Sample};
pub use fixture::{generate_fixture, FixtureSpec};
pub use loader::{epoch_batches, AugmentDraw, Batch, Loader};
pub use preprocess::{normalize, prepare, preprocess, resize_bilinear, Normalization};
pub use split::{carve_validation, make_split, make_subject_split, SplitKind, SplitPlan};
