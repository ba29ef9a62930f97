//! Datasets: CIFAR-10 binary batches, MNIST IDX files, synthetic blobs,
//! seeded batching and optional augmentation.

mod augment;
mod cifar;
mod dataset;
mod mnist;

pub use augment::{augment, hflip, pad_crop, Augment};
pub use cifar::{encode_cifar10_record, load_cifar10, read_cifar10_file, CIFAR10_RECORD};
pub use dataset::{batches, synthetic, Dataset, Normalization, Split};
pub use mnist::{load_mnist, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
