use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Normalization, Split};
use crate::error::{Error, Result};

/// One label byte followed by 3072 channel-major pixel bytes.
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
const SHAPE: [usize; 3] = [3, 32, 32];

/// Labels and pixel bytes of one binary batch file.
pub fn read_cifar10_file(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            offset: bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD,
            reason: format!(
                "{} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len());
    for (r, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                offset: r * CIFAR10_RECORD,
                reason: format!("label byte {}", record[0]),
            });
        }
        labels.push(record[0] as usize);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok((labels, pixels))
}

fn read_all(dir: &Path, names: &[String]) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in names {
        let (l, p) = read_cifar10_file(&dir.join(name))?;
        labels.extend(l);
        pixels.extend(p);
    }
    Ok((labels, pixels))
}

/// Loads `data_batch_1.bin`..`data_batch_5.bin` and `test_batch.bin`,
/// standardizing both splits with train-split channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let (train_labels, train_pixels) = read_all(dir, &train_names)?;
    let (test_labels, test_pixels) = read_all(dir, &["test_batch.bin".to_string()])?;
    if train_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let norm = Normalization::fit(&train_pixels, SHAPE)?;
    let train = Dataset::from_bytes(
        "cifar10",
        Split::Train,
        SHAPE,
        &train_pixels,
        train_labels,
        10,
        norm.clone(),
    )?;
    let test = Dataset::from_bytes(
        "cifar10",
        Split::Test,
        SHAPE,
        &test_pixels,
        test_labels,
        10,
        norm,
    )?;
    Ok((train, test))
}

/// Re-serializes sample `i` of a CIFAR-10 dataset into its binary record.
pub fn encode_cifar10_record(data: &Dataset, i: usize) -> Result<Vec<u8>> {
    if data.sample_shape() != SHAPE || i >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "sample {i} of a {:?} dataset is not a CIFAR-10 record",
            data.sample_shape()
        )));
    }
    let norm = data.normalization();
    let mut out = Vec::with_capacity(CIFAR10_RECORD);
    out.push(data.labels()[i] as u8);
    out.extend(
        data.sample(i)
            .iter()
            .enumerate()
            .map(|(j, &v)| norm.invert(j / 1024, v)),
    );
    Ok(out)
}
