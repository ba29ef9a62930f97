use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::dataset::{Dataset, Normalization, Split};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads `path`, or `path.gz` when only the compressed file exists.
fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let (actual, compressed) = if path.exists() || !gz.exists() {
        (
            path.to_path_buf(),
            path.extension().is_some_and(|e| e == "gz"),
        )
    } else {
        (gz, true)
    };
    let file = File::open(&actual).map_err(|e| Error::io(&actual, e))?;
    let mut bytes = Vec::new();
    let res = if compressed {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        { file }.read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(&actual, e))?;
    Ok((actual, bytes))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::CorruptFile {
                path: path.to_path_buf(),
                offset: bytes.len(),
                reason: "truncated header".into(),
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let extents = (1..=dims)
        .map(|i| word(i).map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 * (dims + 1);
    let expected = start + extents.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected),
            reason: format!(
                "extents {extents:?} need {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    Ok(extents)
}

/// Image bytes `[S, H, W]` of an IDX3 file (plain or gzip).
pub fn read_idx_images(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let (actual, mut bytes) = read_maybe_gz(path)?;
    let e = header(&actual, &bytes, IDX_IMAGES_MAGIC, 3)?;
    bytes.drain(..16);
    Ok(([e[0], e[1], e[2]], bytes))
}

/// Labels of an IDX1 file (plain or gzip).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (actual, mut bytes) = read_maybe_gz(path)?;
    header(&actual, &bytes, IDX_LABELS_MAGIC, 1)?;
    bytes.drain(..8);
    if let Some(pos) = bytes.iter().position(|&b| b > 9) {
        return Err(Error::CorruptFile {
            path: actual,
            offset: 8 + pos,
            reason: format!("label {}", bytes[pos]),
        });
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

fn read_split(dir: &Path, prefix: &str) -> Result<([usize; 3], Vec<u8>, Vec<usize>)> {
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let (extents, pixels) = read_idx_images(&images)?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if labels.len() != extents[0] {
        return Err(Error::CorruptFile {
            path: images,
            offset: 4,
            reason: format!("{} images but {} labels", extents[0], labels.len()),
        });
    }
    Ok((extents, pixels, labels))
}

/// Loads `train-*` and `t10k-*` IDX files (optionally `.gz`) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (e, train_pixels, train_labels) = read_split(dir, "train")?;
    let (te, test_pixels, test_labels) = read_split(dir, "t10k")?;
    if (te[1], te[2]) != (e[1], e[2]) {
        return Err(Error::InvalidArgument(format!(
            "train images are {}x{}, test images {}x{}",
            e[1], e[2], te[1], te[2]
        )));
    }
    if train_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = [1, e[1], e[2]];
    let norm = Normalization::fit(&train_pixels, shape)?;
    let train = Dataset::from_bytes(
        "mnist",
        Split::Train,
        shape,
        &train_pixels,
        train_labels,
        10,
        norm.clone(),
    )?;
    let test = Dataset::from_bytes(
        "mnist",
        Split::Test,
        shape,
        &test_pixels,
        test_labels,
        10,
        norm,
    )?;
    Ok((train, test))
}
