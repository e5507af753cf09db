use std::path::Path;

use super::Split;
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parse CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes. Pixels are scaled to `[0, 1]`. `limit` caps the record count.
pub fn parse_records(bytes: &[u8], source: &str, limit: Option<usize>) -> Result<Split> {
    let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format(format!(
            "{source}: trailing fragment of {} bytes at byte offset {whole}",
            bytes.len() - whole
        )));
    }
    let count = limit.map_or(whole / RECORD_BYTES, |l| l.min(whole / RECORD_BYTES));
    let mut split = Split::empty(3, CIFAR_SIDE, CIFAR_CLASSES);
    split.images.reserve(count * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).take(count).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "{source}: label {label} at byte offset {}",
                i * RECORD_BYTES
            )));
        }
        split.labels.push(label);
        split.images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(split)
}

fn read(path: &Path, limit: Option<usize>) -> Result<Split> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, &path.display().to_string(), limit)
}

/// Training batches `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<(Split, Split)> {
    let mut train = Split::empty(3, CIFAR_SIDE, CIFAR_CLASSES);
    for name in TRAIN_FILES {
        let left = train_limit.map(|l| l.saturating_sub(train.len()));
        if left == Some(0) {
            break;
        }
        train.append(read(&dir.join(name), left)?);
    }
    let test = read(&dir.join(TEST_FILE), test_limit)?;
    Ok((train, test))
}
