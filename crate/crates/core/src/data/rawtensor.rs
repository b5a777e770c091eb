//! Raw-tensor dataset directory: a `manifest.txt` of `key=value` lines
//! (`count`, `channels`, `height`, `width`, `labels_file`, `data_file`),
//! a little-endian f32 data file and a little-endian u16 label file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn load_raw_tensor_dir<T: Scalar>(dir: &Path) -> Result<LabeledImageSet<T>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("manifest line {}: expected key=value", lineno + 1))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Format(format!("manifest missing key `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format(format!("manifest key `{k}` is not a number")))
    };
    let count = num("count")?;
    let channels = num("channels")?;
    let height = num("height")?;
    let width = num("width")?;

    let data_bytes = fs::read(dir.join(get("data_file")?))?;
    let expected = count * channels * height * width * 4;
    if data_bytes.len() != expected {
        return Err(Error::Format(format!(
            "data file has {} bytes, manifest implies {}",
            data_bytes.len(),
            expected
        )));
    }
    let data: Vec<T> = data_bytes
        .chunks_exact(4)
        .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();

    let label_bytes = fs::read(dir.join(get("labels_file")?))?;
    if label_bytes.len() != count * 2 {
        return Err(Error::Format(format!(
            "label file has {} bytes, manifest implies {}",
            label_bytes.len(),
            count * 2
        )));
    }
    let labels: Vec<usize> = label_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledImageSet::new(Tensor::new(vec![count, channels, height, width], data)?, labels, num_classes)
}

pub fn save_raw_tensor_dir<T: Scalar>(set: &LabeledImageSet<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = set.images().shape();
    let manifest = format!(
        "count={}\nchannels={}\nheight={}\nwidth={}\nlabels_file=labels.u16\ndata_file=data.f32\n",
        s[0], s[1], s[2], s[3]
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut data = Vec::with_capacity(set.images().numel() * 4);
    for &v in set.images().data() {
        data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(dir.join("data.f32"), data)?;
    let mut labels = Vec::with_capacity(set.len() * 2);
    for &l in set.labels() {
        labels.extend_from_slice(&(l as u16).to_le_bytes());
    }
    fs::write(dir.join("labels.u16"), labels)?;
    Ok(())
}
