//! Image-folder datasets: a directory of equal-sized 8-bit PNGs, optionally
//! with an `attributes.csv` table of ±1 flags per image (CelebA-style). The
//! whole set is held in memory as bytes and normalized to [0,1] on batch
//! assembly; iteration order is a pure function of (seed, epoch), never of
//! filesystem listing order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RNG stream tag for the held-out split (epoch shuffles use the epoch
/// number itself; training streams live in their own high-bit ranges).
const HOLDOUT_STREAM: u64 = 3 << 56;

#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    image_size: usize,
    channels: usize,
    entries: Vec<String>,
    attribute_names: Vec<String>,
    /// Per entry, aligned with `attribute_names`; empty when no table exists.
    flags: Vec<Vec<bool>>,
    /// CHW bytes per image, concatenated in entry order.
    pixels: Vec<u8>,
}

/// Loads every `*.png` under `dir` (sorted by name) plus the optional
/// `attributes.csv`. All images must share one size and channel layout.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::Usage(format!("no .png images in {}", dir.display())));
    }

    let mut image_size = 0usize;
    let mut channels = 0usize;
    let mut pixels: Vec<u8> = Vec::new();
    for name in &names {
        let path = dir.join(name);
        let img = image::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if channels == 0 {
            if w != h {
                return Err(Error::Dimension(format!(
                    "{}: images must be square, got {w}×{h}",
                    path.display()
                )));
            }
            image_size = w;
            channels = match img.color() {
                image::ColorType::L8 | image::ColorType::La8 => 1,
                _ => 3,
            };
        } else if w != image_size || h != image_size {
            return Err(Error::Dimension(format!(
                "{}: size {w}×{h} disagrees with the first image's {image_size}×{image_size}",
                path.display()
            )));
        }
        match channels {
            1 => pixels.extend(img.to_luma8().pixels().map(|p| p.0[0])),
            _ => {
                let rgb = img.to_rgb8();
                for ch in 0..3 {
                    pixels.extend(rgb.pixels().map(|p| p.0[ch]));
                }
            }
        }
    }

    let (attribute_names, flags) = load_attributes(dir, &names)?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        image_size,
        channels,
        entries: names,
        attribute_names,
        flags,
        pixels,
    })
}

fn load_attributes(dir: &Path, names: &[String]) -> Result<(Vec<String>, Vec<Vec<bool>>)> {
    let path = dir.join("attributes.csv");
    if !path.exists() {
        return Ok((Vec::new(), vec![Vec::new(); names.len()]));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty attribute table", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 {
        return Err(Error::Format(format!(
            "{}: header needs a filename column plus at least one attribute",
            path.display()
        )));
    }
    let attribute_names: Vec<String> = columns[1..].iter().map(|s| s.to_string()).collect();

    let mut table: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Format(format!(
                "{}:{}: {} fields, header has {}",
                path.display(),
                lineno + 1,
                fields.len(),
                columns.len()
            )));
        }
        let mut row = Vec::with_capacity(attribute_names.len());
        for value in &fields[1..] {
            row.push(match *value {
                "1" => true,
                "-1" => false,
                other => {
                    return Err(Error::Format(format!(
                        "{}:{}: attribute flags are 1 or -1, got '{other}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            });
        }
        table.insert(fields[0].to_string(), row);
    }

    let mut flags = Vec::with_capacity(names.len());
    for name in names {
        let row = table.remove(name).ok_or_else(|| {
            Error::Format(format!("{}: no attribute row for {name}", path.display()))
        })?;
        flags.push(row);
    }
    if let Some((stray, _)) = table.into_iter().next() {
        return Err(Error::Format(format!(
            "{}: row for '{stray}' matches no image in the folder",
            path.display()
        )));
    }
    Ok((attribute_names, flags))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_name(&self, index: usize) -> &str {
        &self.entries[index]
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    fn bytes_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Assembles `[B,C,H,W]` with pixels normalized to [0,1] (byte / 255).
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch requested".into()));
        }
        let per = self.bytes_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("image index {i} out of range (n={})", self.len())));
            }
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.image_size, self.image_size],
            data,
        )
    }

    pub fn flag(&self, index: usize, attribute: &str) -> Result<bool> {
        let col = self
            .attribute_names
            .iter()
            .position(|a| a == attribute)
            .ok_or_else(|| Error::Usage(format!("unknown attribute '{attribute}'")))?;
        Ok(self.flags[index][col])
    }

    /// Splits image indices into (positives, negatives) for one attribute.
    pub fn partition(&self, attribute: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..self.len() {
            if self.flag(i, attribute)? {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        Ok((pos, neg))
    }

    /// Treats the attributes whose names start with `prefix` as a one-hot
    /// class group and returns each image's class index within that group
    /// (ordered as in the table header).
    pub fn labels_from_flag_group(&self, prefix: &str) -> Result<Vec<usize>> {
        let group: Vec<usize> = (0..self.attribute_names.len())
            .filter(|&c| self.attribute_names[c].starts_with(prefix))
            .collect();
        if group.len() < 2 {
            return Err(Error::Usage(format!(
                "attribute group '{prefix}*' needs at least two members, found {}",
                group.len()
            )));
        }
        let mut labels = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let set: Vec<usize> =
                group.iter().enumerate().filter(|(_, &c)| self.flags[i][c]).map(|(g, _)| g).collect();
            if set.len() != 1 {
                return Err(Error::Format(format!(
                    "{}: {} flags set in group '{prefix}*', expected exactly one",
                    self.entries[i],
                    set.len()
                )));
            }
            labels.push(set[0]);
        }
        Ok(labels)
    }

    /// Deterministic train/holdout index split. The holdout gets
    /// `round(fraction·n)` images (at least one when the fraction is
    /// positive) chosen by a seed-derived shuffle.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(HOLDOUT_STREAM);
        order.shuffle(&mut rng);
        let mut take = (fraction * n as f64).round() as usize;
        if fraction > 0.0 {
            take = take.clamp(1, n.saturating_sub(1));
        }
        let holdout: Vec<usize> = order[..take].to_vec();
        let mut train: Vec<usize> = order[take..].to_vec();
        train.sort_unstable();
        (train, holdout)
    }
}

/// The epoch ordering: a seeded Fisher–Yates permutation of `0..n`,
/// independent of everything but (seed, epoch).
pub fn shuffled_indices(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn flat_rgb(dir: &Path, name: &str, size: u32, value: u8) {
        RgbImage::from_pixel(size, size, image::Rgb([value, value, value]))
            .save(dir.join(name))
            .unwrap();
    }

    #[test]
    fn loads_sorted_normalized_batches() {
        let dir = tempfile::tempdir().unwrap();
        // Created out of name order on purpose.
        flat_rgb(dir.path(), "c.png", 4, 255);
        flat_rgb(dir.path(), "a.png", 4, 0);
        flat_rgb(dir.path(), "b.png", 4, 128);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_size(), 4);
        assert_eq!(ds.channels(), 3);
        assert_eq!(
            (0..3).map(|i| ds.entry_name(i)).collect::<Vec<_>>(),
            vec!["a.png", "b.png", "c.png"]
        );
        let batch = ds.batch(&[0, 1, 2]).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 4, 4]);
        let per = 3 * 4 * 4;
        assert!(batch.data()[..per].iter().all(|&v| v == 0.0));
        assert!(batch.data()[per..2 * per].iter().all(|&v| v == 128.0 / 255.0));
        assert!(batch.data()[2 * per..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["x.png", "y.png"] {
            flat_rgb(dir.path(), name, 3, 77);
        }
        let ds = load_dataset(dir.path()).unwrap();
        let batch = ds.batch(&[0, 1]).unwrap();
        let per = batch.numel() / 2;
        assert_eq!(batch.data()[..per], batch.data()[per..]);
    }

    #[test]
    fn grayscale_folders_load_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_pixel(4, 4, image::Luma([10])).save(dir.path().join("g.png")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.channels(), 1);
        assert_eq!(ds.batch(&[0]).unwrap().shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn size_mismatch_names_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        flat_rgb(dir.path(), "a.png", 4, 1);
        flat_rgb(dir.path(), "b.png", 6, 1);
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("b.png"), "{err}");
    }

    #[test]
    fn corrupt_file_names_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        flat_rgb(dir.path(), "a.png", 4, 1);
        fs::write(dir.path().join("bad.png"), b"this is not a png").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("bad.png"), "{err}");
    }

    #[test]
    fn empty_folder_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Usage(_))));
    }

    fn write_attr_fixture(dir: &Path) {
        flat_rgb(dir, "a.png", 4, 10);
        flat_rgb(dir, "b.png", 4, 20);
        flat_rgb(dir, "c.png", 4, 30);
        fs::write(
            dir.join("attributes.csv"),
            "filename,class_disk,class_square,bright\na.png,1,-1,1\nb.png,-1,1,1\nc.png,1,-1,-1\n",
        )
        .unwrap();
    }

    #[test]
    fn attributes_parse_into_flags_and_partitions() {
        let dir = tempfile::tempdir().unwrap();
        write_attr_fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.attribute_names(), &["class_disk", "class_square", "bright"]);
        assert!(ds.flag(0, "bright").unwrap());
        assert!(!ds.flag(2, "bright").unwrap());
        let (pos, neg) = ds.partition("bright").unwrap();
        assert_eq!(pos, vec![0, 1]);
        assert_eq!(neg, vec![2]);
        assert!(matches!(ds.flag(0, "nope"), Err(Error::Usage(_))));
    }

    #[test]
    fn class_labels_come_from_the_flag_group() {
        let dir = tempfile::tempdir().unwrap();
        write_attr_fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.labels_from_flag_group("class_").unwrap(), vec![0, 1, 0]);
        assert!(matches!(ds.labels_from_flag_group("bright"), Err(Error::Usage(_))));
    }

    #[test]
    fn missing_attribute_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        flat_rgb(dir.path(), "a.png", 4, 1);
        flat_rgb(dir.path(), "b.png", 4, 1);
        fs::write(dir.path().join("attributes.csv"), "filename,bright\na.png,1\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");
    }

    #[test]
    fn stray_attribute_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        flat_rgb(dir.path(), "a.png", 4, 1);
        fs::write(dir.path().join("attributes.csv"), "filename,bright\na.png,1\nghost.png,-1\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
    }

    #[test]
    fn non_unit_flag_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        flat_rgb(dir.path(), "a.png", 4, 1);
        fs::write(dir.path().join("attributes.csv"), "filename,bright\na.png,0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("'0'"), "{err}");
    }

    #[test]
    fn shuffles_are_permutations_and_epoch_dependent() {
        let a = shuffled_indices(9, 0, 50);
        let b = shuffled_indices(9, 0, 50);
        let c = shuffled_indices(9, 1, 50);
        let d = shuffled_indices(10, 0, 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn holdout_split_is_deterministic_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..20 {
            flat_rgb(dir.path(), &format!("{i:02}.png"), 4, i as u8);
        }
        let ds = load_dataset(dir.path()).unwrap();
        let (train, hold) = ds.split_holdout(0.25, 7);
        let (train2, hold2) = ds.split_holdout(0.25, 7);
        assert_eq!(train, train2);
        assert_eq!(hold, hold2);
        assert_eq!(hold.len(), 5);
        assert_eq!(train.len(), 15);
        let mut all: Vec<usize> = train.iter().chain(hold.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());

        let (train0, hold0) = ds.split_holdout(0.0, 7);
        assert!(hold0.is_empty());
        assert_eq!(train0.len(), 20);
        // A tiny positive fraction still holds out at least one image.
        let (_, hold_min) = ds.split_holdout(0.001, 7);
        assert_eq!(hold_min.len(), 1);
    }
}
