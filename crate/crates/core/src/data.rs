//! Dataset indexing, stratified splitting, preprocessing, batching and the
//! synthetic blood-cell generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops::FilterType, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// Side length of preprocessed images.
pub const IMAGE_SIZE: usize = 100;
pub const CHANNELS: usize = 3;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.82, 0.09, 0.09];
pub const DEFAULT_BATCH_SIZE: usize = 32;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Class label. The numeric encoding is fixed: parasitized = 0, uninfected = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Parasitized = 0,
    Uninfected = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Parasitized, Label::Uninfected];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Parasitized),
            1 => Ok(Label::Uninfected),
            _ => Err(Error::invalid(format!("label {i} is not 0 or 1"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Parasitized => "parasitized",
            Label::Uninfected => "uninfected",
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_index(v as usize).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: Option<Split>,
}

/// Manifest of labeled image files and their split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub seed: Option<u64>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn count(&self, split: Split, label: Option<Label>) -> usize {
        self.split_entries(split)
            .filter(|e| label.map_or(true, |l| e.label == l))
            .count()
    }

    /// Writes `path,label,split` rows.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["path", "label", "split"])?;
        for e in &self.entries {
            let split = e.split.map_or("", Split::name);
            let label = e.label.index().to_string();
            w.write_record([e.path.to_string_lossy().as_ref(), label.as_str(), split])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for row in r.records() {
            let row = row?;
            if row.len() != 3 {
                return Err(Error::invalid(format!("index row has {} fields", row.len())));
            }
            let label: usize = row[1]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad label {:?}", &row[1])))?;
            let split = match row[2].trim() {
                "" => None,
                s => Some(s.parse()?),
            };
            entries.push(IndexEntry {
                path: PathBuf::from(&row[0]),
                label: Label::from_index(label)?,
                split,
            });
        }
        Ok(Self {
            entries,
            seed: None,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

/// Indexes `root/<parasitized>/*` and `root/<uninfected>/*` (directory names
/// matched case-insensitively). Entries are sorted by path.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut class_dirs: [Option<PathBuf>; 2] = [None, None];
    let listing = fs::read_dir(root)
        .map_err(|e| Error::Structure(format!("cannot read dataset root {}: {e}", root.display())))?;
    for entry in listing {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_ascii_lowercase();
        for label in Label::ALL {
            if name == label.name() {
                class_dirs[label.index()] = Some(entry.path());
            }
        }
    }
    let mut entries = Vec::new();
    for label in Label::ALL {
        let dir = class_dirs[label.index()].as_ref().ok_or_else(|| {
            Error::Structure(format!(
                "{} has no {:?} class directory",
                root.display(),
                label.name()
            ))
        })?;
        for file in fs::read_dir(dir)? {
            let path = file?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image && path.is_file() {
                entries.push(IndexEntry {
                    path,
                    label,
                    split: None,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex {
        entries,
        seed: None,
    })
}

/// Per-class `[train, val, test]` counts.
///
/// Validation and test totals are `ceil(n * fraction)`; each total is
/// spread over the classes by largest remainder (ties to the lower class
/// index) and training receives everything left.
pub fn split_counts(class_sizes: &[usize], fractions: [f64; 3]) -> Result<Vec<[usize; 3]>> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let total: usize = class_sizes.iter().sum();
    let mut counts = vec![[0usize; 3]; class_sizes.len()];
    for slot in 1..3 {
        let target = ((total as f64 * fractions[slot]) - 1e-9).ceil().max(0.0) as usize;
        let exact: Vec<f64> = class_sizes
            .iter()
            .map(|&n| n as f64 * fractions[slot])
            .collect();
        let mut assigned: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
        let mut order: Vec<usize> = (0..class_sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - assigned[a] as f64;
            let rb = exact[b] - assigned[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut missing = target.saturating_sub(assigned.iter().sum());
        for &c in order.iter().cycle().take(order.len() * 2) {
            if missing == 0 {
                break;
            }
            let used = counts[c][1] + counts[c][2] + assigned[c];
            if used < class_sizes[c] {
                assigned[c] += 1;
                missing -= 1;
            }
        }
        for (c, a) in assigned.into_iter().enumerate() {
            counts[c][slot] = a;
        }
    }
    for (c, &n) in class_sizes.iter().enumerate() {
        let held = counts[c][1] + counts[c][2];
        if held > n {
            return Err(Error::invalid("split fractions leave no room for training data"));
        }
        counts[c][0] = n - held;
    }
    for (slot, split) in Split::ALL.iter().enumerate() {
        if counts.iter().map(|c| c[slot]).sum::<usize>() == 0 {
            return Err(Error::invalid(format!("{split} split would be empty")));
        }
    }
    Ok(counts)
}

/// Assigns every entry to train/val/test, preserving class proportions.
/// Deterministic in `seed`.
pub fn stratified_split(index: &DatasetIndex, fractions: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in index.entries.iter().enumerate() {
        by_class[e.label.index()].push(i);
    }
    let sizes = [by_class[0].len(), by_class[1].len()];
    let counts = split_counts(&sizes, fractions)?;
    let mut out = index.clone();
    out.seed = Some(seed);
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, c as u64));
        members.shuffle(&mut rng);
        let [_, n_val, n_test] = counts[c];
        for (rank, &i) in members.iter().enumerate() {
            out.entries[i].split = Some(if rank < n_val {
                Split::Val
            } else if rank < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    Ok(out)
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decodes a PNG/JPEG, drops alpha, bilinear-resizes to 100x100 and scales to `[0, 1]`.
pub fn load_and_preprocess(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(preprocess(&img.to_rgb8()))
}

/// Resize (bilinear) and rescale an 8-bit RGB image to a `[100, 100, 3]` tensor.
pub fn preprocess(img: &RgbImage) -> Tensor {
    let size = IMAGE_SIZE as u32;
    let resized;
    let img = if img.dimensions() == (size, size) {
        img
    } else {
        resized = image::imageops::resize(img, size, size, FilterType::Triangle);
        &resized
    };
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("preprocessed extents")
}

/// Converts a `[H, W, 3]` tensor in `[0, 1]` back to 8-bit RGB.
pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let [h, w, c] = match *t.shape() {
        [h, w, c] => [h, w, c],
        ref s => return Err(Error::shape(format!("expected [H,W,3], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("expected 3 channels"));
    }
    let raw = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

/// One mini-batch: images `[B, H, W, C]` and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_samples(samples: &[(Tensor, Label)]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.0.shape());
        let mut data = Vec::with_capacity(samples.len() * first.0.len());
        for (img, _) in samples {
            if img.shape() != first.0.shape() {
                return Err(Error::shape("images in a batch must share extents"));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            images: Tensor::new(&shape, data)?,
            labels: samples.iter().map(|s| s.1).collect(),
        })
    }
}

/// Visiting order of `n` items for one epoch. Training order is a
/// deterministic shuffle of `(seed, epoch)`; other splits keep index order.
pub fn epoch_order(n: usize, split: Split, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if split == Split::Train {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(shuffle_seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
    }
    order
}

/// Anything that can serve labeled mini-batches per split.
pub trait DataSource {
    fn split_len(&self, split: Split) -> usize;

    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>>;
}

/// Lazily loads batches of `split` from disk. See [`epoch_order`].
pub fn batch_iter<'a>(
    index: &'a DatasetIndex,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let members: Vec<&IndexEntry> = index.split_entries(split).collect();
    if members.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    let order = epoch_order(members.len(), split, shuffle_seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |chunk| {
        let samples = chunk
            .iter()
            .map(|&i| Ok((load_and_preprocess(&members[i].path)?, members[i].label)))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples)
    }))
}

impl DataSource for DatasetIndex {
    fn split_len(&self, split: Split) -> usize {
        self.count(split, None)
    }

    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>> {
        Ok(Box::new(batch_iter(self, split, batch_size, shuffle_seed, epoch)?))
    }
}

/// Preloaded images, for small experiments and tests.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<(Tensor, Label, Split)>,
}

impl InMemoryDataset {
    /// Loads every split entry of `index` into memory.
    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let samples = index
            .entries
            .iter()
            .filter_map(|e| e.split.map(|s| (e, s)))
            .map(|(e, s)| Ok((load_and_preprocess(&e.path)?, e.label, s)))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }
}

impl DataSource for InMemoryDataset {
    fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.2 == split).count()
    }

    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let members: Vec<&(Tensor, Label, Split)> =
            self.samples.iter().filter(|s| s.2 == split).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("{split} split is empty")));
        }
        let order = epoch_order(members.len(), split, shuffle_seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(Box::new(chunks.into_iter().map(move |chunk| {
            let samples: Vec<(Tensor, Label)> = chunk
                .iter()
                .map(|&i| (members[i].0.clone(), members[i].1))
                .collect();
            Batch::from_samples(&samples)
        })))
    }
}

// ---------------------------------------------------------------------------
// synthetic cells

/// A purple parasite blob; `cx` is the column, `cy` the row, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Blob {
    /// Whether pixel `(row, col)` lies within the blob grown by `dilation` pixels.
    pub fn contains(&self, row: usize, col: usize, dilation: f64) -> bool {
        let dx = col as f64 - self.cx;
        let dy = row as f64 - self.cy;
        (dx * dx + dy * dy).sqrt() <= self.r + dilation
    }
}

/// The elliptical cell body of a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    pub fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radius_at(x, y) < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub file: String,
    pub label: Label,
    pub cell: Ellipse,
    pub blobs: Vec<Blob>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders one synthetic cell: a pink ellipse on a dark noisy background,
/// plus 1-3 purple blobs inside the cell when `parasitized`.
pub fn render_cell(rng: &mut impl Rng, parasitized: bool) -> (RgbImage, Ellipse, Vec<Blob>) {
    let size = IMAGE_SIZE as f64;
    let cell = Ellipse {
        cx: size / 2.0 + rng.gen_range(-6.0..6.0),
        cy: size / 2.0 + rng.gen_range(-6.0..6.0),
        a: rng.gen_range(30.0..40.0),
        b: rng.gen_range(27.0..37.0),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let tint = [
        rng.gen_range(200.0..230.0),
        rng.gen_range(125.0..155.0),
        rng.gen_range(150.0..180.0),
    ];
    let mut blobs = Vec::new();
    if parasitized {
        let count = rng.gen_range(1..=3);
        while blobs.len() < count {
            let r = rng.gen_range(4.0..7.0);
            // uniform point in the ellipse shrunk so the blob stays inside
            let shrink = 1.0 - (r + 3.0) / cell.a.min(cell.b);
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let rho = rng.gen::<f64>().sqrt() * shrink;
            let (s, c) = cell.angle.sin_cos();
            let (u, v) = (rho * cell.a * t.cos(), rho * cell.b * t.sin());
            blobs.push(Blob {
                cx: cell.cx + u * c - v * s,
                cy: cell.cy + u * s + v * c,
                r,
            });
        }
    }
    let purple = [
        rng.gen_range(100.0..130.0),
        rng.gen_range(30.0..60.0),
        rng.gen_range(135.0..165.0),
    ];
    let mut img = RgbImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (f64::from(x), f64::from(y));
        let rad = cell.radius_at(fx, fy);
        let mut color = [18.0, 12.0, 20.0];
        if rad < 1.0 {
            // slightly darker towards the membrane
            let shade = 1.0 - 0.15 * rad * rad;
            color = [tint[0] * shade, tint[1] * shade, tint[2] * shade];
        }
        for blob in &blobs {
            let d = ((fx - blob.cx).powi(2) + (fy - blob.cy).powi(2)).sqrt();
            let alpha = ((blob.r + 1.5 - d) / 1.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                color[ch] = color[ch] * (1.0 - alpha) + purple[ch] * alpha;
            }
        }
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let noisy = color[ch] + rng.gen_range(-10.0..10.0);
            out[ch] = noisy.round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(out);
    }
    (img, cell, blobs)
}

/// Writes `2 * n_per_class` synthetic PNGs under `out_dir/{parasitized,uninfected}/`
/// plus `manifest.json`, and returns their index. Deterministic in `seed`.
pub fn generate_synthetic(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<DatasetIndex> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut manifest = Vec::with_capacity(2 * n_per_class);
    for label in Label::ALL {
        let dir = out_dir.join(label.name());
        fs::create_dir_all(&dir)?;
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, (label.index() * 1_000_003 + i) as u64));
            let (img, cell, blobs) = render_cell(&mut rng, label == Label::Parasitized);
            let file = format!("{}/{}_{i:05}.png", label.name(), label.name());
            img.save(out_dir.join(&file)).map_err(|source| Error::Image {
                path: out_dir.join(&file),
                source,
            })?;
            manifest.push(ManifestEntry {
                file,
                label,
                cell,
                blobs,
            });
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(out_dir.join(MANIFEST_FILE), json)?;
    index_dataset(out_dir)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fake_index(per_class: [usize; 2]) -> DatasetIndex {
        let mut entries = Vec::new();
        for label in Label::ALL {
            for i in 0..per_class[label.index()] {
                entries.push(IndexEntry {
                    path: PathBuf::from(format!("{}/{i:06}.png", label.name())),
                    label,
                    split: None,
                });
            }
        }
        DatasetIndex { entries, seed: None }
    }

    #[test]
    fn nih_scale_split_counts() {
        let idx = stratified_split(&fake_index([13_779, 13_779]), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!(idx.count(Split::Train, None), 22_596);
        assert_eq!(idx.count(Split::Val, None), 2_481);
        assert_eq!(idx.count(Split::Test, None), 2_481);
        assert_eq!(idx.count(Split::Test, Some(Label::Parasitized)), 1_241);
        assert_eq!(idx.count(Split::Test, Some(Label::Uninfected)), 1_240);
    }

    #[test]
    fn balanced_hundred_is_stratified() {
        let idx = stratified_split(&fake_index([50, 50]), DEFAULT_FRACTIONS, 3).unwrap();
        for split in Split::ALL {
            let n = idx.count(split, None) as f64;
            for label in Label::ALL {
                let got = idx.count(split, Some(label)) as f64;
                assert!((got - n * 0.5).abs() <= 1.0, "{split} {label:?}: {got} of {n}");
            }
        }
        assert_eq!(idx.count(Split::Val, None), 9);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let base = fake_index([40, 37]);
        let a = stratified_split(&base, DEFAULT_FRACTIONS, 5).unwrap();
        let b = stratified_split(&base, DEFAULT_FRACTIONS, 5).unwrap();
        let c = stratified_split(&base, DEFAULT_FRACTIONS, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.entries.iter().all(|e| e.split.is_some()));
    }

    #[test]
    fn split_rejects_bad_input() {
        let idx = fake_index([2, 2]);
        assert!(stratified_split(&idx, [0.5, 0.3, 0.3], 0).is_err());
        // 4 items: val/test need 1 each, train gets 2
        assert!(stratified_split(&idx, DEFAULT_FRACTIONS, 0).is_ok());
        assert!(stratified_split(&fake_index([1, 0]), DEFAULT_FRACTIONS, 0).is_err());
        assert!(stratified_split(&idx, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let idx = stratified_split(&fake_index([5, 4]), DEFAULT_FRACTIONS, 2).unwrap();
        let mut buf = Vec::new();
        idx.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("path,label,split\n"));
        let back = DatasetIndex::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.entries, idx.entries);
    }

    #[test]
    fn epoch_orders() {
        let a = epoch_order(100, Split::Train, 3, 1);
        let b = epoch_order(100, Split::Train, 3, 2);
        assert_ne!(a, b);
        for o in [&a, &b] {
            let set: HashSet<_> = o.iter().collect();
            assert_eq!(set.len(), 100);
        }
        assert_eq!(epoch_order(10, Split::Test, 3, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_order(10, Split::Test, 3, 1), epoch_order(10, Split::Test, 9, 5));
    }

    #[test]
    fn in_memory_batch_sizes() {
        let samples = (0..100)
            .map(|i| (Tensor::full(&[2, 2, 3], i as f64), Label::Parasitized, Split::Train))
            .collect();
        let ds = InMemoryDataset { samples };
        let sizes: Vec<usize> = ds
            .batches(Split::Train, 32, 0, 0)
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
        assert!(ds.batches(Split::Val, 32, 0, 0).is_err());
    }

    #[test]
    fn preprocess_constant_and_range() {
        let gray = RgbImage::from_pixel(37, 53, Rgb([128, 128, 128]));
        let t = preprocess(&gray);
        assert_eq!(t.shape(), &[100, 100, 3]);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));

        let mut exact = RgbImage::new(100, 100);
        exact.put_pixel(3, 7, Rgb([255, 0, 10]));
        let t = preprocess(&exact);
        assert_eq!(t.at(&[7, 3, 0]), 1.0);
        assert_eq!(t.at(&[7, 3, 2]), 10.0 / 255.0);

        let checker = RgbImage::from_fn(200, 200, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        });
        let t = preprocess(&checker);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_blobs_sit_inside_cells() {
        for i in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (_, cell, blobs) = render_cell(&mut rng, true);
            assert!((1..=3).contains(&blobs.len()));
            for b in blobs {
                assert!(cell.contains(b.cx, b.cy));
            }
            let (_, _, none) = render_cell(&mut rng, false);
            assert!(none.is_empty());
        }
    }
}
