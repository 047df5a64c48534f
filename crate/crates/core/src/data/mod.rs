//! Dataset manifests, stratified splitting, minority up-sampling and image loading.

mod image;
mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use self::image::{augment, resize, resize_plane, to_tensor, AugmentParams, Image, Sample};
pub use self::synth::{synth_dataset, SynthConfig};
use crate::error::{Error, Result};

/// One labelled image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    pub label: String,
    pub class_index: usize,
    /// Row of the source CSV. Duplicates made by up-sampling share it.
    pub record_id: usize,
    /// 0 for the original record, `k` for its k-th duplicate.
    pub copy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    pub image_root: PathBuf,
}

impl DatasetManifest {
    /// Records are assigned class indices from their label.
    pub fn new(class_names: Vec<String>, image_root: PathBuf, items: Vec<(String, String)>) -> Result<Self> {
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut records = Vec::with_capacity(items.len());
        for (row, (image, label)) in items.into_iter().enumerate() {
            let class_index = *index
                .get(label.as_str())
                .ok_or_else(|| Error::Manifest(format!("unknown label {label:?} for image {image:?}")))?;
            records.push(Record {
                image,
                label,
                class_index,
                record_id: row,
                copy: 0,
            });
        }
        Ok(DatasetManifest {
            records,
            class_names,
            image_root,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            counts[r.class_index] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_index).collect()
    }

    fn with_records(&self, records: Vec<Record>) -> Self {
        DatasetManifest {
            records,
            class_names: self.class_names.clone(),
            image_root: self.image_root.clone(),
        }
    }

    /// Re-index records against a fixed class list, e.g. the one a model was trained with.
    pub fn with_class_order(&self, class_names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut records = self.records.clone();
        for r in &mut records {
            r.class_index = *index
                .get(r.label.as_str())
                .ok_or_else(|| Error::Manifest(format!("unknown label {:?}", r.label)))?;
        }
        Ok(DatasetManifest {
            records,
            class_names: class_names.to_vec(),
            image_root: self.image_root.clone(),
        })
    }

    /// Resolve a record's image file. Ids without an extension try `.png` then `.ppm`.
    pub fn image_path(&self, record: &Record) -> PathBuf {
        let p = self.image_root.join(&record.image);
        if p.extension().is_some() || p.exists() {
            return p;
        }
        ["png", "ppm"]
            .iter()
            .map(|e| p.with_extension(e))
            .find(|c| c.exists())
            .unwrap_or(p)
    }

    /// Write as a CSV with `image,label` columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["image", "label"])?;
        for r in &self.records {
            w.write_record([&r.image, &r.label])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Parse a manifest CSV with an `image` column and either a `label` column
/// or one one-hot column per class. Class order is the sorted label set or
/// the one-hot column order.
pub fn load_manifest(csv_path: &Path, image_root: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let image_col = headers
        .iter()
        .position(|h| h == "image")
        .ok_or_else(|| Error::Manifest(format!("{}: no `image` column", csv_path.display())))?;
    let label_col = headers.iter().position(|h| h == "label");
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let image = rec
            .get(image_col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Manifest(format!("line {line}: empty image id")))?
            .to_string();
        if !seen.insert(image.clone()) {
            return Err(Error::Manifest(format!("line {line}: duplicate image id {image:?}")));
        }
        let label = match label_col {
            Some(c) => rec
                .get(c)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Manifest(format!("line {line}: empty label")))?
                .to_string(),
            None => one_hot_label(&headers, image_col, &rec, line)?,
        };
        items.push((image, label));
    }
    let class_names: Vec<String> = match label_col {
        Some(_) => items.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
        None => headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != image_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if class_names.is_empty() {
        return Err(Error::Manifest(format!("{}: no classes", csv_path.display())));
    }
    DatasetManifest::new(class_names, image_root.to_path_buf(), items)
}

fn one_hot_label(headers: &[String], image_col: usize, rec: &csv::StringRecord, line: usize) -> Result<String> {
    let mut hit = None;
    for (i, h) in headers.iter().enumerate() {
        if i == image_col {
            continue;
        }
        let raw = rec.get(i).unwrap_or("").trim();
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::Manifest(format!("line {line}: column {h:?} value {raw:?} is not numeric")))?;
        if v > 0.5 {
            if hit.is_some() {
                return Err(Error::Manifest(format!("line {line}: more than one positive class")));
            }
            hit = Some(h.clone());
        }
    }
    hit.ok_or_else(|| Error::Manifest(format!("line {line}: no positive class")))
}

/// Split ratios `(train, val, test)`.
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Apportion `total_fraction · n_c` over classes so the per-class counts sum
/// to the rounded global target, giving leftover units to the largest
/// fractional remainders.
fn apportion(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = target.saturating_sub(alloc.iter().sum());
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Per-class shuffled partition into train/val/test.
pub fn stratified_split(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let counts = manifest.counts();
    if let Some((c, &n)) = counts.iter().enumerate().find(|&(_, &n)| n < 3) {
        return Err(Error::InvalidArgument(format!(
            "class {:?} has {n} samples; at least 3 are needed to split",
            manifest.class_names[c]
        )));
    }
    let train_n = apportion(&counts, ratios[0]);
    let upto_val = apportion(&counts, ratios[0] + ratios[1]);
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for c in 0..counts.len() {
        let mut members: Vec<&Record> = manifest.records.iter().filter(|r| r.class_index == c).collect();
        members.shuffle(&mut crate::seed::rng(seed, "split", &[c as u64]));
        let cut_val = upto_val[c].max(train_n[c]);
        parts[0].extend(members[..train_n[c]].iter().map(|&r| r.clone()));
        parts[1].extend(members[train_n[c]..cut_val].iter().map(|&r| r.clone()));
        parts[2].extend(members[cut_val..].iter().map(|&r| r.clone()));
    }
    let [train, val, test] = parts;
    Ok(Splits {
        train: manifest.with_records(train),
        val: manifest.with_records(val),
        test: manifest.with_records(test),
    })
}

/// Duplicate every minority class up to the majority count by whole-set
/// repetition followed by a prefix of the class's records.
pub fn upsample_minority(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("cannot up-sample an empty manifest".into()));
    }
    let counts = manifest.counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut records = manifest.records.clone();
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 || n == target {
            continue;
        }
        let members: Vec<&Record> = manifest.records.iter().filter(|r| r.class_index == c).collect();
        for i in n..target {
            let mut r = members[i % n].clone();
            r.copy = i / n;
            records.push(r);
        }
    }
    Ok(manifest.with_records(records))
}

/// Order of up-sampling relative to splitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Split first, then up-sample the training split only.
    #[default]
    SplitThenUpsample,
    /// Up-sample the whole set, then split. Duplicates can land in validation and test.
    UpsampleThenSplit,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::SplitThenUpsample => "split-then-upsample",
            Protocol::UpsampleThenSplit => "upsample-then-split",
        }
    }
}

/// Split and balance according to `protocol`.
pub fn prepare_splits(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64, protocol: Protocol) -> Result<Splits> {
    match protocol {
        Protocol::SplitThenUpsample => {
            let mut s = stratified_split(manifest, ratios, seed)?;
            s.train = upsample_minority(&s.train)?;
            Ok(s)
        }
        Protocol::UpsampleThenSplit => stratified_split(&upsample_minority(manifest)?, ratios, seed),
    }
}

/// Decoded images of a manifest, resized to a fixed size.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub samples: Vec<Sample>,
    pub copies: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LoadedSet {
    /// Decode each distinct image once; duplicates share pixels.
    pub fn load(manifest: &DatasetManifest, height: usize, width: usize) -> Result<Self> {
        let mut cache: HashMap<usize, Image> = HashMap::new();
        let mut samples = Vec::with_capacity(manifest.len());
        let mut copies = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let pixels = match cache.get(&r.record_id) {
                Some(img) => img.clone(),
                None => {
                    let img = resize(&Image::load(&manifest.image_path(r))?, height, width)?;
                    cache.insert(r.record_id, img.clone());
                    img
                }
            };
            samples.push(Sample {
                pixels,
                class_index: r.class_index,
                record_id: r.record_id,
                augmentation: None,
            });
            copies.push(r.copy);
        }
        Ok(LoadedSet {
            samples,
            copies,
            class_names: manifest.class_names.clone(),
        })
    }

    pub fn from_samples(samples: Vec<Sample>, class_names: Vec<String>) -> Self {
        LoadedSet {
            copies: vec![0; samples.len()],
            samples,
            class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_index).collect()
    }

    /// Seed for augmenting sample `i` in `epoch`.
    pub fn sample_seed(&self, global: u64, i: usize, epoch: usize) -> u64 {
        let s = &self.samples[i];
        crate::seed::derive(global, &[s.record_id as u64, self.copies[i] as u64, epoch as u64])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let items = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| (format!("img_{c}_{i}"), format!("c{c}"))))
            .collect();
        DatasetManifest::new(names, PathBuf::from("."), items).unwrap()
    }

    #[test]
    fn label_and_one_hot_forms_agree() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "image,label\nx1,mel\nx2,nv\nx3,mel\n").unwrap();
        std::fs::write(&b, "image,mel,nv\nx1,1.0,0.0\nx2,0.0,1.0\nx3,1.0,0.0\n").unwrap();
        let ma = load_manifest(&a, dir.path()).unwrap();
        let mb = load_manifest(&b, dir.path()).unwrap();
        assert_eq!(ma.counts(), vec![2, 1]);
        assert_eq!(ma, mb);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,mel,nv\nx1,0,0\n").unwrap();
        assert!(matches!(load_manifest(&p, dir.path()), Err(Error::Manifest(_))));
        std::fs::write(&p, "image,label\nx1,a\nx1,b\n").unwrap();
        assert!(matches!(load_manifest(&p, dir.path()), Err(Error::Manifest(_))));
        assert!(matches!(load_manifest(&dir.path().join("nope.csv"), dir.path()), Err(Error::Io { .. })));
        let m = load_manifest(&{
            std::fs::write(&p, "image,label\nx1,a\n").unwrap();
            p.clone()
        }, dir.path())
        .unwrap();
        assert!(m.with_class_order(&["b".to_string()]).is_err());
    }

    #[test]
    fn ten_of_one_class() {
        let s = stratified_split(&manifest(&[10]), DEFAULT_RATIOS, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let m = manifest(&[13, 7, 5]);
        let a = stratified_split(&m, DEFAULT_RATIOS, 4).unwrap();
        assert_eq!(a, stratified_split(&m, DEFAULT_RATIOS, 4).unwrap());
        let mut all: Vec<&Record> = a.train.records.iter().chain(&a.val.records).chain(&a.test.records).collect();
        all.sort_by_key(|r| r.record_id);
        assert_eq!(all.len(), m.len());
        assert!(all.iter().zip(&m.records).all(|(a, b)| *a == b));
        assert!(stratified_split(&manifest(&[5, 2]), DEFAULT_RATIOS, 0).is_err());
    }

    #[test]
    fn upsample_hand_trace() {
        let m = manifest(&[5, 2]);
        let u = upsample_minority(&m).unwrap();
        assert_eq!(u.counts(), vec![5, 5]);
        let minority: Vec<&str> = u.records.iter().filter(|r| r.class_index == 1).map(|r| r.image.as_str()).collect();
        assert_eq!(minority, ["img_1_0", "img_1_1", "img_1_0", "img_1_1", "img_1_0"]);
        let balanced = manifest(&[3, 3]);
        assert_eq!(upsample_minority(&balanced).unwrap(), balanced);
    }
}
