//! Dataset container, the on-disk directory format, and split operations.
//!
//! A dataset directory holds:
//! - `meta.json`: schema version, shapes, joint and label names, endianness;
//! - `data.f32`: little-endian 32-bit floats, row-major `N x T x J x C`;
//! - `labels.u8` (optional): one byte per sample, 0-3 for classes, 255 for
//!   unlabeled.
//!
//! Writes are bit-exact: saving the same dataset twice produces byte-identical
//! payload files.

use crate::error::{Error, Result};
use crate::rng::{tags, RngStream};
use crate::sequence::{
    EmotionClass, SkeletonSequence, CANON_COORDS, CANON_FRAMES, CANON_JOINTS, CLASS_NAMES,
};
use crate::topology::JointTopology;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
const UNLABELED: u8 = 255;

/// Per-sample split marker. Not persisted; assigned by `split_dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    Unassigned,
}

/// A collection of canonical skeleton sequences sharing one topology.
#[derive(Debug, Clone)]
pub struct GaitDataset {
    pub sequences: Vec<SkeletonSequence>,
    pub topology: JointTopology,
    pub split_tags: Vec<SplitTag>,
}

impl GaitDataset {
    pub fn new(sequences: Vec<SkeletonSequence>, topology: JointTopology) -> Self {
        let n = sequences.len();
        Self {
            sequences,
            topology,
            split_tags: vec![SplitTag::Unassigned; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Labels as indices; `None` for unlabeled samples.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.sequences
            .iter()
            .map(|s| s.label.map(|l| l.index()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        for seq in &self.sequences {
            seq.validate_canonical()?;
        }
        Ok(())
    }

    /// Exact elementwise equality of data and labels (split tags ignored).
    pub fn same_payload(&self, other: &GaitDataset) -> bool {
        self.len() == other.len()
            && self
                .sequences
                .iter()
                .zip(&other.sequences)
                .all(|(a, b)| a.data == b.data && a.label == b.label)
    }

    fn subset(&self, indices: &[usize], tag: SplitTag) -> GaitDataset {
        let sequences = indices.iter().map(|&i| self.sequences[i].clone()).collect();
        GaitDataset {
            sequences,
            topology: self.topology.clone(),
            split_tags: vec![tag; indices.len()],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    n: usize,
    t: usize,
    j: usize,
    c: usize,
    joint_names: Vec<String>,
    label_names: Vec<String>,
    endianness: String,
}

/// Write the directory format. The float payload is the f32 representation of
/// the in-memory values; canonical datasets (loaded or generated) round-trip
/// exactly.
pub fn save_dataset(ds: &GaitDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;

    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        n: ds.len(),
        t: CANON_FRAMES,
        j: CANON_JOINTS,
        c: CANON_COORDS,
        joint_names: ds.topology.joint_names.clone(),
        label_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        endianness: "little".into(),
    };
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail");
    write_file(&meta_path, meta_json.as_bytes())?;

    let mut payload = Vec::with_capacity(ds.len() * CANON_FRAMES * CANON_JOINTS * CANON_COORDS * 4);
    for seq in &ds.sequences {
        for &v in seq.data.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(&dir.join("data.f32"), &payload)?;

    if ds.sequences.iter().any(|s| s.label.is_some()) {
        let bytes: Vec<u8> = ds
            .sequences
            .iter()
            .map(|s| s.label.map_or(UNLABELED, |l| l.index() as u8))
            .collect();
        write_file(&dir.join("labels.u8"), &bytes)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read the directory format back; inverse of [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<GaitDataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::Io {
        path: meta_path.clone(),
        source: e,
    })?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;

    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::UnknownSchema {
            found: meta.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    if meta.endianness != "little" {
        return Err(Error::UnsupportedEndianness(meta.endianness));
    }
    if (meta.t, meta.j, meta.c) != (CANON_FRAMES, CANON_JOINTS, CANON_COORDS) {
        return Err(Error::ShapeMismatch {
            context: "meta.json".into(),
            expected: format!("t={CANON_FRAMES}, j={CANON_JOINTS}, c={CANON_COORDS}"),
            found: format!("t={}, j={}, c={}", meta.t, meta.j, meta.c),
        });
    }

    let data_path = dir.join("data.f32");
    if !data_path.exists() {
        return Err(Error::MissingFile(data_path));
    }
    let bytes = fs::read(&data_path).map_err(|e| Error::Io {
        path: data_path.clone(),
        source: e,
    })?;
    let per_sample = CANON_FRAMES * CANON_JOINTS * CANON_COORDS;
    let expected_bytes = meta.n * per_sample * 4;
    if bytes.len() != expected_bytes {
        return Err(Error::ShapeMismatch {
            context: "data.f32".into(),
            expected: format!("{expected_bytes} bytes for n={}", meta.n),
            found: format!("{} bytes", bytes.len()),
        });
    }

    let labels_path = dir.join("labels.u8");
    let labels: Option<Vec<u8>> = if labels_path.exists() {
        let lb = fs::read(&labels_path).map_err(|e| Error::Io {
            path: labels_path.clone(),
            source: e,
        })?;
        if lb.len() != meta.n {
            return Err(Error::ShapeMismatch {
                context: "labels.u8".into(),
                expected: format!("{} bytes", meta.n),
                found: format!("{} bytes", lb.len()),
            });
        }
        Some(lb)
    } else {
        None
    };

    let mut sequences = Vec::with_capacity(meta.n);
    for i in 0..meta.n {
        let mut data = Array3::<f64>::zeros((CANON_FRAMES, CANON_JOINTS, CANON_COORDS));
        let base = i * per_sample * 4;
        for (k, v) in data.iter_mut().enumerate() {
            let off = base + k * 4;
            let raw = f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]);
            if !raw.is_finite() {
                return Err(Error::NonFinite(format!("sample {i}, element {k}")));
            }
            *v = raw as f64;
        }
        let label = match &labels {
            None => None,
            Some(lb) => match lb[i] {
                UNLABELED => None,
                v => Some(
                    EmotionClass::from_index(v as usize)
                        .ok_or(Error::InvalidLabel { index: i, value: v })?,
                ),
            },
        };
        sequences.push(SkeletonSequence::new(data, label));
    }

    let mut topology = JointTopology::canonical16();
    if meta.joint_names.len() != topology.joint_names.len() {
        return Err(Error::ShapeMismatch {
            context: "meta.json joint_names".into(),
            expected: format!("{} names", topology.joint_names.len()),
            found: format!("{} names", meta.joint_names.len()),
        });
    }
    topology.joint_names = meta.joint_names;
    Ok(GaitDataset::new(sequences, topology))
}

/// Random disjoint train/test partition; `|train| = round(ratio * N)`.
pub fn split_dataset(
    ds: &GaitDataset,
    ratio: f64,
    seed: u64,
) -> Result<(GaitDataset, GaitDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio must lie in (0,1), got {ratio}"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall(n, 2));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    RngStream::new(seed)
        .substream(&[tags::SPLIT])
        .shuffle(&mut indices);
    let train = ds.subset(&indices[..n_train], SplitTag::Train);
    let test = ds.subset(&indices[n_train..], SplitTag::Test);
    Ok((train, test))
}

/// Pick `ceil(fraction * N)` labeled samples uniformly at random without
/// replacement. With `stratified` set, the selection is done per class with
/// largest-remainder apportionment of the subset size.
pub fn select_labeled_fraction(
    ds: &GaitDataset,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<GaitDataset> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "labeled fraction must lie in (0,1], got {fraction}"
        )));
    }
    if let Some(i) = ds.sequences.iter().position(|s| s.label.is_none()) {
        return Err(Error::MissingLabel(i));
    }
    let n = ds.len();
    let k = (fraction * n as f64).ceil() as usize;
    let k = k.min(n).max(1);
    let mut rng = RngStream::new(seed).substream(&[tags::SELECT]);

    let chosen: Vec<usize> = if !stratified {
        rng.choose_distinct(n, k)
    } else {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); crate::sequence::NUM_CLASSES];
        for (i, s) in ds.sequences.iter().enumerate() {
            per_class[s.label.expect("checked above").index()].push(i);
        }
        let fractions: Vec<f64> = per_class.iter().map(|v| v.len() as f64 / n as f64).collect();
        let counts = largest_remainder(k, &fractions);
        let mut out = Vec::with_capacity(k);
        for (c, pool) in per_class.iter().enumerate() {
            let take = counts[c].min(pool.len());
            for pick in rng.choose_distinct(pool.len(), take) {
                out.push(pool[pick]);
            }
        }
        out
    };
    Ok(ds.subset(&chosen, SplitTag::Train))
}

/// Apportion `total` into integer counts proportional to `fractions` using the
/// largest-remainder rule. Ties go to the lower index.
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig};
    use tempfile::TempDir;

    fn small_dataset(n: usize, seed: u64) -> GaitDataset {
        let cfg = SynthConfig {
            n_samples: n,
            seed,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, &JointTopology::canonical16()).unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let ds = small_dataset(6, 11);
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(ds.same_payload(&back));
    }

    #[test]
    fn two_saves_are_byte_identical() {
        let ds = small_dataset(5, 3);
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        save_dataset(&ds, d1.path()).unwrap();
        save_dataset(&ds, d2.path()).unwrap();
        let b1 = std::fs::read(d1.path().join("data.f32")).unwrap();
        let b2 = std::fs::read(d2.path().join("data.f32")).unwrap();
        assert_eq!(b1, b2);
        let l1 = std::fs::read(d1.path().join("labels.u8")).unwrap();
        let l2 = std::fs::read(d2.path().join("labels.u8")).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let ds = GaitDataset::new(Vec::new(), JointTopology::canonical16());
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn absent_labels_file_means_unlabeled() {
        let ds = small_dataset(4, 1);
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("labels.u8")).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.sequences.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn meta_count_mismatch_is_shape_error() {
        let ds = small_dataset(4, 1);
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // Claim n=5 while the tensor file holds 4 samples.
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, text.replace("\"n\": 4", "\"n\": 5")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_schema_is_distinct_error() {
        let ds = small_dataset(2, 1);
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(
            &meta_path,
            text.replace("\"schema_version\": 1", "\"schema_version\": 9"),
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::UnknownSchema { found: 9, .. }) => {}
            other => panic!("expected unknown schema, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let ds = small_dataset(2, 1);
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let data_path = dir.path().join("data.f32");
        let mut bytes = std::fs::read(&data_path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&data_path, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn missing_files_are_distinct_errors() {
        let dir = TempDir::new().unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("meta.json")),
            other => panic!("expected missing file, got {other:?}"),
        }
        let ds = small_dataset(2, 1);
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("data.f32")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("data.f32")),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn split_80_20() {
        let ds = small_dataset(100, 5);
        let (train, test) = split_dataset(&ds, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = small_dataset(40, 5);
        let (a_train, a_test) = split_dataset(&ds, 0.8, 123).unwrap();
        let (b_train, b_test) = split_dataset(&ds, 0.8, 123).unwrap();
        assert!(a_train.same_payload(&b_train));
        assert!(a_test.same_payload(&b_test));
    }

    #[test]
    fn split_small_is_disjoint_and_exhaustive() {
        // Oracle: enumerate every sequence by its payload and check the two
        // sides partition the input exactly.
        let ds = small_dataset(5, 9);
        let (train, test) = split_dataset(&ds, 0.8, 2).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 1);
        let mut found = vec![0usize; ds.len()];
        for part in [&train, &test] {
            for seq in &part.sequences {
                let idx = ds
                    .sequences
                    .iter()
                    .position(|s| s.data == seq.data)
                    .expect("split sample must come from the input");
                found[idx] += 1;
            }
        }
        assert!(found.iter().all(|&c| c == 1), "partition must be exact: {found:?}");
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        let ds = small_dataset(1, 0);
        assert!(matches!(
            split_dataset(&ds, 0.8, 0),
            Err(Error::DatasetTooSmall(1, 2))
        ));
    }

    #[test]
    fn select_fraction_counts() {
        let ds = small_dataset(400, 8);
        let sel = select_labeled_fraction(&ds, 0.05, 1, false).unwrap();
        assert_eq!(sel.len(), 20);
        let ds403 = small_dataset(403, 8);
        let sel2 = select_labeled_fraction(&ds403, 0.05, 1, false).unwrap();
        assert_eq!(sel2.len(), 21); // ceiling of 20.15
    }

    #[test]
    fn select_full_fraction_is_whole_dataset() {
        let ds = small_dataset(12, 2);
        let sel = select_labeled_fraction(&ds, 1.0, 4, false).unwrap();
        assert_eq!(sel.len(), 12);
        let mut matched = 0;
        for seq in &sel.sequences {
            if ds.sequences.iter().any(|s| s.data == seq.data) {
                matched += 1;
            }
        }
        assert_eq!(matched, 12);
    }

    #[test]
    fn select_is_deterministic() {
        let ds = small_dataset(50, 2);
        let a = select_labeled_fraction(&ds, 0.2, 77, false).unwrap();
        let b = select_labeled_fraction(&ds, 0.2, 77, false).unwrap();
        assert!(a.same_payload(&b));
    }

    #[test]
    fn select_requires_labels() {
        let mut ds = small_dataset(10, 2);
        ds.sequences[3].label = None;
        assert!(matches!(
            select_labeled_fraction(&ds, 0.5, 0, false),
            Err(Error::MissingLabel(3))
        ));
    }

    #[test]
    fn largest_remainder_table1_counts() {
        let counts = largest_remainder(400, &[0.5503, 0.2345, 0.1461, 0.0690]);
        assert_eq!(counts, vec![220, 94, 58, 28]);
    }
}
