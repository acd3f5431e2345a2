//! Per-video frame database: captions, unit-norm embeddings and the
//! deterministic sampling operations the pipeline draws frames with.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("manifest has no frames")]
    Empty,
    #[error("frame {index}: embedding has length {found}, expected dimension {expected}")]
    DimensionMismatch {
        index: u64,
        expected: usize,
        found: usize,
    },
    #[error("frame {index}: missing embedding")]
    MissingEmbedding { index: u64 },
    #[error("frame {index}: inline embedding not allowed when embeddings_file is set")]
    InlineWithSidecar { index: u64 },
    #[error("embeddings file {path} has {found} bytes, expected {expected} ({frames} frames x {dimension} dims x 4 bytes)")]
    ShortFile {
        path: PathBuf,
        found: u64,
        expected: u64,
        frames: usize,
        dimension: usize,
    },
    #[error("frame {index}: index/timestamp not strictly increasing")]
    NonMonotonic { index: u64 },
    #[error("frame {index}: invalid timestamp {timestamp_s}")]
    BadTimestamp { index: u64, timestamp_s: f64 },
    #[error("frame {index}: embedding has zero norm or non-finite values")]
    DegenerateEmbedding { index: u64 },
    #[error("unknown frame index {0}")]
    UnknownFrame(usize),
}

/// Sorted, duplicate-free set of frame indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameIndexSet(BTreeSet<usize>);

impl FrameIndexSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn insert(&mut self, index: usize) -> bool {
        self.0.insert(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.0.iter().copied().collect()
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self(self.0.intersection(&other.0).copied().collect())
    }

    pub fn union(&self, other: &Self) -> Self {
        Self(self.0.union(&other.0).copied().collect())
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self(self.0.difference(&other.0).copied().collect())
    }

    pub fn extend(&mut self, other: &Self) {
        self.0.extend(other.0.iter().copied());
    }
}

impl FromIterator<usize> for FrameIndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<const N: usize> From<[usize; N]> for FrameIndexSet {
    fn from(items: [usize; N]) -> Self {
        items.into_iter().collect()
    }
}

impl fmt::Display for FrameIndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{idx}")?;
        }
        f.write_str("}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp_s: f64,
    pub caption: String,
    pub embedding: Vec<f32>,
    pub image_ref: Option<String>,
}

/// Immutable after construction; every frame shares `dimension` and
/// carries a unit-L2 embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    video_id: String,
    frames: Vec<Frame>,
    dimension: usize,
    fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    video_id: String,
    dimension: usize,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings_file: Option<String>,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFrame {
    index: u64,
    timestamp_s: f64,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
}

fn default_fps() -> f64 {
    1.0
}

fn normalize(index: u64, raw: &[f32]) -> Result<Vec<f32>, ManifestError> {
    let norm = raw
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(ManifestError::DegenerateEmbedding { index });
    }
    Ok(raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

impl FrameStore {
    /// Builds a store from in-memory frames, validating ordering and
    /// dimensions and normalizing embeddings to unit length.
    pub fn new(
        video_id: impl Into<String>,
        dimension: usize,
        fps: f64,
        frames: Vec<Frame>,
    ) -> Result<Self, ManifestError> {
        if frames.is_empty() {
            return Err(ManifestError::Empty);
        }
        if dimension == 0 {
            return Err(ManifestError::Malformed("dimension must be positive".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(ManifestError::Malformed(format!("fps must be positive, got {fps}")));
        }
        let mut out = Vec::with_capacity(frames.len());
        let mut prev: Option<(usize, f64)> = None;
        for mut frame in frames {
            let idx = frame.index as u64;
            if !(frame.timestamp_s.is_finite() && frame.timestamp_s >= 0.0) {
                return Err(ManifestError::BadTimestamp {
                    index: idx,
                    timestamp_s: frame.timestamp_s,
                });
            }
            if let Some((pi, pt)) = prev {
                if frame.index <= pi || frame.timestamp_s <= pt {
                    return Err(ManifestError::NonMonotonic { index: idx });
                }
            }
            if frame.embedding.len() != dimension {
                return Err(ManifestError::DimensionMismatch {
                    index: idx,
                    expected: dimension,
                    found: frame.embedding.len(),
                });
            }
            frame.embedding = normalize(idx, &frame.embedding)?;
            prev = Some((frame.index, frame.timestamp_s));
            out.push(frame);
        }
        Ok(Self {
            video_id: video_id.into(),
            frames: out,
            dimension,
            fps,
        })
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: ManifestFile =
            serde_json::from_str(&text).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_manifest(manifest, base)
    }

    /// Parses a manifest from a JSON string; a relative `embeddings_file`
    /// is resolved against `base_dir`.
    pub fn from_manifest_str(json: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let manifest: ManifestFile =
            serde_json::from_str(json).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        Self::from_manifest(manifest, base_dir)
    }

    fn from_manifest(manifest: ManifestFile, base_dir: &Path) -> Result<Self, ManifestError> {
        let ManifestFile {
            video_id,
            dimension,
            fps,
            embeddings_file,
            frames,
        } = manifest;
        if frames.is_empty() {
            return Err(ManifestError::Empty);
        }
        if dimension == 0 {
            return Err(ManifestError::Malformed("dimension must be positive".into()));
        }
        let sidecar = match &embeddings_file {
            Some(rel) => {
                if let Some(f) = frames.iter().find(|f| f.embedding.is_some()) {
                    return Err(ManifestError::InlineWithSidecar { index: f.index });
                }
                let path = base_dir.join(rel);
                Some(read_sidecar(&path, frames.len(), dimension)?)
            }
            None => None,
        };
        let mut out = Vec::with_capacity(frames.len());
        for (pos, f) in frames.into_iter().enumerate() {
            let embedding = match (&sidecar, f.embedding) {
                (Some(rows), _) => rows[pos * dimension..(pos + 1) * dimension].to_vec(),
                (None, Some(e)) => e,
                (None, None) => return Err(ManifestError::MissingEmbedding { index: f.index }),
            };
            let index = usize::try_from(f.index)
                .map_err(|_| ManifestError::Malformed(format!("frame index {} too large", f.index)))?;
            out.push(Frame {
                index,
                timestamp_s: f.timestamp_s,
                caption: f.caption,
                embedding,
                image_ref: f.image_ref,
            });
        }
        Self::new(video_id, dimension, fps, out)
    }

    /// Serializes with inline embeddings.
    pub fn to_manifest_json(&self) -> String {
        let manifest = ManifestFile {
            video_id: self.video_id.clone(),
            dimension: self.dimension,
            fps: self.fps,
            embeddings_file: None,
            frames: self
                .frames
                .iter()
                .map(|f| ManifestFrame {
                    index: f.index as u64,
                    timestamp_s: f.timestamp_s,
                    caption: f.caption.clone(),
                    image_ref: f.image_ref.clone(),
                    embedding: Some(f.embedding.clone()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&manifest).expect("manifest serializes")
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Every frame index in the store.
    pub fn universe(&self) -> FrameIndexSet {
        self.frames.iter().map(|f| f.index).collect()
    }

    /// Position of `index` in the ordered frame list.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.frames.binary_search_by_key(&index, |f| f.index).ok()
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.position(index).map(|p| &self.frames[p])
    }

    fn lookup(&self, ids: &FrameIndexSet) -> Result<Vec<&Frame>, ManifestError> {
        ids.iter()
            .map(|i| self.frame(i).ok_or(ManifestError::UnknownFrame(i)))
            .collect()
    }

    /// Evenly spaced sample of `ceil(fraction * len)` frames drawn from the
    /// frames not in `exclude`. Returns the whole eligible pool when it is
    /// smaller than the requested count.
    pub fn uniform_sample(&self, fraction: f64, exclude: &FrameIndexSet) -> FrameIndexSet {
        let eligible: Vec<usize> = self
            .frames
            .iter()
            .map(|f| f.index)
            .filter(|i| !exclude.contains(*i))
            .collect();
        // 1e-9 absorbs products like 0.1 * 30 = 3.0000000000000004.
        let wanted = ((fraction * self.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        even_spaced(&eligible, wanted, 0)
    }

    pub fn captions_for(&self, ids: &FrameIndexSet) -> Result<Vec<&str>, ManifestError> {
        Ok(self.lookup(ids)?.into_iter().map(|f| f.caption.as_str()).collect())
    }

    /// `|ids| x D` matrix, rows in ascending frame-index order.
    pub fn embeddings_for(&self, ids: &FrameIndexSet) -> Result<DMatrix<f64>, ManifestError> {
        let frames = self.lookup(ids)?;
        Ok(embedding_matrix(&frames, self.dimension))
    }

    /// Embedding matrix of the whole store in frame order.
    pub fn all_embeddings(&self) -> DMatrix<f64> {
        let frames: Vec<&Frame> = self.frames.iter().collect();
        embedding_matrix(&frames, self.dimension)
    }
}

fn embedding_matrix(frames: &[&Frame], dimension: usize) -> DMatrix<f64> {
    DMatrix::from_fn(frames.len(), dimension, |r, c| f64::from(frames[r].embedding[c]))
}

fn read_sidecar(path: &Path, frames: usize, dimension: usize) -> Result<Vec<f32>, ManifestError> {
    let bytes = fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let expected = (frames * dimension * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(ManifestError::ShortFile {
            path: path.to_path_buf(),
            found: bytes.len() as u64,
            expected,
            frames,
            dimension,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Picks `count` items at positions `floor(i * n / count) + offset` from
/// `pool`; `offset` is reduced modulo the stride so picks stay in range.
pub fn even_spaced(pool: &[usize], count: usize, offset: u64) -> FrameIndexSet {
    let n = pool.len();
    if count >= n {
        return pool.iter().copied().collect();
    }
    if count == 0 {
        return FrameIndexSet::new();
    }
    let stride = (n / count).max(1) as u64;
    let shift = (offset % stride) as usize;
    (0..count).map(|i| pool[i * n / count + shift]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn store(n: usize) -> FrameStore {
        let frames = (0..n)
            .map(|i| Frame {
                index: i,
                timestamp_s: i as f64,
                caption: format!("caption {i}"),
                embedding: vec![1.0, i as f32],
                image_ref: None,
            })
            .collect();
        FrameStore::new("v", 2, 1.0, frames).unwrap()
    }

    const THREE_INLINE: &str = r#"{
        "video_id": "demo", "dimension": 4, "fps": 1.0,
        "frames": [
            {"index": 0, "timestamp_s": 0.0, "caption": "a", "embedding": [1, 0, 0, 0]},
            {"index": 1, "timestamp_s": 1.0, "caption": "b", "embedding": [0, 2, 0, 0]},
            {"index": 2, "timestamp_s": 2.0, "caption": "c", "embedding": [0, 0, 3, 4], "image_ref": "file:///f2.jpg"}
        ]}"#;

    #[test]
    fn loads_inline_manifest() {
        let s = FrameStore::from_manifest_str(THREE_INLINE, Path::new(".")).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dimension(), 4);
        assert_eq!(s.frame(2).unwrap().embedding, vec![0.0, 0.0, 0.6, 0.8]);
        assert_eq!(s.frame(1).unwrap().embedding, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.frame(2).unwrap().image_ref.as_deref(), Some("file:///f2.jpg"));
    }

    #[test]
    fn dimension_mismatch_names_frame() {
        let mut frames = String::new();
        for i in 0..3 {
            let len = if i == 1 { 511 } else { 512 };
            let emb = vec!["0.5"; len].join(",");
            if i > 0 {
                frames.push(',');
            }
            frames.push_str(&format!(
                r#"{{"index": {i}, "timestamp_s": {i}, "caption": "x", "embedding": [{emb}]}}"#
            ));
        }
        let json = format!(r#"{{"video_id": "v", "dimension": 512, "frames": [{frames}]}}"#);
        let err = FrameStore::from_manifest_str(&json, Path::new(".")).unwrap_err();
        assert!(matches!(
            err,
            ManifestError::DimensionMismatch { index: 1, expected: 512, found: 511 }
        ));
        assert!(err.to_string().contains("frame 1"));
    }

    fn sidecar_manifest(dir: &Path, bytes: usize) -> PathBuf {
        let mut f = fs::File::create(dir.join("emb.f32")).unwrap();
        let values: Vec<u8> = (0..bytes / 4)
            .flat_map(|i| (1.0f32 + i as f32).to_le_bytes())
            .chain(std::iter::repeat_n(0u8, bytes % 4))
            .collect();
        f.write_all(&values).unwrap();
        let manifest = r#"{"video_id": "v", "dimension": 4, "embeddings_file": "emb.f32",
            "frames": [
                {"index": 0, "timestamp_s": 0.0, "caption": "a"},
                {"index": 1, "timestamp_s": 1.0, "caption": "b"},
                {"index": 2, "timestamp_s": 2.0, "caption": "c"}]}"#;
        let path = dir.join("manifest.json");
        fs::write(&path, manifest).unwrap();
        path
    }

    #[test]
    fn sidecar_byte_count() {
        // 3 frames x 4 dims x 4 bytes = 48
        let dir = tempfile::tempdir().unwrap();
        let ok = sidecar_manifest(dir.path(), 48);
        let s = FrameStore::load_manifest(&ok).unwrap();
        assert_eq!(s.len(), 3);
        let row0: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0];
        let norm = (1.0f64 + 4.0 + 9.0 + 16.0).sqrt();
        for (a, b) in s.frame(0).unwrap().embedding.iter().zip(&row0) {
            assert!((f64::from(*a) - f64::from(*b) / norm).abs() < 1e-6);
        }

        let dir = tempfile::tempdir().unwrap();
        let short = sidecar_manifest(dir.path(), 44);
        match FrameStore::load_manifest(&short).unwrap_err() {
            ManifestError::ShortFile { found, expected, .. } => {
                assert_eq!((found, expected), (44, 48));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn inline_embedding_with_sidecar_rejected() {
        let json = r#"{"video_id": "v", "dimension": 1, "embeddings_file": "x.f32",
            "frames": [{"index": 3, "timestamp_s": 0.0, "caption": "a", "embedding": [1]}]}"#;
        let err = FrameStore::from_manifest_str(json, Path::new(".")).unwrap_err();
        assert!(matches!(err, ManifestError::InlineWithSidecar { index: 3 }));
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let json = r#"{"video_id": "v", "dimension": 1, "frames": [
            {"index": 0, "timestamp_s": 0.0, "caption": "a", "embedding": [1]},
            {"index": 1, "timestamp_s": 2.0, "caption": "b", "embedding": [1]},
            {"index": 2, "timestamp_s": 1.5, "caption": "c", "embedding": [1]}]}"#;
        let err = FrameStore::from_manifest_str(json, Path::new(".")).unwrap_err();
        assert!(matches!(err, ManifestError::NonMonotonic { index: 2 }));
    }

    #[test]
    fn malformed_and_empty() {
        assert!(matches!(
            FrameStore::from_manifest_str("{", Path::new(".")).unwrap_err(),
            ManifestError::Malformed(_)
        ));
        let json = r#"{"video_id": "v", "dimension": 1, "frames": []}"#;
        assert!(matches!(
            FrameStore::from_manifest_str(json, Path::new(".")).unwrap_err(),
            ManifestError::Empty
        ));
    }

    #[test]
    fn uniform_ten_percent() {
        let s = store(100);
        let got = s.uniform_sample(0.10, &FrameIndexSet::new());
        assert_eq!(got.to_vec(), (0..10).map(|i| i * 10).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_full_and_small_pool() {
        let s = store(5);
        assert_eq!(s.uniform_sample(1.0, &FrameIndexSet::new()).len(), 5);
        let s = store(10);
        let exclude: FrameIndexSet = (0..8).collect();
        assert_eq!(s.uniform_sample(0.5, &exclude).to_vec(), vec![8, 9]);
    }

    #[test]
    fn uniform_count_tolerates_float_noise() {
        // 0.1 * 30 is 3.0000000000000004 in binary floating point
        let s = store(30);
        assert_eq!(s.uniform_sample(0.1, &FrameIndexSet::new()).len(), 3);
    }

    #[test]
    fn captions_sorted_and_unknown() {
        let s = store(6);
        assert_eq!(s.captions_for(&[2].into()).unwrap(), vec!["caption 2"]);
        assert!(s.captions_for(&FrameIndexSet::new()).unwrap().is_empty());
        assert_eq!(
            s.captions_for(&[5, 1].into()).unwrap(),
            vec!["caption 1", "caption 5"]
        );
        assert!(matches!(
            s.captions_for(&[9].into()).unwrap_err(),
            ManifestError::UnknownFrame(9)
        ));
        let e = s.embeddings_for(&[5, 1].into()).unwrap();
        assert_eq!(e.nrows(), 2);
        assert!((e[(1, 1)] - 5.0 / 26f64.sqrt()).abs() < 1e-6);
        assert!(s.embeddings_for(&[7].into()).is_err());
    }

    #[test]
    fn round_trip() {
        let s = FrameStore::from_manifest_str(THREE_INLINE, Path::new(".")).unwrap();
        let again = FrameStore::from_manifest_str(&s.to_manifest_json(), Path::new(".")).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn even_spaced_offset_stays_in_range() {
        let pool: Vec<usize> = (100..110).collect();
        for off in 0..20 {
            let got = even_spaced(&pool, 3, off);
            assert_eq!(got.len(), 3);
            assert!(got.iter().all(|i| (100..110).contains(&i)));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sample_avoids_exclude_and_is_deterministic(
                n in 1usize..120,
                fraction in 0.01f64..=1.0,
                excl in proptest::collection::btree_set(0usize..120, 0..60),
            ) {
                let s = store(n);
                let exclude: FrameIndexSet = excl.into_iter().collect();
                let a = s.uniform_sample(fraction, &exclude);
                let b = s.uniform_sample(fraction, &exclude);
                prop_assert_eq!(
                    serde_json::to_string(&a).unwrap(),
                    serde_json::to_string(&b).unwrap()
                );
                prop_assert!(a.intersection(&exclude).is_empty());
                let eligible = n - exclude.iter().filter(|&i| i < n).count();
                let wanted = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
                prop_assert_eq!(a.len(), wanted.min(eligible));
            }
        }
    }
}
