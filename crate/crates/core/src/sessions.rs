//! Dataset manifests and the subject-disjoint train/val/test splitter.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub fps: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub session_id: String,
    pub subject_id: String,
    pub audio_path: PathBuf,
    pub video_meta: VideoMeta,
    #[serde(default)]
    pub lighting_tag: String,
    #[serde(default)]
    pub wears_glasses: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_path: Option<PathBuf>,
    /// Binary embedding file (with its `.frames.csv` sidecar).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_path: Option<PathBuf>,
    /// Directory of `frame_<index>.png` images for the default embedder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<PathBuf>,
    /// `frame,blink` CSV of eye-blink flags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blinks_path: Option<PathBuf>,
}

impl SessionManifest {
    pub fn validate(&self) -> Result<()> {
        if self.session_id.is_empty() {
            return Err(Error::Structural("empty session_id".into()));
        }
        if !(self.video_meta.fps > 0.0 && self.video_meta.fps.is_finite()) {
            return Err(Error::Structural(format!(
                "session {}: fps must be positive, got {}",
                self.session_id, self.video_meta.fps
            )));
        }
        if self.video_meta.n_frames == 0 {
            return Err(Error::Structural(format!(
                "session {}: n_frames must be positive",
                self.session_id
            )));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.audio_path);
        for p in [
            &mut self.transcript_path,
            &mut self.embeddings_path,
            &mut self.frames_dir,
            &mut self.blinks_path,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sessions: Vec<SessionManifest>,
}

/// Parses and validates a manifest. Relative paths resolve against the
/// manifest's directory; audio files are not opened here.
pub fn load_dataset(path: &Path) -> Result<Vec<SessionManifest>> {
    let text = fsio::read_to_string(path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| fsio::json_parse_error(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(manifest.sessions.len());
    for mut s in manifest.sessions {
        s.validate()?;
        if !seen.insert(s.session_id.clone()) {
            return Err(Error::Structural(format!(
                "duplicate session_id `{}`",
                s.session_id
            )));
        }
        s.resolve_paths(base);
        out.push(s);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, sessions: &[SessionManifest]) -> Result<()> {
    fsio::write_json_atomic(
        path,
        &DatasetManifest {
            sessions: sessions.to_vec(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// subject_id → partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetSplit(pub BTreeMap<String, Partition>);

impl DatasetSplit {
    pub fn subjects_in(&self, p: Partition) -> BTreeSet<&str> {
        self.0
            .iter()
            .filter(|(_, q)| **q == p)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<Partition, usize> {
        let mut c = BTreeMap::new();
        for p in self.0.values() {
            *c.entry(*p).or_default() += 1;
        }
        c
    }

    /// Sessions per partition, following each session's subject.
    pub fn session_counts(&self, sessions: &[SessionManifest]) -> BTreeMap<Partition, usize> {
        let mut c = BTreeMap::new();
        for s in sessions {
            if let Some(p) = self.0.get(&s.subject_id) {
                *c.entry(*p).or_default() += 1;
            }
        }
        c
    }
}

/// Shuffles the distinct subjects with a seeded permutation and cuts at the
/// fraction boundaries. Val and test counts are rounded; train takes the
/// remainder. Every partition with a nonzero fraction gets at least one
/// subject.
pub fn split_subjects(
    sessions: &[SessionManifest],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (ft + fv + fs - 1.0).abs() > 1e-9
    {
        return Err(Error::Argument(format!(
            "fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let subjects: BTreeSet<&str> = sessions.iter().map(|s| s.subject_id.as_str()).collect();
    let mut subjects: Vec<&str> = subjects.into_iter().collect();
    let n = subjects.len();
    let nonzero = [ft, fv, fs].iter().filter(|f| **f > 0.0).count();
    if n < nonzero {
        return Err(Error::Argument(format!(
            "{n} subjects cannot fill {nonzero} nonempty partitions"
        )));
    }
    let at_least_one = |f: f64, count: usize| if f > 0.0 { count.max(1) } else { count };
    let mut n_val = at_least_one(fv, (n as f64 * fv).round() as usize);
    let mut n_test = at_least_one(fs, (n as f64 * fs).round() as usize);
    let min_train = usize::from(ft > 0.0);
    while n_val + n_test + min_train > n {
        // only reachable through rounding with tiny subject counts
        if n_val >= n_test && n_val > usize::from(fv > 0.0) {
            n_val -= 1;
        } else if n_test > usize::from(fs > 0.0) {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut map = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        let p = if i < n_val {
            Partition::Val
        } else if i < n_val + n_test {
            Partition::Test
        } else {
            Partition::Train
        };
        map.insert(s.to_string(), p);
    }
    Ok(DatasetSplit(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: &str, subject: &str) -> SessionManifest {
        SessionManifest {
            session_id: id.into(),
            subject_id: subject.into(),
            audio_path: format!("{id}.wav").into(),
            video_meta: VideoMeta {
                fps: 30.0,
                n_frames: 100,
            },
            lighting_tag: "day".into(),
            wears_glasses: false,
            transcript_path: None,
            embeddings_path: None,
            frames_dir: None,
            blinks_path: None,
        }
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    const TWO: &str = r#"{"sessions": [
        {"session_id": "a", "subject_id": "s1", "audio_path": "a.wav",
         "video_meta": {"fps": 30, "n_frames": 900}, "lighting_tag": "day",
         "wears_glasses": true, "transcript_path": "a.json"},
        {"session_id": "b", "subject_id": "s2", "audio_path": "/abs/b.wav",
         "video_meta": {"fps": 25, "n_frames": 500}}
    ]}"#;

    #[test]
    fn loads_two_sessions_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), TWO);
        let s = load_dataset(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].audio_path, dir.path().join("a.wav"));
        assert_eq!(
            s[0].transcript_path.as_deref(),
            Some(dir.path().join("a.json").as_path())
        );
        assert_eq!(s[1].audio_path, PathBuf::from("/abs/b.wav"));
        assert!(s[0].wears_glasses);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &TWO.replace("\"b\"", "\"a\""));
        assert!(matches!(load_dataset(&p), Err(Error::Structural(_))));
    }

    #[test]
    fn zero_fps_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &TWO.replace("\"fps\": 25", "\"fps\": 0"));
        assert!(matches!(load_dataset(&p), Err(Error::Structural(_))));
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &TWO.replace("\"subject_id\": \"s2\",", ""));
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("subject_id"), "{err}");
    }

    fn subjects(n: usize) -> Vec<SessionManifest> {
        (0..n)
            .flat_map(|i| {
                (0..1 + i % 3).map(move |j| session(&format!("s{i}-{j}"), &format!("subj{i:03}")))
            })
            .collect()
    }

    #[test]
    fn reported_partition_sizes() {
        let split = split_subjects(&subjects(338), (0.60, 0.245, 0.155), 1).unwrap();
        let c = split.counts();
        assert_eq!(c[&Partition::Train], 203);
        assert_eq!(c[&Partition::Val], 83);
        assert_eq!(c[&Partition::Test], 52);
    }

    #[test]
    fn all_train() {
        let split = split_subjects(&subjects(10), (1.0, 0.0, 0.0), 3).unwrap();
        assert!(split.0.values().all(|p| *p == Partition::Train));
    }

    #[test]
    fn split_is_seeded() {
        let s = subjects(50);
        assert_eq!(
            split_subjects(&s, (0.6, 0.2, 0.2), 9).unwrap(),
            split_subjects(&s, (0.6, 0.2, 0.2), 9).unwrap()
        );
        assert_ne!(
            split_subjects(&s, (0.6, 0.2, 0.2), 9).unwrap(),
            split_subjects(&s, (0.6, 0.2, 0.2), 10).unwrap()
        );
    }

    #[test]
    fn sessions_follow_subjects() {
        let s = subjects(30);
        let split = split_subjects(&s, (0.5, 0.25, 0.25), 4).unwrap();
        let by_partition = split.session_counts(&s);
        assert_eq!(by_partition.values().sum::<usize>(), s.len());
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            let expected = s.iter().filter(|m| split.0[&m.subject_id] == p).count();
            assert_eq!(by_partition.get(&p).copied().unwrap_or(0), expected);
        }
    }

    #[test]
    fn bad_fractions_and_too_few_subjects() {
        assert!(split_subjects(&subjects(10), (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_subjects(&subjects(10), (1.2, -0.2, 0.0), 0).is_err());
        assert!(split_subjects(&subjects(2), (0.4, 0.3, 0.3), 0).is_err());
        let tiny = split_subjects(&subjects(3), (0.9, 0.05, 0.05), 0).unwrap();
        assert_eq!(tiny.counts().len(), 3);
    }
}
