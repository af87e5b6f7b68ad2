//! Label refinement: clustering frame embeddings to correct labels near
//! gaze transitions, and carrying labels across eye blinks.

mod embeddings;
mod kmeans;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{FrameLabel, FrameLabels, Provenance};
use crate::error::{Error, Result};

pub use embeddings::{
    image_embedding, read_frame_sidecar, read_matrix, sidecar_path, write_frame_sidecar,
    write_matrix, EmbeddingProvider, EmbeddingSet, FileEmbeddings, ImageEmbeddings, Matrix,
    IMAGE_EMBEDDING_SIDE, MAGIC, VERSION_PLAIN, VERSION_SHAPED,
};
pub use kmeans::{
    assign, kmeans, kmeans_plus_plus_init, lloyd, squared_distance, update_centers, ClusterModel,
};

/// Cluster index → zone. `None` marks a cluster with no claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterZoneMap(pub Vec<Option<u8>>);

impl ClusterZoneMap {
    pub fn zone(&self, cluster: usize) -> Option<u8> {
        self.0.get(cluster).copied().flatten()
    }
}

/// Maps each cluster to the majority zone of its labelled members. Larger
/// clusters choose first; a cluster whose majority zone is already taken
/// falls back to its next most frequent unclaimed zone.
pub fn map_clusters_to_zones(
    model: &ClusterModel,
    labels: &FrameLabels,
    embeddings: &EmbeddingSet,
) -> Result<ClusterZoneMap> {
    if model.assignments.len() != embeddings.len() {
        return Err(Error::Structural(format!(
            "model has {} assignments but {} embeddings were given",
            model.assignments.len(),
            embeddings.len()
        )));
    }
    let mut counts: Vec<BTreeMap<u8, usize>> = vec![BTreeMap::new(); model.k];
    for (i, &frame) in embeddings.frame_indices().iter().enumerate() {
        if frame >= labels.n_frames() {
            return Err(Error::Structural(format!(
                "embedding for frame {frame} but only {} frames are labelled",
                labels.n_frames()
            )));
        }
        if let Some(z) = labels.zone(frame) {
            *counts[model.assignments[i]].entry(z).or_default() += 1;
        }
    }
    let mut order: Vec<usize> = (0..model.k).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c].values().sum::<usize>()), c));
    let mut claimed = Vec::new();
    let mut map = vec![None; model.k];
    for c in order {
        let mut prefs: Vec<(u8, usize)> = counts[c].iter().map(|(z, n)| (*z, *n)).collect();
        prefs.sort_by_key(|&(z, n)| (std::cmp::Reverse(n), z));
        if let Some(&(z, _)) = prefs.iter().find(|(z, _)| !claimed.contains(z)) {
            claimed.push(z);
            map[c] = Some(z);
        }
    }
    Ok(ClusterZoneMap(map))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneChange {
    pub gained: usize,
    pub lost: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineReport {
    pub transition_frames: usize,
    pub changed_frames: usize,
    pub missing_embeddings: usize,
    pub unmapped_cluster_frames: usize,
    pub propagated_frames: usize,
    pub per_zone: BTreeMap<u8, ZoneChange>,
}

impl RefineReport {
    pub fn absorb(&mut self, other: &RefineReport) {
        self.transition_frames += other.transition_frames;
        self.changed_frames += other.changed_frames;
        self.missing_embeddings += other.missing_embeddings;
        self.unmapped_cluster_frames += other.unmapped_cluster_frames;
        self.propagated_frames += other.propagated_frames;
        for (z, c) in &other.per_zone {
            let e = self.per_zone.entry(*z).or_default();
            e.gained += c.gained;
            e.lost += c.lost;
        }
    }

    fn record_change(&mut self, from: Option<u8>, to: u8) {
        if from == Some(to) {
            return;
        }
        self.changed_frames += 1;
        self.per_zone.entry(to).or_default().gained += 1;
        if let Some(f) = from {
            self.per_zone.entry(f).or_default().lost += 1;
        }
    }
}

/// Frames within `halfwidth` of a label boundary. A boundary sits between
/// frames `f - 1` and `f` whenever their zones differ; it covers
/// `f - halfwidth ..= f + halfwidth - 1`.
pub fn transition_mask(labels: &FrameLabels, halfwidth: usize) -> Vec<bool> {
    let n = labels.n_frames();
    let mut mask = vec![false; n];
    if halfwidth == 0 {
        return mask;
    }
    for f in 1..n {
        if labels.zone(f) != labels.zone(f - 1) {
            let lo = f.saturating_sub(halfwidth);
            let hi = (f + halfwidth).min(n);
            mask[lo..hi].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Relabels labelled frames near zone boundaries with the zone of their
/// nearest cluster center. Unlabelled frames are left alone, as are frames
/// with no embedding or whose cluster has no zone.
pub fn reassign_transition_frames(
    labels: &FrameLabels,
    embeddings: &EmbeddingSet,
    model: &ClusterModel,
    cluster_to_zone: &ClusterZoneMap,
    transition_halfwidth: usize,
) -> Result<(FrameLabels, RefineReport)> {
    if embeddings.dim() != model.dim && !embeddings.is_empty() {
        return Err(Error::Structural(format!(
            "embedding dim {} does not match model dim {}",
            embeddings.dim(),
            model.dim
        )));
    }
    let mask = transition_mask(labels, transition_halfwidth);
    let mut out = labels.clone();
    let mut report = RefineReport::default();
    for (f, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let current = labels.labels[f];
        if current.zone.is_none() {
            continue;
        }
        report.transition_frames += 1;
        let Some(v) = embeddings.for_frame(f) else {
            report.missing_embeddings += 1;
            continue;
        };
        let (cluster, _) = model.nearest(v);
        let Some(zone) = cluster_to_zone.zone(cluster) else {
            report.unmapped_cluster_frames += 1;
            continue;
        };
        report.record_change(current.zone, zone);
        out.labels[f] = FrameLabel::new(zone, Provenance::Refined);
    }
    Ok((out, report))
}

/// Per-frame eye-blink flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlinkFlags(pub Vec<bool>);

impl BlinkFlags {
    /// Reads a `frame,blink` CSV (blink is 0/1 or true/false). Frames not
    /// listed are open-eye; `n_frames` fixes the length.
    pub fn read_csv(path: &Path, n_frames: usize) -> Result<Self> {
        let mut flags = vec![false; n_frames];
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        for (row, rec) in reader.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
            let frame: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::parse(path, format!("line {line}: bad frame")))?;
            let blink = match rec.get(1).map(str::trim) {
                Some("1" | "true") => true,
                Some("0" | "false") => false,
                other => {
                    return Err(Error::parse(
                        path,
                        format!("line {line}: bad blink flag {other:?}"),
                    ))
                }
            };
            *flags.get_mut(frame).ok_or_else(|| {
                Error::parse(
                    path,
                    format!("line {line}: frame {frame} beyond {n_frames}"),
                )
            })? = blink;
        }
        Ok(Self(flags))
    }
}

/// Gives each blink frame the zone of the closest earlier open-eye labelled
/// frame. Blink frames with no such predecessor keep their label.
pub fn propagate_over_blinks(labels: &FrameLabels, blinks: &BlinkFlags) -> Result<FrameLabels> {
    if blinks.0.len() != labels.n_frames() {
        return Err(Error::Structural(format!(
            "{} blink flags for {} frames",
            blinks.0.len(),
            labels.n_frames()
        )));
    }
    let mut out = labels.clone();
    let mut last_open = None;
    for (f, &blink) in blinks.0.iter().enumerate() {
        if !blink {
            if let Some(z) = labels.zone(f) {
                last_open = Some(z);
            }
        } else if let Some(z) = last_open {
            out.labels[f] = FrameLabel::new(z, Provenance::Propagated);
        }
    }
    Ok(out)
}
