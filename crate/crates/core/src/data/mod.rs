//! Clip schema and dataset I/O.
//!
//! A dataset directory holds `manifest.json` (scene size, fps, action
//! vocabulary, participant split) and `clips.csv` with one row per
//! participant-frame:
//!
//! ```text
//! clip_id,frame,participant,role,u,v,action
//! ```
//!
//! UTF-8, LF line endings, header required. Frames are 1-based and
//! contiguous; every participant appears in every frame of its clip.

mod bins;
mod synth;

pub use bins::{compute_bins, displacement_length, trajectory_length, LengthBin, LengthBins, LengthMeasure};
pub use synth::{generate, GeneratorKind, SynthSpec, DANCE_ACTIONS, PURSUIT_ACTIONS};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Row {
        path: String,
        line: usize,
        message: String,
    },
    #[error("clip {clip}: {message}")]
    Clip { clip: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Dataset-level metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: f64,
    pub height: f64,
    pub fps: f64,
    pub actions: Vec<String>,
    pub n_obs: usize,
    pub n_tgt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observed,
    Target,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Observed => "observed",
            Role::Target => "target",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "observed" => Some(Role::Observed),
            "target" => Some(Role::Target),
            _ => None,
        }
    }
}

/// One participant's track within a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantTrack {
    pub id: String,
    pub role: Role,
    pub positions: Vec<(f64, f64)>,
    pub actions: Vec<usize>,
}

/// One T-frame group-activity sample. Participants keep file order; every
/// participant is present in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames: usize,
    pub participants: Vec<ParticipantTrack>,
}

impl ClipRecord {
    pub fn targets(&self) -> impl Iterator<Item = &ParticipantTrack> {
        self.participants.iter().filter(|p| p.role == Role::Target)
    }

    pub fn observed(&self) -> impl Iterator<Item = &ParticipantTrack> {
        self.participants.iter().filter(|p| p.role == Role::Observed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<ClipRecord>,
}

/// Map a position to unit-square coordinates.
pub fn normalize(p: (f64, f64), width: f64, height: f64) -> (f64, f64) {
    (p.0 / width, p.1 / height)
}

/// Inverse of [`normalize`].
pub fn denormalize(p: (f64, f64), width: f64, height: f64) -> (f64, f64) {
    (p.0 * width, p.1 * height)
}

/// Rescale arbitrary world coordinates (e.g. pedestrian meters) into a
/// `width x height` frame, preserving aspect ratio, with a small margin.
pub fn fit_to_scene(tracks: &mut [Vec<(f64, f64)>], width: f64, height: f64) {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for track in tracks.iter() {
        for &(x, y) in track {
            min.0 = min.0.min(x);
            min.1 = min.1.min(y);
            max.0 = max.0.max(x);
            max.1 = max.1.max(y);
        }
    }
    let span_x = (max.0 - min.0).max(f64::EPSILON);
    let span_y = (max.1 - min.1).max(f64::EPSILON);
    let margin = 0.05;
    let scale = ((1.0 - 2.0 * margin) * width / span_x)
        .min((1.0 - 2.0 * margin) * height / span_y);
    for track in tracks.iter_mut() {
        for p in track.iter_mut() {
            p.0 = margin * width + (p.0 - min.0) * scale;
            p.1 = margin * height + (p.1 - min.1) * scale;
        }
    }
}

const CSV_HEADER: &str = "clip_id,frame,participant,role,u,v,action";

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    let clips = load_clips(&dir.join("clips.csv"), &manifest)?;
    Ok(Dataset { manifest, clips })
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, body).map_err(|e| DataError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    write_clips(&dir.join("clips.csv"), &dataset.clips)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let raw = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| DataError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if manifest.width <= 0.0 || manifest.height <= 0.0 {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            message: "scene size must be positive".into(),
        });
    }
    if manifest.actions.is_empty() {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            message: "action vocabulary must not be empty".into(),
        });
    }
    Ok(manifest)
}

pub fn write_clips(path: &Path, clips: &[ClipRecord]) -> Result<(), DataError> {
    let mut out = String::with_capacity(1 << 16);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for clip in clips {
        for track in &clip.participants {
            debug_assert!(!clip.clip_id.contains(','), "clip id with comma");
            debug_assert!(!track.id.contains(','), "participant id with comma");
            for t in 1..=clip.frames {
                let (u, v) = track.positions[t - 1];
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    clip.clip_id,
                    t,
                    track.id,
                    track.role.as_str(),
                    u,
                    v,
                    track.actions[t - 1]
                )
                .expect("string write");
            }
        }
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

struct RawRow {
    line: usize,
    frame: usize,
    participant: String,
    role: Role,
    u: f64,
    v: f64,
    action: usize,
}

/// Parse and validate the clips file: contiguous 1-based frames, every
/// participant in every frame, no duplicate (clip, frame, participant) keys,
/// actions within the vocabulary, positions within the scene, and exactly
/// `n_tgt` targets per clip.
pub fn load_clips(path: &Path, manifest: &DatasetManifest) -> Result<Vec<ClipRecord>, DataError> {
    let raw = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let path_str = path.display().to_string();
    let row_err = |line: usize, message: String| DataError::Row {
        path: path_str.clone(),
        line,
        message,
    };

    let mut lines = raw.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(row_err(1, format!("expected header {CSV_HEADER:?}, got {header:?}")))
        }
        None => return Err(row_err(1, "empty file".into())),
    }

    // Group rows by clip id, preserving file order of clips and participants.
    let mut clip_order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<RawRow>> = Default::default();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(row_err(line_no, format!("expected 7 fields, got {}", fields.len())));
        }
        let frame: usize = fields[1]
            .parse()
            .map_err(|_| row_err(line_no, format!("bad frame index {:?}", fields[1])))?;
        if frame == 0 {
            return Err(row_err(line_no, "frame indices are 1-based".into()));
        }
        let role = Role::parse(fields[3])
            .ok_or_else(|| row_err(line_no, format!("bad role {:?}", fields[3])))?;
        let u: f64 = fields[4]
            .parse()
            .map_err(|_| row_err(line_no, format!("bad u coordinate {:?}", fields[4])))?;
        let v: f64 = fields[5]
            .parse()
            .map_err(|_| row_err(line_no, format!("bad v coordinate {:?}", fields[5])))?;
        let action: usize = fields[6]
            .parse()
            .map_err(|_| row_err(line_no, format!("bad action id {:?}", fields[6])))?;
        if action >= manifest.actions.len() {
            return Err(row_err(
                line_no,
                format!(
                    "action id {action} outside vocabulary of {}",
                    manifest.actions.len()
                ),
            ));
        }
        if !(0.0..=manifest.width).contains(&u) || !(0.0..=manifest.height).contains(&v) {
            return Err(row_err(
                line_no,
                format!(
                    "position ({u}, {v}) outside scene {}x{}",
                    manifest.width, manifest.height
                ),
            ));
        }
        let clip_id = fields[0].to_string();
        if !grouped.contains_key(&clip_id) {
            clip_order.push(clip_id.clone());
        }
        grouped.entry(clip_id).or_default().push(RawRow {
            line: line_no,
            frame,
            participant: fields[2].to_string(),
            role,
            u,
            v,
            action,
        });
    }

    let mut clips = Vec::with_capacity(clip_order.len());
    for clip_id in clip_order {
        let rows = grouped.remove(&clip_id).expect("grouped by construction");
        clips.push(assemble_clip(&path_str, &clip_id, rows, manifest)?);
    }
    Ok(clips)
}

fn assemble_clip(
    path: &str,
    clip_id: &str,
    rows: Vec<RawRow>,
    manifest: &DatasetManifest,
) -> Result<ClipRecord, DataError> {
    let clip_err = |message: String| DataError::Clip {
        clip: clip_id.to_string(),
        message,
    };
    let frames = rows.iter().map(|r| r.frame).max().expect("non-empty clip");

    let mut participant_order: Vec<String> = Vec::new();
    for row in &rows {
        if !participant_order.contains(&row.participant) {
            participant_order.push(row.participant.clone());
        }
    }

    let mut tracks = Vec::with_capacity(participant_order.len());
    for pid in &participant_order {
        let mut slots: Vec<Option<&RawRow>> = vec![None; frames];
        let mut role: Option<Role> = None;
        for row in rows.iter().filter(|r| &r.participant == pid) {
            if let Some(prev) = slots[row.frame - 1] {
                return Err(DataError::Row {
                    path: path.to_string(),
                    line: row.line,
                    message: format!(
                        "duplicate (clip {clip_id:?}, frame {}, participant {pid:?}); first at line {}",
                        row.frame, prev.line
                    ),
                });
            }
            match role {
                None => role = Some(row.role),
                Some(r) if r != row.role => {
                    return Err(DataError::Row {
                        path: path.to_string(),
                        line: row.line,
                        message: format!("participant {pid:?} changes role mid-clip"),
                    })
                }
                _ => {}
            }
            slots[row.frame - 1] = Some(row);
        }
        let mut positions = Vec::with_capacity(frames);
        let mut actions = Vec::with_capacity(frames);
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                Some(row) => {
                    positions.push((row.u, row.v));
                    actions.push(row.action);
                }
                None => {
                    return Err(clip_err(format!(
                        "participant {pid:?} missing frame {}",
                        i + 1
                    )))
                }
            }
        }
        tracks.push(ParticipantTrack {
            id: pid.clone(),
            role: role.expect("at least one row"),
            positions,
            actions,
        });
    }

    let n_tgt = tracks.iter().filter(|t| t.role == Role::Target).count();
    if n_tgt != manifest.n_tgt {
        return Err(clip_err(format!(
            "expected {} target participants, found {n_tgt}",
            manifest.n_tgt
        )));
    }
    let n_obs = tracks.len() - n_tgt;
    if n_obs != manifest.n_obs {
        return Err(clip_err(format!(
            "expected {} observed participants, found {n_obs}",
            manifest.n_obs
        )));
    }
    Ok(ClipRecord {
        clip_id: clip_id.to_string(),
        frames,
        participants: tracks,
    })
}

/// Pick the `k` participants closest to `target` by mean Euclidean distance
/// over all frames; ties break deterministically by participant id. Returns
/// indices into `clip.participants`.
pub fn select_neighbors(
    clip: &ClipRecord,
    target_index: usize,
    k: usize,
) -> Result<Vec<usize>, DataError> {
    if target_index >= clip.participants.len() {
        return Err(DataError::Invalid(format!(
            "target index {target_index} out of range for {} participants",
            clip.participants.len()
        )));
    }
    let candidates: Vec<usize> = (0..clip.participants.len())
        .filter(|&i| i != target_index)
        .collect();
    if candidates.len() < k {
        return Err(DataError::Invalid(format!(
            "need {k} neighbors, only {} other participants",
            candidates.len()
        )));
    }
    let target = &clip.participants[target_index];
    let mut scored: Vec<(f64, &str, usize)> = candidates
        .into_iter()
        .map(|i| {
            let track = &clip.participants[i];
            let mean_dist = track
                .positions
                .iter()
                .zip(&target.positions)
                .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                .sum::<f64>()
                / clip.frames as f64;
            (mean_dist, track.id.as_str(), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, _, i)| i).collect())
}

/// Validate that every action id used by the clips is within the manifest's
/// vocabulary (used after programmatic dataset construction).
pub fn validate_actions(dataset: &Dataset) -> Result<(), DataError> {
    let classes = dataset.manifest.actions.len();
    let mut seen = BTreeSet::new();
    for clip in &dataset.clips {
        for track in &clip.participants {
            for &a in &track.actions {
                if a >= classes {
                    return Err(DataError::Clip {
                        clip: clip.clip_id.clone(),
                        message: format!("action id {a} outside vocabulary of {classes}"),
                    });
                }
                seen.insert(a);
            }
        }
    }
    Ok(())
}
