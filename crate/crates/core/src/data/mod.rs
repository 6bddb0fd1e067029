//! Object-level feature clips, their annotations, dataset manifests, the
//! binary clip format and the synthetic stand-in for detector backbones.

mod format;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::FormatError;

pub use format::{decode_clip, encode_clip, load_clip, save_clip, FORMAT_VERSION, MAGIC};
pub use synth::{generate_synthetic, Prototypes, SynthConfig, SyntheticSplit};

/// Per-video appearance and motion object features.
///
/// Tensors are stored as `f32`, the on-disk precision. Layouts are row-major:
/// locals are `T×S×d_in`, globals `T×d_in`, boxes `T×S×4` as normalised
/// `(x1, y1, x2, y2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatureClip {
    pub video_id: String,
    pub frames: usize,
    pub objects: usize,
    pub feature_dim: usize,
    pub appearance_local: Vec<f32>,
    pub motion_local: Vec<f32>,
    pub appearance_global: Vec<f32>,
    pub motion_global: Vec<f32>,
    pub boxes: Vec<f32>,
}

impl ObjectFeatureClip {
    pub fn num_objects_total(&self) -> usize {
        self.frames * self.objects
    }

    pub fn object_row(&self, t: usize, k: usize) -> usize {
        t * self.objects + k
    }

    pub fn bbox(&self, t: usize, k: usize) -> [f32; 4] {
        let i = 4 * self.object_row(t, k);
        [self.boxes[i], self.boxes[i + 1], self.boxes[i + 2], self.boxes[i + 3]]
    }

    /// Checks tensor sizes and box geometry. Errors name the first offending
    /// object as `(t, k)`.
    pub fn validate(&self) -> Result<(), String> {
        let (t, s, d) = (self.frames, self.objects, self.feature_dim);
        let expect = [
            ("appearance_local", self.appearance_local.len(), t * s * d),
            ("motion_local", self.motion_local.len(), t * s * d),
            ("appearance_global", self.appearance_global.len(), t * d),
            ("motion_global", self.motion_global.len(), t * d),
            ("boxes", self.boxes.len(), t * s * 4),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(format!("{name} has {got} values, expected {want}"));
            }
        }
        for ti in 0..t {
            for k in 0..s {
                let [x1, y1, x2, y2] = self.bbox(ti, k);
                let ok = (0.0..=1.0).contains(&x1)
                    && (0.0..=1.0).contains(&y1)
                    && (0.0..=1.0).contains(&x2)
                    && (0.0..=1.0).contains(&y2)
                    && x1 <= x2
                    && y1 <= y2;
                if !ok {
                    return Err(format!(
                        "invalid box at (t={ti}, k={k}): [{x1}, {y1}, {x2}, {y2}]"
                    ));
                }
            }
        }
        let finite = [
            &self.appearance_local,
            &self.motion_local,
            &self.appearance_global,
            &self.motion_global,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Segment label: an in-distribution class index, or the OOD marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Id(usize),
    Ood,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Id(c) => Some(c),
            Label::Ood => None,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Label::Ood)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: Label,
}

impl Segment {
    pub fn span(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub segments: Vec<Segment>,
    pub frame_action_mask: Vec<bool>,
}

impl Annotation {
    /// Frame `t` is an action frame when its centre `t + 0.5` lies inside a
    /// segment.
    pub fn mask_from_segments(segments: &[Segment], frames: usize) -> Vec<bool> {
        (0..frames)
            .map(|t| {
                let c = t as f64 + 0.5;
                segments.iter().any(|s| s.start <= c && c < s.end)
            })
            .collect()
    }

    pub fn from_segments(segments: Vec<Segment>, frames: usize) -> Self {
        let frame_action_mask = Self::mask_from_segments(&segments, frames);
        Self {
            segments,
            frame_action_mask,
        }
    }

    pub fn has_ood(&self) -> bool {
        self.segments.iter().any(|s| s.label.is_ood())
    }

    pub fn validate(&self, frames: usize, num_classes: usize) -> Result<(), String> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(0.0 <= s.start && s.start < s.end && s.end <= frames as f64) {
                return Err(format!(
                    "segment {i} [{}, {}) outside 0..{frames} or degenerate",
                    s.start, s.end
                ));
            }
            if let Label::Id(c) = s.label {
                if c >= num_classes {
                    return Err(format!("segment {i} class {c} >= K={num_classes}"));
                }
            }
        }
        if self.frame_action_mask.len() != frames {
            return Err(format!(
                "frame_action_mask has {} entries, expected {frames}",
                self.frame_action_mask.len()
            ));
        }
        if self.frame_action_mask != Self::mask_from_segments(&self.segments, frames) {
            return Err("frame_action_mask is not the union of segment spans".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Clip file path, relative to the manifest's directory.
    pub file: String,
    pub video_id: String,
    pub frames: usize,
    pub objects: usize,
    pub annotation: Annotation,
}

/// JSON dataset index:
///
/// ```json
/// {"num_classes": 3, "class_names": ["class_0", ...], "split": "train",
///  "clips": [{"file": "train/clip_0000.uaan", "video_id": "clip_0000",
///             "frames": 32, "objects": 3, "annotation": {...}}]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
    pub clips: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.class_names.len() != self.num_classes {
            return Err(FormatError::Manifest(format!(
                "{} class names for K={}",
                self.class_names.len(),
                self.num_classes
            )));
        }
        for e in &self.clips {
            e.annotation
                .validate(e.frames, self.num_classes)
                .map_err(|m| FormatError::Manifest(format!("{}: {m}", e.video_id)))?;
            if self.split == Split::Train && e.annotation.has_ood() {
                return Err(FormatError::Manifest(format!(
                    "{}: training manifest contains an OOD segment",
                    e.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn total_objects(&self) -> usize {
        self.clips.iter().map(|e| e.frames * e.objects).sum()
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|source| FormatError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| FormatError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|source| FormatError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads every clip listed in the manifest stored at `manifest_path`.
    pub fn load_clips(
        &self,
        manifest_path: &Path,
    ) -> Result<Vec<(ObjectFeatureClip, Annotation)>, FormatError> {
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.clips
            .iter()
            .map(|e| {
                let path: PathBuf = base.join(&e.file);
                let (clip, ann) = load_clip(&path)?;
                if clip.frames != e.frames || clip.objects != e.objects {
                    return Err(FormatError::Manifest(format!(
                        "{}: file has T={}, S={}, manifest says T={}, S={}",
                        e.file, clip.frames, clip.objects, e.frames, e.objects
                    )));
                }
                Ok((clip, ann))
            })
            .collect()
    }
}
