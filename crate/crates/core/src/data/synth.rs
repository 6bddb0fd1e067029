//! Deterministic synthetic datasets that stand in for detector/backbone
//! outputs.
//!
//! Each ID class owns an (appearance, motion) prototype pair; background
//! frames use a separate pair and OOD segments a held-out pair that never
//! appears in training. Prototypes are mutually orthogonal with pairwise
//! distance `separation`, and every feature is its frame's prototype plus
//! isotropic Gaussian noise. Prototypes depend only on the seed, so splits
//! generated from one seed share them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{save_clip, Annotation, DatasetManifest, Label, ManifestEntry, ObjectFeatureClip, Segment, Split};
use crate::error::{Result, UaanError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub clips: usize,
    pub frames: usize,
    pub objects: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub separation: f64,
    pub split: Split,
    /// Probability that a segment is drawn from the OOD prototype. `None`
    /// means 0 for train and 0.4 for val/test.
    pub ood_fraction: Option<f64>,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clips: 64,
            frames: 32,
            objects: 3,
            feature_dim: 32,
            noise: 0.1,
            separation: 2.0,
            split: Split::Train,
            ood_fraction: None,
            max_segments: 2,
            min_segment_len: 6,
            max_segment_len: 12,
        }
    }
}

impl SynthConfig {
    pub fn effective_ood_fraction(&self) -> f64 {
        self.ood_fraction.unwrap_or(match self.split {
            Split::Train => 0.0,
            Split::Val | Split::Test => 0.4,
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UaanError::Contract(m));
        if self.num_classes < 2 {
            return bad(format!("need K >= 2 classes, got {}", self.num_classes));
        }
        if self.frames < 8 {
            return bad(format!("need T >= 8 frames, got {}", self.frames));
        }
        if self.objects < 2 {
            return bad(format!("need S >= 2 objects, got {}", self.objects));
        }
        if self.feature_dim < self.num_classes + 2 {
            return bad(format!(
                "feature_dim {} cannot hold {} orthogonal prototypes",
                self.feature_dim,
                self.num_classes + 2
            ));
        }
        if !(self.noise >= 0.0) || !(self.separation > 0.0) {
            return bad("noise must be >= 0 and separation > 0".into());
        }
        let ood = self.effective_ood_fraction();
        if !(0.0..=1.0).contains(&ood) {
            return bad(format!("ood_fraction {ood} outside [0, 1]"));
        }
        if self.split == Split::Train && ood > 0.0 {
            return bad("OOD segments requested for the train split".into());
        }
        if self.max_segments == 0 || self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("invalid segment count or length range".into());
        }
        if self.min_segment_len + 2 > self.frames {
            return bad(format!(
                "min_segment_len {} does not fit in {} frames",
                self.min_segment_len, self.frames
            ));
        }
        Ok(())
    }
}

/// Prototype vectors, `f32`-rounded. Index `0..K` are ID classes, `K` is
/// background and `K + 1` the held-out OOD pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub appearance: Vec<Vec<f32>>,
    pub motion: Vec<Vec<f32>>,
}

impl Prototypes {
    pub fn background_index(&self) -> usize {
        self.appearance.len() - 2
    }

    pub fn ood_index(&self) -> usize {
        self.appearance.len() - 1
    }

    fn generate(rng: &mut ChaCha8Rng, count: usize, dim: usize, separation: f64) -> Self {
        // orthonormal directions scaled so every pair is `separation` apart
        let scale = separation / 2f64.sqrt();
        let make = |rng: &mut ChaCha8Rng| {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
            while basis.len() < count {
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                for b in &basis {
                    let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    basis.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            basis
                .into_iter()
                .map(|b| b.into_iter().map(|x| (x * scale) as f32).collect())
                .collect::<Vec<Vec<f32>>>()
        };
        let appearance = make(rng);
        let motion = make(rng);
        Self { appearance, motion }
    }
}

/// One generated split, held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub manifest: DatasetManifest,
    pub clips: Vec<(ObjectFeatureClip, Annotation)>,
    pub prototypes: Prototypes,
}

impl SyntheticSplit {
    /// Writes `<dir>/<split>.json` and one clip file per video under
    /// `<dir>/<split>/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let split_dir = dir.join(self.manifest.split.name());
        std::fs::create_dir_all(&split_dir)?;
        for (entry, (clip, ann)) in self.manifest.clips.iter().zip(&self.clips) {
            save_clip(&dir.join(&entry.file), clip, ann, self.manifest.num_classes)?;
        }
        self.manifest
            .save(&dir.join(format!("{}.json", self.manifest.split.name())))?;
        Ok(())
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Segment layout for one clip: `(start, len)` pairs in frame units.
fn layout_segments(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let t = cfg.frames;
    let n_max = (1..=cfg.max_segments)
        .rev()
        .find(|&n| n * cfg.min_segment_len + 2 * n <= t)
        .unwrap_or(1);
    let n = rng.gen_range(1..=n_max);
    // longest length that still fits n segments with background around them
    let cap = cfg.max_segment_len.min((t - 2 * n) / n);
    let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(cfg.min_segment_len..=cap)).collect();
    // gaps: one frame minimum at the ends, two between segments
    let mut gaps: Vec<usize> = (0..=n).map(|i| if i == 0 || i == n { 1 } else { 2 }).collect();
    let used: usize = lens.iter().sum::<usize>() + gaps.iter().sum::<usize>();
    for _ in 0..t.saturating_sub(used) {
        let slot = rng.gen_range(0..=n);
        gaps[slot] += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut cursor = gaps[0];
    for (i, &len) in lens.iter().enumerate() {
        out.push((cursor, len));
        cursor += len + gaps[i + 1];
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng) -> [f32; 4] {
    let x1: f32 = rng.gen_range(0.0..0.8);
    let y1: f32 = rng.gen_range(0.0..0.8);
    let x2: f32 = rng.gen_range(x1 + 0.05..=1.0);
    let y2: f32 = rng.gen_range(y1 + 0.05..=1.0);
    [x1, y1, x2, y2]
}

/// Generates one split. Identical `(config, seed)` always yields an identical
/// dataset, and all splits of one seed share prototypes.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = Prototypes::generate(&mut proto_rng, k + 2, cfg.feature_dim, cfg.separation);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(cfg.split));
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| UaanError::Contract(e.to_string()))?;
    let ood_fraction = cfg.effective_ood_fraction();

    let (t_len, s_len, d) = (cfg.frames, cfg.objects, cfg.feature_dim);
    let mut clips = Vec::with_capacity(cfg.clips);
    let mut entries = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let video_id = format!("{}_{i:04}", cfg.split.name());
        let layout = layout_segments(&mut rng, cfg);
        let mut segments = Vec::with_capacity(layout.len());
        let mut frame_proto = vec![prototypes.background_index(); t_len];
        for &(start, len) in &layout {
            let label = if ood_fraction > 0.0 && rng.gen_bool(ood_fraction) {
                Label::Ood
            } else {
                Label::Id(rng.gen_range(0..k))
            };
            let proto = match label {
                Label::Id(c) => c,
                Label::Ood => prototypes.ood_index(),
            };
            frame_proto[start..start + len].fill(proto);
            segments.push(Segment {
                start: start as f64,
                end: (start + len) as f64,
                label,
            });
        }

        let sample = |proto: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
            proto
                .iter()
                .map(|&p| (p as f64 + noise.sample(rng)) as f32)
                .collect()
        };
        let mut appearance_local = Vec::with_capacity(t_len * s_len * d);
        let mut motion_local = Vec::with_capacity(t_len * s_len * d);
        let mut appearance_global = Vec::with_capacity(t_len * d);
        let mut motion_global = Vec::with_capacity(t_len * d);
        let mut boxes = Vec::with_capacity(t_len * s_len * 4);
        for &p in &frame_proto {
            for _ in 0..s_len {
                appearance_local.extend(sample(&prototypes.appearance[p], &mut rng));
                motion_local.extend(sample(&prototypes.motion[p], &mut rng));
                boxes.extend(random_box(&mut rng));
            }
            appearance_global.extend(sample(&prototypes.appearance[p], &mut rng));
            motion_global.extend(sample(&prototypes.motion[p], &mut rng));
        }

        let clip = ObjectFeatureClip {
            video_id: video_id.clone(),
            frames: t_len,
            objects: s_len,
            feature_dim: d,
            appearance_local,
            motion_local,
            appearance_global,
            motion_global,
            boxes,
        };
        let annotation = Annotation::from_segments(segments, t_len);
        entries.push(ManifestEntry {
            file: format!("{}/{video_id}.uaan", cfg.split.name()),
            video_id,
            frames: t_len,
            objects: s_len,
            annotation: annotation.clone(),
        });
        clips.push((clip, annotation));
    }

    let manifest = DatasetManifest {
        num_classes: k,
        class_names: (0..k).map(|c| format!("class_{c}")).collect(),
        split: cfg.split,
        clips: entries,
    };
    manifest.validate()?;
    Ok(SyntheticSplit {
        manifest,
        clips,
        prototypes,
    })
}
