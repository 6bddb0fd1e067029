//! Binary clip format.
//!
//! ```text
//! offset  size          field
//! 0       4             magic "UAAN"
//! 4       2             version (u16 LE)
//! 6       4 × 4         T, S, d_in, K (u32 LE)
//! 22      4·T·S·d_in    appearance_local (f32 LE, row-major)
//! ...     4·T·S·d_in    motion_local
//! ...     4·T·d_in      appearance_global
//! ...     4·T·d_in      motion_global
//! ...     4·T·S·4       boxes
//! ...     4             annotation length n (u32 LE)
//! ...     n             annotation, UTF-8 JSON:
//!                       {"video_id", "segments", "frame_action_mask"}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, ObjectFeatureClip};
use crate::error::FormatError;

pub const MAGIC: [u8; 4] = *b"UAAN";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 22;

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    video_id: String,
    #[serde(flatten)]
    annotation: Annotation,
}

/// Serialises a clip and its annotation. `num_classes` is recorded in the
/// header so the file can be validated on its own.
pub fn encode_clip(clip: &ObjectFeatureClip, ann: &Annotation, num_classes: usize) -> Vec<u8> {
    let floats = clip.appearance_local.len()
        + clip.motion_local.len()
        + clip.appearance_global.len()
        + clip.motion_global.len()
        + clip.boxes.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * floats + 256);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [clip.frames, clip.objects, clip.feature_dim, num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for block in [
        &clip.appearance_local,
        &clip.motion_local,
        &clip.appearance_global,
        &clip.motion_global,
        &clip.boxes,
    ] {
        for v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = ClipMeta {
        video_id: clip.video_id.clone(),
        annotation: ann.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("annotation serialises");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32_block(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = count
            .checked_mul(4)
            .ok_or(FormatError::Truncated {
                what,
                offset: self.pos,
                needed: usize::MAX,
                available: self.bytes.len() - self.pos,
            })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses and validates a clip. Returns the clip, its annotation and the
/// class count from the header.
pub fn decode_clip(bytes: &[u8]) -> Result<(ObjectFeatureClip, Annotation, usize), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| {
        let mut found = [0u8; 4];
        found[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        FormatError::BadMagic { found }
    })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let v = r.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let frames = r.u32("frame count")?;
    let objects = r.u32("object count")?;
    let feature_dim = r.u32("feature width")?;
    let num_classes = r.u32("class count")?;

    let local = frames * objects * feature_dim;
    let appearance_local = r.f32_block(local, "appearance_local")?;
    let motion_local = r.f32_block(local, "motion_local")?;
    let appearance_global = r.f32_block(frames * feature_dim, "appearance_global")?;
    let motion_global = r.f32_block(frames * feature_dim, "motion_global")?;
    let boxes_offset = r.pos;
    let boxes = r.f32_block(frames * objects * 4, "boxes")?;

    let json_len = r.u32("annotation length")?;
    let json_offset = r.pos;
    let json = r.take(json_len, "annotation")?;
    if r.pos != bytes.len() {
        return Err(FormatError::Invariant {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let meta: ClipMeta = serde_json::from_slice(json).map_err(|e| FormatError::Annotation {
        offset: json_offset,
        message: e.to_string(),
    })?;

    let clip = ObjectFeatureClip {
        video_id: meta.video_id,
        frames,
        objects,
        feature_dim,
        appearance_local,
        motion_local,
        appearance_global,
        motion_global,
        boxes,
    };
    if let Err(message) = clip.validate() {
        // locate the offending box for the offset when there is one
        let offset = (0..frames * objects)
            .find(|&row| {
                let b = &clip.boxes[4 * row..4 * row + 4];
                !(b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3])
            })
            .map_or(HEADER_LEN, |row| boxes_offset + 16 * row);
        return Err(FormatError::Invariant { offset, message });
    }
    meta.annotation
        .validate(frames, num_classes)
        .map_err(|message| FormatError::Invariant {
            offset: json_offset,
            message,
        })?;
    Ok((clip, meta.annotation, num_classes))
}

pub fn save_clip(
    path: &Path,
    clip: &ObjectFeatureClip,
    ann: &Annotation,
    num_classes: usize,
) -> Result<(), FormatError> {
    std::fs::write(path, encode_clip(clip, ann, num_classes)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_clip(path: &Path) -> Result<(ObjectFeatureClip, Annotation), FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_clip(&bytes).map(|(c, a, _)| (c, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Segment};

    fn tiny() -> (ObjectFeatureClip, Annotation) {
        let (t, s, d) = (3, 2, 2);
        let clip = ObjectFeatureClip {
            video_id: "v0".into(),
            frames: t,
            objects: s,
            feature_dim: d,
            appearance_local: (0..t * s * d).map(|i| i as f32 * 0.5).collect(),
            motion_local: (0..t * s * d).map(|i| -(i as f32)).collect(),
            appearance_global: vec![0.25; t * d],
            motion_global: vec![1.5; t * d],
            boxes: [0.1f32, 0.2, 0.3, 0.4].repeat(t * s),
        };
        let ann = Annotation::from_segments(
            vec![Segment { start: 1.0, end: 3.0, label: Label::Id(1) }],
            t,
        );
        (clip, ann)
    }

    #[test]
    fn round_trip() {
        let (clip, ann) = tiny();
        let bytes = encode_clip(&clip, &ann, 2);
        let (c2, a2, k) = decode_clip(&bytes).unwrap();
        assert_eq!((c2, a2, k), (clip, ann, 2));
    }

    #[test]
    fn bad_magic() {
        let (clip, ann) = tiny();
        let mut bytes = encode_clip(&clip, &ann, 2);
        bytes[0] = b'X';
        assert!(matches!(decode_clip(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode_clip(b"UA"), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn truncated_reports_offset() {
        let (clip, ann) = tiny();
        let bytes = encode_clip(&clip, &ann, 2);
        let err = decode_clip(&bytes[..30]).unwrap_err();
        match err {
            FormatError::Truncated { what, offset, .. } => {
                assert_eq!(what, "appearance_local");
                assert_eq!(offset, 22);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverted_box_names_object() {
        let (mut clip, ann) = tiny();
        // object (t=2, k=1): x1 > x2
        let row = clip.object_row(2, 1);
        clip.boxes[4 * row] = 0.9;
        let bytes = encode_clip(&clip, &ann, 2);
        match decode_clip(&bytes).unwrap_err() {
            FormatError::Invariant { offset, message } => {
                assert!(message.contains("t=2, k=1"), "{message}");
                let boxes_offset = 22 + 4 * (2 * 12 + 2 * 6);
                assert_eq!(offset, boxes_offset + 16 * row);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_out_of_range_rejected() {
        let (clip, ann) = tiny();
        let bytes = encode_clip(&clip, &ann, 1);
        assert!(matches!(decode_clip(&bytes), Err(FormatError::Invariant { .. })));
    }
}
