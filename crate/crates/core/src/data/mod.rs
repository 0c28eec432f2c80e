//! Dataset loading, n-frame window slicing, sequence padding, and tensor
//! conversion. Layout on disk: `<root>/<split>/<clip>/frames/%06d.png` with
//! a sibling `annotations.csv` (`frame_index,x1,y1,x2,y2`).

pub mod augment;
pub mod synth;

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array4;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Real;

pub use augment::{augment_window, AppliedTransform, AugmentationConfig};
pub use synth::{synth_generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::argument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox<f64>>,
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    pub name: String,
    pub frames: Vec<RgbImage>,
    /// One entry per frame, aligned with `frames`.
    pub annotations: Vec<FrameAnnotation>,
    pub fps: f64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (u32, u32) {
        self.frames
            .first()
            .map(|f| (f.width(), f.height()))
            .unwrap_or((0, 0))
    }
}

#[derive(Debug, Clone)]
pub struct FrameWindow {
    /// Exactly n frames, n odd; out-of-range slots are all-black.
    pub images: Vec<RgbImage>,
    /// Ground truth of the middle frame.
    pub middle_gt: Vec<BoundingBox<f64>>,
    /// (clip name, center frame index)
    pub source: (String, usize),
}

impl FrameWindow {
    pub fn n(&self) -> usize {
        self.images.len()
    }

    pub fn middle(&self) -> &RgbImage {
        &self.images[self.images.len() / 2]
    }
}

fn require_odd(n: usize) -> Result<()> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::argument(format!(
            "window length must be odd and >= 1, got {n}"
        )));
    }
    Ok(())
}

/// Parse one clip's `annotations.csv` into per-frame box lists.
fn parse_annotations(
    path: &Path,
    num_frames: usize,
    width: u32,
    height: u32,
) -> Result<Vec<FrameAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut per_frame: Vec<Vec<BoundingBox<f64>>> = vec![Vec::new(); num_frames];
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line != "frame_index,x1,y1,x2,y2" {
                return Err(parse_err(1, format!("bad header '{line}'")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(lineno + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        let frame_index: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("bad frame index '{}'", fields[0])))?;
        if frame_index >= num_frames {
            return Err(parse_err(
                lineno + 1,
                format!("frame index {frame_index} out of range (clip has {num_frames} frames)"),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad coordinate '{f}'")))?;
        }
        // clamp to the frame, then reject degenerate results
        let clamped = BoundingBox::raw(vals[0], vals[1], vals[2], vals[3])
            .clamped(width as f64, height as f64);
        if !clamped.is_valid() {
            return Err(parse_err(
                lineno + 1,
                format!(
                    "degenerate box after clamping at frame {frame_index}: \
                     ({},{},{},{})",
                    vals[0], vals[1], vals[2], vals[3]
                ),
            ));
        }
        per_frame[frame_index].push(clamped);
    }
    Ok(per_frame
        .into_iter()
        .enumerate()
        .map(|(frame_index, boxes)| FrameAnnotation { frame_index, boxes })
        .collect())
}

fn load_clip(dir: &Path, name: &str) -> Result<VideoClip> {
    let frames_dir = dir.join("frames");
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|source| Error::Io {
            path: frames_dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::Dataset {
            clip: name.to_string(),
            message: "no frames found".to_string(),
        });
    }
    let mut frames = Vec::with_capacity(frame_paths.len());
    for p in &frame_paths {
        let img = image::open(p)
            .map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })?
            .to_rgb8();
        frames.push(img);
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| (f.width(), f.height()) != (w, h)) {
        return Err(Error::Dataset {
            clip: name.to_string(),
            message: "frames have mixed dimensions".to_string(),
        });
    }
    let ann_path = dir.join("annotations.csv");
    if !ann_path.exists() {
        return Err(Error::Dataset {
            clip: name.to_string(),
            message: "missing annotations.csv".to_string(),
        });
    }
    let annotations = parse_annotations(&ann_path, frames.len(), w, h)?;
    Ok(VideoClip {
        name: name.to_string(),
        frames,
        annotations,
        fps: 25.0,
    })
}

/// Load every clip under `<root>/<split>/`, sorted by clip name.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<VideoClip>> {
    let split_dir = root.join(split.dir_name());
    let mut clip_dirs: Vec<PathBuf> = std::fs::read_dir(&split_dir)
        .map_err(|source| Error::Io {
            path: split_dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut clips = Vec::with_capacity(clip_dirs.len());
    for dir in &clip_dirs {
        let name = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        clips.push(load_clip(dir, &name)?);
    }
    Ok(clips)
}

fn black_like(w: u32, h: u32) -> RgbImage {
    RgbImage::new(w, h)
}

/// Window of n frames centered on `center`; out-of-range slots are black.
pub fn sample_window(clip: &VideoClip, center: usize, n: usize) -> Result<FrameWindow> {
    require_odd(n)?;
    if center >= clip.len() {
        return Err(Error::argument(format!(
            "center {center} out of range for clip of {} frames",
            clip.len()
        )));
    }
    let (w, h) = clip.frame_size();
    let half = (n - 1) / 2;
    let mut images = Vec::with_capacity(n);
    for offset in 0..n {
        let idx = center as isize - half as isize + offset as isize;
        if idx < 0 || idx as usize >= clip.len() {
            images.push(black_like(w, h));
        } else {
            images.push(clip.frames[idx as usize].clone());
        }
    }
    Ok(FrameWindow {
        images,
        middle_gt: clip.annotations[center].boxes.clone(),
        source: (clip.name.clone(), center),
    })
}

/// One window per original frame; edges are black-padded.
pub fn pad_sequence(clip: &VideoClip, n: usize) -> Result<Vec<FrameWindow>> {
    require_odd(n)?;
    if clip.is_empty() {
        return Err(Error::argument("pad_sequence: empty clip"));
    }
    (0..clip.len()).map(|c| sample_window(clip, c, n)).collect()
}

/// Convert a window to a network input (1, 3n, H, W) in [0, 1], resizing to
/// `(in_w, in_h)` and rescaling the ground truth accordingly.
pub fn window_to_tensor<F: Real>(
    window: &FrameWindow,
    in_w: u32,
    in_h: u32,
) -> Result<(Array4<F>, Vec<BoundingBox<F>>)> {
    if window.images.is_empty() {
        return Err(Error::argument("window_to_tensor: empty window"));
    }
    let n = window.images.len();
    let (src_w, src_h) = (window.images[0].width(), window.images[0].height());
    let mut x = Array4::<F>::zeros((1, 3 * n, in_h as usize, in_w as usize));
    let inv255 = F::real(1.0 / 255.0);
    for (f, img) in window.images.iter().enumerate() {
        let resized = if (img.width(), img.height()) == (in_w, in_h) {
            img.clone()
        } else {
            image::imageops::resize(img, in_w, in_h, image::imageops::FilterType::Triangle)
        };
        for (px, py, p) in resized.enumerate_pixels() {
            for c in 0..3 {
                x[[0, 3 * f + c, py as usize, px as usize]] =
                    F::real(p.0[c] as f64) * inv255;
            }
        }
    }
    let sx = in_w as f64 / src_w as f64;
    let sy = in_h as f64 / src_h as f64;
    let gts = window
        .middle_gt
        .iter()
        .map(|b| {
            BoundingBox::raw(
                F::real(b.x1 * sx),
                F::real(b.y1 * sy),
                F::real(b.x2 * sx),
                F::real(b.y2 * sy),
            )
        })
        .collect();
    Ok((x, gts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn toy_clip(len: usize, w: u32, h: u32) -> VideoClip {
        let frames: Vec<RgbImage> = (0..len)
            .map(|i| RgbImage::from_pixel(w, h, Rgb([i as u8 + 1, 0, 0])))
            .collect();
        let annotations = (0..len)
            .map(|frame_index| FrameAnnotation {
                frame_index,
                boxes: if frame_index == 4 {
                    vec![BoundingBox::new(2.0, 2.0, 8.0, 6.0).unwrap()]
                } else {
                    Vec::new()
                },
            })
            .collect();
        VideoClip {
            name: "toy".to_string(),
            frames,
            annotations,
            fps: 25.0,
        }
    }

    #[test]
    fn window_indices_are_contiguous() {
        let clip = toy_clip(9, 16, 8);
        let w = sample_window(&clip, 4, 5).unwrap();
        // frame i has red channel i+1
        let reds: Vec<u8> = w.images.iter().map(|im| im.get_pixel(0, 0).0[0]).collect();
        assert_eq!(reds, vec![3, 4, 5, 6, 7]);
        assert_eq!(w.middle_gt.len(), 1);
    }

    #[test]
    fn leading_edge_pads_with_black() {
        let clip = toy_clip(9, 16, 8);
        let w = sample_window(&clip, 0, 5).unwrap();
        let reds: Vec<u8> = w.images.iter().map(|im| im.get_pixel(0, 0).0[0]).collect();
        assert_eq!(reds, vec![0, 0, 1, 2, 3]);
    }

    #[test]
    fn n_equals_one_is_identity() {
        let clip = toy_clip(3, 16, 8);
        let w = sample_window(&clip, 1, 1).unwrap();
        assert_eq!(w.images.len(), 1);
        assert_eq!(w.images[0], clip.frames[1]);
    }

    #[test]
    fn even_n_is_rejected() {
        let clip = toy_clip(3, 16, 8);
        assert!(sample_window(&clip, 1, 4).is_err());
        assert!(pad_sequence(&clip, 2).is_err());
    }

    #[test]
    fn pad_sequence_length_matches_clip() {
        for len in [1usize, 2, 5, 10, 19] {
            for n in [1usize, 3, 5, 7] {
                let clip = toy_clip(len, 16, 8);
                let windows = pad_sequence(&clip, n).unwrap();
                assert_eq!(windows.len(), len);
                for (c, w) in windows.iter().enumerate() {
                    assert_eq!(w.n(), n);
                    assert_eq!(w.source.1, c);
                    // middle frame always comes from the clip itself
                    assert_eq!(w.middle(), &clip.frames[c]);
                }
            }
        }
    }

    #[test]
    fn one_frame_clip_has_black_context() {
        let clip = toy_clip(1, 16, 8);
        let windows = pad_sequence(&clip, 5).unwrap();
        let reds: Vec<u8> = windows[0]
            .images
            .iter()
            .map(|im| im.get_pixel(0, 0).0[0])
            .collect();
        assert_eq!(reds, vec![0, 0, 1, 0, 0]);
    }

    #[test]
    fn tensor_layout_and_gt_scaling() {
        let clip = toy_clip(3, 16, 8);
        let mut clip = clip;
        clip.annotations[1].boxes = vec![BoundingBox::new(4.0, 2.0, 8.0, 6.0).unwrap()];
        let w = sample_window(&clip, 1, 3).unwrap();
        let (x, gts) = window_to_tensor::<f64>(&w, 32, 16).unwrap();
        assert_eq!(x.dim(), (1, 9, 16, 32));
        // frame order along channels: frame 0 red == 1/255 ... frame 2 == 3/255
        assert!((x[[0, 0, 0, 0]] - 1.0 / 255.0).abs() < 1e-9);
        assert!((x[[0, 3, 0, 0]] - 2.0 / 255.0).abs() < 1e-9);
        assert!((x[[0, 6, 0, 0]] - 3.0 / 255.0).abs() < 1e-9);
        // 16x8 -> 32x16 doubles coordinates
        assert_eq!(gts[0].raw_tuple(), (8.0, 4.0, 16.0, 12.0));
    }

    #[test]
    fn dataset_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for clip in ["b_clip", "a_clip"] {
            let frames = root.join("train").join(clip).join("frames");
            std::fs::create_dir_all(&frames).unwrap();
            for i in 0..3 {
                RgbImage::from_pixel(16, 8, Rgb([i as u8, 10, 20]))
                    .save(frames.join(format!("{i:06}.png")))
                    .unwrap();
            }
            std::fs::write(
                root.join("train").join(clip).join("annotations.csv"),
                "frame_index,x1,y1,x2,y2\n1,2.0,1.0,9.5,7.0\n",
            )
            .unwrap();
        }
        let clips = load_dataset(root, Split::Train).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].name, "a_clip"); // sorted
        assert_eq!(clips[0].len(), 3);
        assert_eq!(clips[0].annotations[1].boxes.len(), 1);
        assert!(clips[0].annotations[0].boxes.is_empty());
    }

    #[test]
    fn degenerate_box_after_clamp_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let frames = root.join("train").join("c").join("frames");
        std::fs::create_dir_all(&frames).unwrap();
        RgbImage::new(16, 8)
            .save(frames.join("000000.png"))
            .unwrap();
        // box entirely right of the frame: clamps to zero width
        std::fs::write(
            root.join("train").join("c").join("annotations.csv"),
            "frame_index,x1,y1,x2,y2\n0,20.0,1.0,30.0,7.0\n",
        )
        .unwrap();
        let err = load_dataset(root, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_annotations_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let frames = root.join("test").join("orphan").join("frames");
        std::fs::create_dir_all(&frames).unwrap();
        RgbImage::new(16, 8)
            .save(frames.join("000000.png"))
            .unwrap();
        let err = load_dataset(root, Split::Test).unwrap_err();
        match err {
            Error::Dataset { clip, .. } => assert_eq!(clip, "orphan"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn boxes_inside_frame_are_kept_after_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let frames = root.join("train").join("c").join("frames");
        std::fs::create_dir_all(&frames).unwrap();
        RgbImage::new(16, 8)
            .save(frames.join("000000.png"))
            .unwrap();
        // x2 beyond the frame clamps to 16 but stays valid
        std::fs::write(
            root.join("train").join("c").join("annotations.csv"),
            "frame_index,x1,y1,x2,y2\n0,2.0,1.0,30.0,7.0\n",
        )
        .unwrap();
        let clips = load_dataset(root, Split::Train).unwrap();
        assert_eq!(clips[0].annotations[0].boxes[0].raw_tuple(), (2.0, 1.0, 16.0, 7.0));
    }
}
