//! Sequences and results on disk: PNG frames and masks, box files, per-frame
//! records and overlay rendering.
//!
//! A sequence directory holds `frames/*.png` (lexicographic order is temporal
//! order) and ground truth as `masks/*.png` (0/255, one per frame, file stems
//! matching the frames) and/or `groundtruth.txt` (one `x,y,w,h` line per
//! frame).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{fit_axis_aligned_box, BoundingBox, BoxRole, CoordSpace, Image, Mask};
use crate::synth::SyntheticSequence;

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const BOXES_FILE: &str = "groundtruth.txt";

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// PNG files of a directory in lexicographic order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(w as usize, h as usize, 3, data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument("only RGB images are written".into()));
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| image_err(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a single-channel mask; values are scaled to [0, 1].
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Mask::new(w as usize, h as usize, data, CoordSpace::Image)
}

/// Writes probabilities quantized to 8 bits (1.0 becomes 255).
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| quantize(v)).collect();
    let buf: GrayImage = ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Formats a box as `x,y,w,h` with the shortest round-trip decimal form.
pub fn format_box(b: &BoundingBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_box(b));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a box file. Empty lines are skipped; a malformed line is an error
/// naming its line number.
pub fn read_boxes(path: &Path, role: BoxRole) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Dataset(format!("{}:{}: expected x,y,w,h, got {line:?}", path.display(), n + 1));
        let v: Vec<f64> = line.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        if v.len() != 4 {
            return Err(bad());
        }
        out.push(BoundingBox::new(v[0], v[1], v[2], v[3], role).map_err(|_| bad())?);
    }
    Ok(out)
}

/// A sequence directory loaded into memory.
#[derive(Clone, Debug)]
pub struct SequenceOnDisk {
    pub root: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub frames: Vec<Image>,
    /// Ground-truth masks by frame index, where present.
    pub masks: Vec<Option<Mask>>,
    /// Ground-truth boxes by frame index, where present.
    pub boxes: Vec<Option<BoundingBox>>,
}

impl SequenceOnDisk {
    pub fn load(root: &Path) -> Result<Self> {
        let frame_paths = list_pngs(&root.join(FRAMES_DIR))?;
        if frame_paths.is_empty() {
            return Err(Error::Dataset(format!("{} has no frames", root.join(FRAMES_DIR).display())));
        }
        let frames = frame_paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
        let mut masks = vec![None; frames.len()];
        let mask_dir = root.join(MASKS_DIR);
        if mask_dir.is_dir() {
            for (i, fp) in frame_paths.iter().enumerate() {
                let mp = mask_dir.join(fp.file_name().expect("listed files have names"));
                if mp.exists() {
                    masks[i] = Some(read_mask(&mp)?);
                }
            }
        }
        let mut boxes = vec![None; frames.len()];
        let box_path = root.join(BOXES_FILE);
        if box_path.exists() {
            for (i, b) in read_boxes(&box_path, BoxRole::Visible)?.into_iter().enumerate().take(frames.len()) {
                boxes[i] = Some(b);
            }
        }
        Ok(Self { root: root.to_path_buf(), frame_paths, frames, masks, boxes })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Box of frame `i`: the listed box, else the tight box of its mask.
    pub fn gt_box(&self, i: usize) -> Option<BoundingBox> {
        self.boxes[i].or_else(|| self.masks[i].as_ref().and_then(|m| fit_axis_aligned_box(m, 0.5).ok()))
    }
}

/// Writes a synthetic sequence in the on-disk layout, with masks and boxes.
pub fn write_sequence(root: &Path, seq: &SyntheticSequence) -> Result<()> {
    let (fd, md) = (root.join(FRAMES_DIR), root.join(MASKS_DIR));
    create_dir(&fd)?;
    create_dir(&md)?;
    let mut boxes = Vec::with_capacity(seq.len());
    for i in 0..seq.len() {
        let name = frame_name(i);
        write_image(&fd.join(&name), &seq.frames[i])?;
        write_mask(&md.join(&name), &seq.masks[i])?;
        boxes.push(seq.visible_box(i));
    }
    write_boxes(&root.join(BOXES_FILE), &boxes)?;
    write_boxes(&root.join("amodal.txt"), &seq.amodal)
}

pub fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

const MASK_COLOR: [f32; 3] = [1.0, 0.15, 0.1];
const VISIBLE_COLOR: [f32; 3] = [0.1, 1.0, 0.2];
const INHERENT_COLOR: [f32; 3] = [1.0, 0.9, 0.1];

/// Frame with the mask alpha-blended in red (alpha 0.5 × probability), the
/// visible box as a solid green outline and the inherent box as a dashed
/// yellow outline.
pub fn render_overlay(frame: &Image, mask: Option<&Mask>, visible: Option<&BoundingBox>, inherent: Option<&BoundingBox>) -> Result<Image> {
    if frame.channels() != 3 {
        return Err(Error::InvalidArgument("overlay needs an RGB frame".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut out = frame.clone();
    if let Some(m) = mask {
        if m.width() != w || m.height() != h {
            return Err(Error::ShapeMismatch(format!("mask {}x{} on frame {w}x{h}", m.width(), m.height())));
        }
        let data = out.data_mut();
        for (i, &p) in m.data().iter().enumerate() {
            let a = 0.5 * p.clamp(0.0, 1.0);
            for k in 0..3 {
                let v = &mut data[i * 3 + k];
                *v = (1.0 - a) * *v + a * MASK_COLOR[k];
            }
        }
    }
    if let Some(b) = visible {
        draw_box(&mut out, b, VISIBLE_COLOR, None);
    }
    if let Some(b) = inherent {
        draw_box(&mut out, b, INHERENT_COLOR, Some(4));
    }
    Ok(out)
}

fn draw_box(img: &mut Image, b: &BoundingBox, color: [f32; 3], dash: Option<usize>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = (b.x + b.w).ceil() as i64 - 1;
    let y1 = (b.y + b.h).ceil() as i64 - 1;
    let on = |k: i64| dash.map_or(true, |d| (k / d as i64) % 2 == 0);
    let data = img.data_mut();
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            let i = (y * w + x) as usize * 3;
            data[i..i + 3].copy_from_slice(&color);
        }
    };
    for x in x0..=x1 {
        if on(x - x0) {
            put(x, y0);
            put(x, y1);
        }
    }
    for y in y0..=y1 {
        if on(y - y0) {
            put(x0, y);
            put(x1, y);
        }
    }
}
