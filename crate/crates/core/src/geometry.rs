//! Masks, boxes, region crops and coordinate mappings.
//!
//! Continuous pixel coordinates follow the usual raster convention: pixel
//! `(col, row)` covers `[col, col + 1) x [row, row + 1)` and its centre sits at
//! `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxRole {
    /// Extent of the currently visible target pixels.
    Visible,
    /// Full target extent including occluded parts.
    Inherent,
}

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub role: BoxRole,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, role: BoxRole) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("box needs finite coordinates and positive size, got {x},{y},{w},{h}")));
        }
        Ok(Self { x, y, w, h, role })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, role: BoxRole) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h, role)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn with_role(self, role: BoxRole) -> Self {
        Self { role, ..self }
    }

    /// Same size, moved so its centre is `(cx, cy)`.
    pub fn recentered(self, cx: f64, cy: f64) -> Self {
        Self { x: cx - self.w / 2.0, y: cy - self.h / 2.0, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    Patch,
    Image,
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub space: CoordSpace,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<f32>, space: CoordSpace) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch("mask must have a nonzero size".into()));
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data, space })
    }

    pub fn zeros(width: usize, height: usize, space: CoordSpace) -> Self {
        Self { width, height, data: vec![0.0; width * height], space }
    }

    /// Binary mask that is 1 inside `b` (pixels whose centre lies in the box).
    pub fn from_box(width: usize, height: usize, b: &BoundingBox, space: CoordSpace) -> Self {
        let mut m = Self::zeros(width, height, space);
        for r in 0..height {
            let py = r as f64 + 0.5;
            if py < b.y || py >= b.y + b.h {
                continue;
            }
            for c in 0..width {
                let px = c as f64 + 0.5;
                if px >= b.x && px < b.x + b.w {
                    m.data[r * width + c] = 1.0;
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    pub fn binarize(&self, threshold: f32) -> Vec<bool> {
        self.data.iter().map(|&v| v >= threshold).collect()
    }

    pub fn count_at_least(&self, threshold: f32) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }
}

/// RGB (or any channel count) image with `f32` samples, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::ShapeMismatch("image must have a nonzero size".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "image data has {} values, expected {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f32] {
        let s = (row * self.width + col) * self.channels;
        &self.data[s..s + self.channels]
    }

    /// Planar `[C, H, W]` copy, the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; hw * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + p] = v;
            }
        }
        out
    }
}

/// Affine map from patch coordinates `(u, v)` to frame coordinates `(x, y)`:
/// `x = offset_x + scale_x * u`, `y = offset_y + scale_y * v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMapping {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl CoordinateMapping {
    pub fn identity() -> Self {
        Self { scale_x: 1.0, scale_y: 1.0, offset_x: 0.0, offset_y: 0.0 }
    }

    /// Mapping of a square region of side `side` centred at `(cx, cy)` onto a
    /// patch of `resolution` pixels.
    pub fn for_region(cx: f64, cy: f64, side: f64, resolution: usize) -> Result<Self> {
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::DegenerateRegion(side));
        }
        let s = side / resolution as f64;
        Ok(Self { scale_x: s, scale_y: s, offset_x: cx - side / 2.0, offset_y: cy - side / 2.0 })
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.offset_x + self.scale_x * u, self.offset_y + self.scale_y * v)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) / self.scale_x, (y - self.offset_y) / self.scale_y)
    }

    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BoundingBox { x, y, w: b.w * self.scale_x, h: b.h * self.scale_y, role: b.role }
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BoundingBox { x, y, w: b.w / self.scale_x, h: b.h / self.scale_y, role: b.role }
    }
}

/// Minimal box covering every pixel with probability `>= threshold`.
pub fn fit_axis_aligned_box(mask: &Mask, threshold: f32) -> Result<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(c, r) >= threshold {
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c);
                y1 = y1.max(r);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::NoForeground);
    }
    Ok(BoundingBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
        role: BoxRole::Visible,
    })
}

/// Distance-from-peak map normalized by the grid diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationChannel {
    pub rows: usize,
    pub cols: usize,
    pub peak: (usize, usize),
    pub values: Vec<f32>,
}

/// `values[r, c] = |(r, c) - peak| / sqrt(rows^2 + cols^2)`.
pub fn euclidean_location_channel(peak: (usize, usize), rows: usize, cols: usize) -> Result<LocationChannel> {
    let (pr, pc) = peak;
    if pr >= rows || pc >= cols {
        return Err(Error::PeakOutOfBounds(pr, pc, rows, cols));
    }
    let diag = ((rows * rows + cols * cols) as f64).sqrt();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dr = r as f64 - pr as f64;
            let dc = c as f64 - pc as f64;
            values.push(((dr * dr + dc * dc).sqrt() / diag) as f32);
        }
    }
    Ok(LocationChannel { rows, cols, peak, values })
}

fn sample_bilinear_clamped(data: &[f32], w: usize, h: usize, ch: usize, x: f64, y: f64, out: &mut [f32]) {
    // (x, y) in pixel-index coordinates: integer values hit pixel centres.
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    for c in 0..ch {
        let p = |xx: usize, yy: usize| data[(yy * w + xx) * ch + c];
        let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
        let bot = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
        out[c] = top + (bot - top) * fy;
    }
}

fn resample(data: &[f32], w: usize, h: usize, ch: usize, mapping: &CoordinateMapping, res: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; res * res * ch];
    for v in 0..res {
        for u in 0..res {
            let (x, y) = mapping.to_frame(u as f64 + 0.5, v as f64 + 0.5);
            let s = (v * res + u) * ch;
            sample_bilinear_clamped(data, w, h, ch, x - 0.5, y - 0.5, &mut out[s..s + ch]);
        }
    }
    out
}

/// Crops a square region of side `region_side` centred at `center`, resampled
/// bilinearly to `out_resolution` pixels. Area outside the frame replicates
/// the nearest edge pixel.
pub fn extract_region(
    frame: &Image,
    center: (f64, f64),
    region_side: f64,
    out_resolution: usize,
) -> Result<(Image, CoordinateMapping)> {
    if out_resolution == 0 {
        return Err(Error::InvalidArgument("output resolution must be positive".into()));
    }
    let mapping = CoordinateMapping::for_region(center.0, center.1, region_side, out_resolution)?;
    let data = resample(&frame.data, frame.width, frame.height, frame.channels, &mapping, out_resolution);
    Ok((Image::new(out_resolution, out_resolution, frame.channels, data)?, mapping))
}

/// Same crop as [`extract_region`] applied to a mask.
pub fn extract_mask_region(mask: &Mask, mapping: &CoordinateMapping, out_resolution: usize) -> Mask {
    let data = resample(&mask.data, mask.width, mask.height, 1, mapping, out_resolution);
    Mask { width: out_resolution, height: out_resolution, data, space: CoordSpace::Patch }
}

/// Resamples a patch-space mask into a `width x height` frame. Frame pixels
/// whose centre falls outside the patch get probability 0.
pub fn map_mask_to_frame(mask: &Mask, mapping: &CoordinateMapping, width: usize, height: usize) -> Mask {
    let mut out = Mask::zeros(width, height, CoordSpace::Image);
    let (pw, ph) = (mask.width as f64, mask.height as f64);
    let mut v = [0.0f32];
    for r in 0..height {
        for c in 0..width {
            let (u, vv) = mapping.to_patch(c as f64 + 0.5, r as f64 + 0.5);
            if u < 0.0 || vv < 0.0 || u >= pw || vv >= ph {
                continue;
            }
            sample_bilinear_clamped(&mask.data, mask.width, mask.height, 1, u - 0.5, vv - 0.5, &mut v);
            out.data[r * width + c] = v[0].clamp(0.0, 1.0);
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `seeds` (two 1-d lower-envelope passes). `f64::INFINITY` where
/// there is no seed at all.
pub fn squared_distance_transform(seeds: &[bool], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(seeds.len(), width * height);
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { inf }).collect();
    let mut f = vec![0.0; width.max(height)];
    let mut d = vec![0.0; width.max(height)];
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        envelope_1d(&f[..height], &mut d[..height]);
        for r in 0..height {
            grid[r * width + c] = d[r];
        }
    }
    for r in 0..height {
        f[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        envelope_1d(&f[..width], &mut d[..width]);
        grid[r * width..(r + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut start = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            start = Some(q);
            break;
        }
    }
    let Some(first) = start else {
        d.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never underflows.
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask_from_points(w: usize, h: usize, pts: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(w, h, CoordSpace::Image);
        for &(c, r) in pts {
            m.set(c, r, 1.0);
        }
        m
    }

    #[test]
    fn fit_box_cases() {
        assert!(matches!(fit_axis_aligned_box(&Mask::zeros(16, 16, CoordSpace::Image), 0.5), Err(Error::NoForeground)));
        let b = fit_axis_aligned_box(&mask_from_points(16, 16, &[(5, 7)]), 0.5).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (5.0, 7.0, 1.0, 1.0));
        let b = fit_axis_aligned_box(&mask_from_points(16, 16, &[(2, 3), (10, 4), (6, 9)]), 0.5).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (2.0, 3.0, 9.0, 7.0));
    }

    #[test]
    fn fit_box_threshold_is_inclusive() {
        let mut m = Mask::zeros(4, 4, CoordSpace::Image);
        m.set(1, 2, 0.5);
        let b = fit_axis_aligned_box(&m, 0.5).unwrap();
        assert_eq!((b.x, b.y), (1.0, 2.0));
    }

    proptest! {
        #[test]
        fn fitted_box_is_tight(pts in prop::collection::vec((0usize..20, 0usize..15), 1..30)) {
            let m = mask_from_points(20, 15, &pts);
            let b = fit_axis_aligned_box(&m, 0.5).unwrap();
            let (x0, y0) = (b.x as usize, b.y as usize);
            let (x1, y1) = (x0 + b.w as usize - 1, y0 + b.h as usize - 1);
            for &(c, r) in &pts {
                prop_assert!(c >= x0 && c <= x1 && r >= y0 && r <= y1);
            }
            prop_assert!(pts.iter().any(|p| p.0 == x0));
            prop_assert!(pts.iter().any(|p| p.0 == x1));
            prop_assert!(pts.iter().any(|p| p.1 == y0));
            prop_assert!(pts.iter().any(|p| p.1 == y1));
        }

        #[test]
        fn mapping_round_trip(cx in -100.0f64..300.0, cy in -100.0f64..300.0, side in 1.0f64..400.0,
                              res in 16usize..400, u in -50.0f64..450.0, v in -50.0f64..450.0) {
            let m = CoordinateMapping::for_region(cx, cy, side, res).unwrap();
            let (x, y) = m.to_frame(u, v);
            let (u2, v2) = m.to_patch(x, y);
            prop_assert!((u - u2).abs() <= 1e-6 && (v - v2).abs() <= 1e-6);
            let (x2, y2) = m.to_frame(u2, v2);
            prop_assert!((x - x2).abs() <= 1e-6 && (y - y2).abs() <= 1e-6);
        }
    }

    #[test]
    fn location_channel_small_grids() {
        let diag3 = (18.0f64).sqrt();
        let l = euclidean_location_channel((1, 1), 3, 3).unwrap();
        let s2 = 2.0f64.sqrt();
        let expected = [s2, 1.0, s2, 1.0, 0.0, 1.0, s2, 1.0, s2];
        for (v, e) in l.values.iter().zip(expected) {
            assert!((*v as f64 * diag3 - e).abs() < 1e-6);
        }
        let l = euclidean_location_channel((0, 0), 2, 2).unwrap();
        let diag2 = 8.0f64.sqrt();
        for (v, e) in l.values.iter().zip([0.0, 1.0, 1.0, s2]) {
            assert!((*v as f64 * diag2 - e).abs() < 1e-6);
        }
        assert!(matches!(euclidean_location_channel((3, 0), 3, 3), Err(Error::PeakOutOfBounds(..))));
    }

    #[test]
    fn location_channel_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows = rng.gen_range(1..=64);
            let cols = rng.gen_range(1..=64);
            let peak = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let l = euclidean_location_channel(peak, rows, cols).unwrap();
            let diag = ((rows * rows + cols * cols) as f64).sqrt();
            let mut max_at_peak = 0.0f32;
            for r in 0..rows {
                for c in 0..cols {
                    let mut best = f64::INFINITY;
                    // Nearest of a single seed, scanned the slow way.
                    for pr in 0..rows {
                        for pc in 0..cols {
                            if (pr, pc) == peak {
                                let d = (((r as i64 - pr as i64).pow(2) + (c as i64 - pc as i64).pow(2)) as f64).sqrt();
                                best = best.min(d);
                            }
                        }
                    }
                    let v = l.values[r * cols + c];
                    assert!((v as f64 - best / diag).abs() <= 1e-6);
                    assert!(v <= 1.0);
                    max_at_peak = max_at_peak.max(if (r, c) == peak { v } else { 0.0 });
                }
            }
            assert_eq!(max_at_peak, 0.0);
        }
    }

    #[test]
    fn identity_crop_returns_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
        let frame = Image::new(32, 32, 3, data).unwrap();
        let (patch, mapping) = extract_region(&frame, (16.0, 16.0), 32.0, 32).unwrap();
        assert_eq!(patch, frame);
        assert_eq!(mapping, CoordinateMapping::identity());
    }

    #[test]
    fn degenerate_region_is_rejected() {
        let frame = Image::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert!(matches!(extract_region(&frame, (2.0, 2.0), 0.0, 8), Err(Error::DegenerateRegion(_))));
        assert!(matches!(extract_region(&frame, (2.0, 2.0), -3.0, 8), Err(Error::DegenerateRegion(_))));
    }

    #[test]
    fn edge_crop_matches_pad_then_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(4..20), rng.gen_range(4..20));
            let data: Vec<f32> = (0..w * h).map(|_| rng.gen()).collect();
            let frame = Image::new(w, h, 1, data.clone()).unwrap();
            let side = rng.gen_range(2..24usize);
            let left = rng.gen_range(-(side as i64)..w as i64);
            let top = rng.gen_range(-(side as i64)..h as i64);
            let center = (left as f64 + side as f64 / 2.0, top as f64 + side as f64 / 2.0);
            let (patch, _) = extract_region(&frame, center, side as f64, side).unwrap();
            // Oracle: pad by replication far enough, then copy the window.
            let pad = 30i64;
            let (pw, ph) = (w as i64 + 2 * pad, h as i64 + 2 * pad);
            let mut padded = vec![0.0f32; (pw * ph) as usize];
            for r in 0..ph {
                for c in 0..pw {
                    let sr = (r - pad).clamp(0, h as i64 - 1) as usize;
                    let sc = (c - pad).clamp(0, w as i64 - 1) as usize;
                    padded[(r * pw + c) as usize] = data[sr * w + sc];
                }
            }
            for v in 0..side {
                for u in 0..side {
                    let r = top + v as i64 + pad;
                    let c = left + u as i64 + pad;
                    let expected = padded[(r * pw + c) as usize];
                    assert!((patch.pixel(u, v)[0] - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mask_to_frame_identity_and_downscale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..24 * 24).map(|_| rng.gen()).collect();
        let m = Mask::new(24, 24, data, CoordSpace::Patch).unwrap();
        let out = map_mask_to_frame(&m, &CoordinateMapping::identity(), 24, 24);
        assert_eq!(out.data(), m.data());

        // A 40x40 patch covering a 20x20 frame: scale 0.5.
        let mut sq = Mask::zeros(40, 40, CoordSpace::Patch);
        for r in 8..28 {
            for c in 12..32 {
                sq.set(c, r, 1.0);
            }
        }
        let mapping = CoordinateMapping { scale_x: 0.5, scale_y: 0.5, offset_x: 0.0, offset_y: 0.0 };
        let out = map_mask_to_frame(&sq, &mapping, 20, 20);
        let b = fit_axis_aligned_box(&out, 0.5).unwrap();
        // Nearest-pixel oracle: the square occupies cols 6..16, rows 4..14.
        assert!((b.x - 6.0).abs() <= 1.0 && (b.y - 4.0).abs() <= 1.0);
        assert!((b.w - 10.0).abs() <= 1.0 && (b.h - 10.0).abs() <= 1.0);
    }

    proptest! {
        #[test]
        fn mapped_masks_stay_in_range(seed in 0u64..1000, scale in 0.2f64..4.0, ox in -20.0f64..20.0, oy in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..16 * 16).map(|_| rng.gen()).collect();
            let m = Mask::new(16, 16, data, CoordSpace::Patch).unwrap();
            let mapping = CoordinateMapping { scale_x: scale, scale_y: scale, offset_x: ox, offset_y: oy };
            let out = map_mask_to_frame(&m, &mapping, 30, 25);
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let density = rng.gen_range(0.0..0.3);
            let seeds: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(density)).collect();
            let dt = squared_distance_transform(&seeds, w, h);
            for r in 0..h {
                for c in 0..w {
                    let mut best = f64::INFINITY;
                    for sr in 0..h {
                        for sc in 0..w {
                            if seeds[sr * w + sc] {
                                let d = ((r as f64 - sr as f64).powi(2) + (c as f64 - sc as f64).powi(2)) as f64;
                                best = best.min(d);
                            }
                        }
                    }
                    assert_eq!(dt[r * w + c], best, "at ({c},{r})");
                }
            }
        }
    }
}
