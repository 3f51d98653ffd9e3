//! Procedural video sequences with exact masks: a textured star-shaped blob
//! moving and deforming over a textured background, with an optional
//! look-alike distractor and an optional occluder.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{fit_axis_aligned_box, BoundingBox, BoxRole, CoordSpace, Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub frame_size: usize,
    pub length: usize,
    pub distractor: bool,
    /// Frames `[start, end)` during which the right half of the target is hidden.
    pub occlusion: Option<(usize, usize)>,
    /// Mean target radius in pixels.
    pub radius: f64,
    /// Relative amplitude of the shape and size oscillation.
    pub deformation: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { frame_size: 192, length: 60, distractor: true, occlusion: None, radius: 20.0, deformation: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub params: SynthParams,
    pub seed: u64,
    pub frames: Vec<Image>,
    /// Visible target pixels.
    pub masks: Vec<Mask>,
    /// Tight box of the whole target, hidden parts included.
    pub amodal: Vec<BoundingBox>,
    /// Target, distractor and occluder pixels together.
    pub objects: Vec<Mask>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Tight box of the visible mask.
    pub fn visible_box(&self, i: usize) -> BoundingBox {
        fit_axis_aligned_box(&self.masks[i], 0.5).expect("visible masks are never empty")
    }
}

#[derive(Clone, Debug)]
struct Blob {
    color: [f64; 3],
    stripe: (f64, f64, f64),
    lobes: f64,
    lobe_phase: f64,
    path: [(f64, f64, f64); 2],
    center0: (f64, f64),
    radius: f64,
    size_period: f64,
    size_phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, color: [f64; 3], center0: (f64, f64), reach: (f64, f64), radius: f64) -> Self {
        let period = |rng: &mut ChaCha8Rng| rng.gen_range(60.0..140.0);
        Self {
            color,
            stripe: (rng.gen_range(0.25..0.6), rng.gen_range(-0.4..0.4), rng.gen_range(0.0..2.0 * PI)),
            lobes: rng.gen_range(3..6) as f64,
            lobe_phase: rng.gen_range(0.0..2.0 * PI),
            path: [
                (reach.0, period(rng), rng.gen_range(0.0..2.0 * PI)),
                (reach.1, period(rng), rng.gen_range(0.0..2.0 * PI)),
            ],
            center0,
            radius,
            size_period: rng.gen_range(50.0..110.0),
            size_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn center(&self, t: f64) -> (f64, f64) {
        let [(ax, px, fx), (ay, py, fy)] = self.path;
        (self.center0.0 + ax * (2.0 * PI * t / px + fx).sin(), self.center0.1 + ay * (2.0 * PI * t / py + fy).sin())
    }

    /// Boundary radius in direction `theta` at time `t`.
    fn boundary(&self, theta: f64, t: f64, deformation: f64) -> f64 {
        let size = 1.0 + deformation * (2.0 * PI * t / self.size_period + self.size_phase).sin();
        let lobe = 1.0 + 0.2 * (self.lobes * theta + self.lobe_phase + 0.05 * t).sin();
        self.radius * size * lobe
    }

    fn max_radius(&self, deformation: f64) -> f64 {
        self.radius * (1.0 + deformation) * 1.2
    }

    fn contains(&self, x: f64, y: f64, t: f64, deformation: f64) -> bool {
        let (cx, cy) = self.center(t);
        let (dx, dy) = (x - cx, y - cy);
        let d = (dx * dx + dy * dy).sqrt();
        d < self.boundary(dy.atan2(dx), t, deformation)
    }

    fn texture(&self, x: f64, y: f64, t: f64) -> [f64; 3] {
        let (cx, cy) = self.center(t);
        let (fu, fv, ph) = self.stripe;
        let s = 0.78 + 0.22 * (fu * (x - cx) + fv * (y - cy) + ph).sin();
        self.color.map(|c| c * s)
    }
}

#[derive(Clone, Debug)]
struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Background {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let g = rng.gen_range(0.3..0.6);
        let base = [0, 1, 2].map(|_| g + rng.gen_range(-0.08..0.08));
        let waves = (0..4)
            .map(|_| {
                let f = rng.gen_range(0.02..0.15);
                let a = rng.gen_range(0.0..2.0 * PI);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), [0, 1, 2].map(|_| rng.gen_range(0.0..0.07)))
            })
            .collect();
        Self { base, waves }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (fx, fy, ph, amp) in &self.waves {
            let s = (fx * x + fy * y + ph).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // A saturated colour: one strong channel, one weak, one in between.
    let mut c = [rng.gen_range(0.75..1.0), rng.gen_range(0.0..0.2), rng.gen_range(0.1..0.6)];
    for i in (1..3).rev() {
        let j = rng.gen_range(0..=i);
        c.swap(i, j);
    }
    c
}

fn occluder_color(x: f64, y: f64) -> [f64; 3] {
    let checker = ((x / 6.0).floor() as i64 + (y / 6.0).floor() as i64).rem_euclid(2) == 0;
    let v = if checker { 0.15 } else { 0.85 };
    [v, v, v]
}

/// The tracking benchmark: 200 frames, one distractor, the target half
/// hidden during frames 90 to 119.
pub fn benchmark_params() -> SynthParams {
    SynthParams { length: 200, occlusion: Some((90, 120)), ..SynthParams::default() }
}

/// Generates a sequence; equal `(params, seed)` give bit-identical output.
pub fn generate_sequence(params: &SynthParams, seed: u64) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.frame_size as f64;
    let bg = Background::random(&mut rng);
    let color = random_color(&mut rng);
    let radius = params.radius * rng.gen_range(0.85..1.15);
    let target = Blob::random(&mut rng, color, (0.27 * s, 0.5 * s), (0.08 * s, 0.26 * s), radius);
    let distractor = params.distractor.then(|| {
        let r = params.radius * rng.gen_range(0.85..1.15);
        Blob::random(&mut rng, color, (0.77 * s, 0.5 * s), (0.07 * s, 0.26 * s), r)
    });
    let n = params.frame_size;
    let mut out = SyntheticSequence {
        params: params.clone(),
        seed,
        frames: Vec::with_capacity(params.length),
        masks: Vec::with_capacity(params.length),
        amodal: Vec::with_capacity(params.length),
        objects: Vec::with_capacity(params.length),
    };
    let reach = target.max_radius(params.deformation) + 2.0;
    for f in 0..params.length {
        let t = f as f64;
        let (cx, cy) = target.center(t);
        let occluded = params.occlusion.is_some_and(|(a, b)| f >= a && f < b);
        let mut pixels = vec![0.0f32; n * n * 3];
        let mut visible = vec![0.0f32; n * n];
        let mut full = vec![0.0f32; n * n];
        let mut objects = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let i = r * n + c;
                let mut col = bg.color(x, y);
                if let Some(d) = &distractor {
                    if d.contains(x, y, t, params.deformation) {
                        col = d.texture(x, y, t);
                        objects[i] = 1.0;
                    }
                }
                let on_target = target.contains(x, y, t, params.deformation);
                if on_target {
                    col = target.texture(x, y, t);
                    full[i] = 1.0;
                    visible[i] = 1.0;
                    objects[i] = 1.0;
                }
                if occluded && x >= cx && x < cx + reach && (y - cy).abs() < reach {
                    col = occluder_color(x, y);
                    visible[i] = 0.0;
                    objects[i] = 1.0;
                }
                for k in 0..3 {
                    pixels[i * 3 + k] = col[k].clamp(0.0, 1.0) as f32;
                }
            }
        }
        let full = Mask::new(n, n, full, CoordSpace::Image).expect("values are 0 or 1");
        let amodal = fit_axis_aligned_box(&full, 0.5).expect("target is inside the frame").with_role(BoxRole::Inherent);
        out.frames.push(Image::new(n, n, 3, pixels).expect("sizes match"));
        out.masks.push(Mask::new(n, n, visible, CoordSpace::Image).expect("values are 0 or 1"));
        out.amodal.push(amodal);
        out.objects.push(Mask::new(n, n, objects, CoordSpace::Image).expect("values are 0 or 1"));
    }
    out
}

/// Labels 4-connected components of a binary grid; returns the count.
pub fn count_components(on: &[bool], width: usize, height: usize) -> usize {
    let mut seen = vec![false; on.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(distractor: bool) -> SynthParams {
        SynthParams { length: 6, distractor, ..SynthParams::default() }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = generate_sequence(&short(true), 11);
        let b = generate_sequence(&short(true), 11);
        assert_eq!(a, b);
        let c = generate_sequence(&short(true), 12);
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn every_mask_is_nonempty_and_inside_its_amodal_box() {
        let p = SynthParams { length: 30, occlusion: Some((5, 20)), ..SynthParams::default() };
        for seed in 0..3 {
            let s = generate_sequence(&p, seed);
            assert_eq!(s.frames.len(), s.masks.len());
            for i in 0..s.len() {
                assert!(s.masks[i].count_at_least(0.5) > 0);
                let v = s.visible_box(i);
                let a = &s.amodal[i];
                assert!(v.x >= a.x && v.y >= a.y && v.x + v.w <= a.x + a.w && v.y + v.h <= a.y + a.h);
            }
        }
    }

    #[test]
    fn occlusion_hides_part_of_the_target() {
        let p = SynthParams { length: 12, occlusion: Some((4, 8)), ..SynthParams::default() };
        let s = generate_sequence(&p, 3);
        for i in 0..12 {
            let ratio = s.visible_box(i).area() / s.amodal[i].area();
            if (4..8).contains(&i) {
                assert!(ratio < 0.75, "frame {i}: {ratio}");
            } else {
                assert_eq!(ratio, 1.0);
            }
        }
    }

    #[test]
    fn distractor_gives_two_components() {
        for seed in 0..5 {
            let s = generate_sequence(&short(true), seed);
            for m in &s.objects {
                assert_eq!(count_components(&m.binarize(0.5), m.width(), m.height()), 2);
            }
            let s = generate_sequence(&short(false), seed);
            let m = &s.objects[0];
            assert_eq!(count_components(&m.binarize(0.5), m.width(), m.height()), 1);
        }
    }

    #[test]
    fn component_counter_on_small_grids() {
        let on = [true, false, true, false, false, false, true, true, false];
        assert_eq!(count_components(&on, 3, 3), 3);
        assert_eq!(count_components(&[true; 9], 3, 3), 1);
        assert_eq!(count_components(&[false; 4], 2, 2), 0);
    }
}
