//! Scale estimation: predicts the target's full (amodal) extent from the
//! predicted mask, template features and search features.
//!
//! Region channels are ordered `[d_T, d_B, d_R, d_L]` and expressed in
//! stride-16 cells relative to each cell centre:
//! `d_R = right - x`, `d_L = left - x`, `d_T = y - top`, `d_B = y - bottom`,
//! so that `w = d_R - d_L` and `h = d_T - d_B` are positive inside the box.

use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CoordinateMapping};
use crate::nn::{Conv2d, ConvGeom, Graph, NodeId, ParamStore, Tensor};

/// Stride of the cell grid the heads predict on.
pub const CELL: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub out: Conv2d,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, nout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::same(store, &format!("{name}.conv1"), cin, width, 3, rng),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), width, width, 3, rng),
            out: Conv2d::same(store, &format!("{name}.out"), width, nout, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let y = self.conv1.forward(g, store, x);
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y);
        let y = g.relu(y);
        self.out.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct SemNets {
    /// Mask adjustment: four stride-2 convolutions, ReLU after all but the last.
    pub mam: [Conv2d; 4],
    pub template_reduce: Conv2d,
    pub search_reduce: Conv2d,
    pub cls: Head,
    pub region: Head,
    mask_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SemOutput {
    /// `[N, 2, h, w]`, channel 0 is the target class.
    pub cls: NodeId,
    /// `[N, 4, h, w]` as `[d_T, d_B, d_R, d_L]` in cells.
    pub region: NodeId,
}

impl SemNets {
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.mam_width;
        let widths = [1, (m / 4).max(1), (m / 2).max(1), m, m];
        let mam = [0, 1, 2, 3].map(|i| {
            Conv2d::new(store, &format!("sem.mam{i}"), widths[i], widths[i + 1], 3, ConvGeom::strided(3, 2), rng)
        });
        let one = ConvGeom { stride: 1, pad: [0; 4] };
        let feat = cfg.backbone_widths[3];
        let red = cfg.sem_reduce_channels;
        let template_reduce = Conv2d::new(store, "sem.template_reduce", feat, red, 1, one, rng);
        let search_reduce = Conv2d::new(store, "sem.search_reduce", feat, red, 1, one, rng);
        let cls = Head::new(store, "sem.cls", red + m, cfg.sem_head_width, 2, rng);
        let region = Head::new(store, "sem.region", red + m, cfg.sem_head_width, 4, rng);
        Self { mam, template_reduce, search_reduce, cls, region, mask_channels: m }
    }

    pub fn mask_channels(&self) -> usize {
        self.mask_channels
    }

    /// Mask `[N, 1, H, W]` to features at stride 16.
    pub fn adjust_mask(&self, g: &mut Graph, store: &ParamStore, mask: NodeId) -> NodeId {
        let mut x = mask;
        for (i, conv) in self.mam.iter().enumerate() {
            x = conv.forward(g, store, x);
            if i < 3 {
                x = g.relu(x);
            }
        }
        x
    }

    /// Stand-in for the adjustment module: the mask resized bilinearly to the
    /// cell grid, repeated over the feature channels.
    pub fn downsample_mask(&self, g: &mut Graph, mask: NodeId) -> NodeId {
        let (_, _, h, w) = g.value(mask).dims4();
        let small = g.resize_bilinear(mask, h / CELL, w / CELL);
        g.repeat_channels(small, self.mask_channels)
    }

    /// Reduced template descriptor `[N, C]`: the mean of the reduced template
    /// features over the central quarter of the grid, where the target sits.
    pub fn template_descriptor(&self, g: &mut Graph, store: &ParamStore, template: NodeId) -> NodeId {
        let (n, _, h, w) = g.value(template).dims4();
        let y = self.template_reduce.forward(g, store, template);
        let y = g.relu(y);
        let (r0, r1) = central(h);
        let (c0, c1) = central(w);
        let mut weights = vec![0.0f32; n * h * w];
        for i in 0..n {
            for r in r0..r1 {
                for c in c0..c1 {
                    weights[(i * h + r) * w + c] = 1.0;
                }
            }
        }
        let m = g.constant(Tensor::new([n, 1, h, w], weights));
        let c = g.value(y).shape()[1];
        let m = g.repeat_channels(m, c);
        let masked = g.mul(y, m);
        let pooled = g.mean_spatial(masked);
        g.scale(pooled, (h * w) as f32 / ((r1 - r0) * (c1 - c0)) as f32)
    }

    /// Class and region maps from the template descriptor `[N, C]`, raw
    /// stride-16 search features and mask features.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        template: NodeId,
        search: NodeId,
        mask_feats: NodeId,
    ) -> Result<SemOutput> {
        let (n, _, h, w) = g.value(search).dims4();
        let (mn, mc, mh, mw) = g.value(mask_feats).dims4();
        if mn != n || mh != h || mw != w || mc != self.mask_channels {
            return Err(Error::ShapeMismatch(format!(
                "mask features {:?} for search {:?}",
                g.shape(mask_feats),
                g.shape(search)
            )));
        }
        if g.shape(template)[0] != n {
            return Err(Error::ShapeMismatch("template batch differs from search batch".into()));
        }
        let s = self.search_reduce.forward(g, store, search);
        let s = g.relu(s);
        let s = g.scale_channels(s, template);
        let x = g.concat_channels(&[s, mask_feats]);
        let cls = self.cls.forward(g, store, x);
        let region = self.region.forward(g, store, x);
        Ok(SemOutput { cls, region })
    }
}

fn central(n: usize) -> (usize, usize) {
    let half = (n / 8).max(1);
    let mid = n / 2;
    (mid.saturating_sub(half), (mid + half).min(n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleEstimate {
    /// Most likely cell `(row, col)`.
    pub cell: (usize, usize),
    /// Width and height in frame pixels.
    pub width: f64,
    pub height: f64,
    /// Box centre implied by the offsets, in frame pixels.
    pub center: (f64, f64),
    /// Target-class softmax at `cell`.
    pub confidence: f64,
}

impl ScaleEstimate {
    pub fn to_box(&self) -> Result<BoundingBox> {
        BoundingBox::from_center(self.center.0, self.center.1, self.width, self.height, crate::geometry::BoxRole::Inherent)
    }
}

/// Mapping from cell coordinates (cell `c` spans `[c, c + 1)`) to frame
/// pixels, given the patch-to-frame mapping.
pub fn cell_mapping(patch: &CoordinateMapping) -> CoordinateMapping {
    CoordinateMapping {
        scale_x: patch.scale_x * CELL as f64,
        scale_y: patch.scale_y * CELL as f64,
        offset_x: patch.offset_x,
        offset_y: patch.offset_y,
    }
}

/// Reads the scale at the cell with the highest target probability.
/// `cells` maps cell coordinates to frame pixels (see [`cell_mapping`]).
pub fn decode_scale(cls: &Tensor, region: &Tensor, cells: &CoordinateMapping) -> Result<ScaleEstimate> {
    let (_, cc, h, w) = cls.dims4();
    let (_, rc, rh, rw) = region.dims4();
    if cc != 2 || rc != 4 || rh != h || rw != w {
        return Err(Error::ShapeMismatch(format!("cls {:?} / region {:?}", cls.shape(), region.shape())));
    }
    let (fg, bg) = (cls.plane(0, 0), cls.plane(0, 1));
    let prob = |i: usize| 1.0 / (1.0 + (bg[i] as f64 - fg[i] as f64).exp());
    let mut best = 0;
    let mut best_p = prob(0);
    for i in 1..h * w {
        let p = prob(i);
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    let at = |c: usize| region.plane(0, c)[best] as f64;
    let (dt, db, dr, dl) = (at(0), at(1), at(2), at(3));
    let (wc, hc) = (dr - dl, dt - db);
    let (width, height) = (wc * cells.scale_x, hc * cells.scale_y);
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::NonPositiveScale(width as f32, height as f32));
    }
    let (r, c) = (best / w, best % w);
    let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
    let center = cells.to_frame(px + 0.5 * (dr + dl), py - 0.5 * (dt + db));
    Ok(ScaleEstimate { cell: (r, c), width, height, center, confidence: best_p })
}

/// Training targets for one search patch.
#[derive(Clone, Debug)]
pub struct SemTargets {
    /// `[1, 1, h, w]` disk of radius one cell around the box centre.
    pub cls: Tensor,
    /// `[1, 4, h, w]` true offsets.
    pub region: Tensor,
    /// `[1, 1, h, w]` cells whose centre lies inside the box.
    pub inside: Tensor,
}

impl SemTargets {
    /// Targets for `target` given in cell coordinates on an `h x w` grid.
    pub fn new(target: &BoundingBox, h: usize, w: usize) -> Self {
        let (cx, cy) = target.center();
        let (left, top, right, bottom) = (target.x, target.y, target.x + target.w, target.y + target.h);
        let mut cls = vec![0.0f32; h * w];
        let mut region = vec![0.0f32; 4 * h * w];
        let mut inside = vec![0.0f32; h * w];
        let plane = h * w;
        let mut nearest = (0, f64::INFINITY);
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let i = r * w + c;
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                if d2 <= 1.0 {
                    cls[i] = 1.0;
                }
                if d2 < nearest.1 {
                    nearest = (i, d2);
                }
                if px >= left && px < right && py >= top && py < bottom {
                    inside[i] = 1.0;
                }
                region[i] = (py - top) as f32;
                region[plane + i] = (py - bottom) as f32;
                region[2 * plane + i] = (right - px) as f32;
                region[3 * plane + i] = (left - px) as f32;
            }
        }
        // Small or off-centre boxes still get one positive and one supervised cell.
        cls[nearest.0] = 1.0;
        inside[nearest.0] = 1.0;
        Self {
            cls: Tensor::new([1, 1, h, w], cls),
            region: Tensor::new([1, 4, h, w], region),
            inside: Tensor::new([1, 1, h, w], inside),
        }
    }

    pub fn stack(items: &[SemTargets]) -> SemTargets {
        let cat = |f: fn(&SemTargets) -> &Tensor| Tensor::stack_batch(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
        SemTargets { cls: cat(|t| &t.cls), region: cat(|t| &t.region), inside: cat(|t| &t.inside) }
    }
}

/// Class-balanced cross-entropy on the class map plus L1 on the region
/// channels at cells inside the box. Both terms are averaged over the batch.
pub fn sem_loss(g: &mut Graph, out: &SemOutput, targets: &SemTargets) -> NodeId {
    let (n, _, h, w) = targets.cls.dims4();
    let plane = h * w;
    let mut cls_w = vec![0.0f32; n * 2 * plane];
    let mut reg_w = vec![0.0f32; n * 4 * plane];
    for i in 0..n {
        let y = targets.cls.plane(i, 0);
        let inside = targets.inside.plane(i, 0);
        let pos = y.iter().filter(|&&v| v > 0.5).count();
        let neg = plane - pos;
        for (j, &v) in y.iter().enumerate() {
            if v > 0.5 {
                cls_w[i * 2 * plane + j] = 0.5 / (pos.max(1) * n) as f32;
            } else {
                cls_w[(i * 2 + 1) * plane + j] = 0.5 / (neg.max(1) * n) as f32;
            }
        }
        let count = inside.iter().filter(|&&v| v > 0.5).count().max(1);
        for c in 0..4 {
            for (j, &v) in inside.iter().enumerate() {
                if v > 0.5 {
                    reg_w[(i * 4 + c) * plane + j] = 1.0 / (4 * count * n) as f32;
                }
            }
        }
    }
    let cw = g.constant(Tensor::new([n, 2, h, w], cls_w));
    let lp = g.log_softmax_channels(out.cls);
    let ce = g.mul(lp, cw);
    let ce = g.sum_all(ce);
    let ce = g.scale(ce, -1.0);
    let t = g.constant(targets.region.clone());
    let d = g.sub(out.region, t);
    let d = g.abs(d);
    let rw = g.constant(Tensor::new([n, 4, h, w], reg_w));
    let l1 = g.mul(d, rw);
    let l1 = g.sum_all(l1);
    g.add(ce, l1)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nn::{Adam, Trainable};

    fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            backbone_widths: [4, 8, 8, 16],
            sem_reduce_channels: 16,
            sem_head_width: 16,
            mam_width: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn handcrafted_offsets_decode_to_extent() {
        let mut cls = Tensor::zeros([1, 2, 10, 10]);
        cls.data_mut()[5 * 10 + 5] = 4.0;
        let mut region = Tensor::zeros([1, 4, 10, 10]);
        let i = 55;
        for (c, v) in [15.0f32, -9.0, 20.0, -12.0].into_iter().enumerate() {
            region.data_mut()[c * 100 + i] = v;
        }
        let est = decode_scale(&cls, &region, &CoordinateMapping::identity()).unwrap();
        assert_eq!(est.cell, (5, 5));
        assert_eq!((est.width, est.height), (32.0, 24.0));
        assert_eq!(est.center, (9.5, 2.5));
        region.data_mut()[3 * 100 + i] = 20.0;
        assert!(matches!(
            decode_scale(&cls, &region, &CoordinateMapping::identity()),
            Err(Error::NonPositiveScale(..))
        ));
    }

    #[test]
    fn decoding_matches_a_direct_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..60 {
            let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
            let cls = random(&[1, 2, h, w], -3.0, 3.0, &mut rng);
            let mut region = random(&[1, 4, h, w], 0.5, 4.0, &mut rng);
            for v in &mut region.data_mut()[2 * h * w..] {
                *v -= 4.5;
            }
            // d_R is in [-4, -0.5] and d_L in [-4, -0.5]: the sign of w varies.
            let map = CoordinateMapping { scale_x: 3.0, scale_y: 2.0, offset_x: 10.0, offset_y: -4.0 };
            let mut best = (0usize, f64::MIN);
            for i in 0..h * w {
                let e = (cls.plane(0, 0)[i] as f64).exp();
                let p = e / (e + (cls.plane(0, 1)[i] as f64).exp());
                if p > best.1 {
                    best = (i, p);
                }
            }
            let d = |c: usize| region.plane(0, c)[best.0] as f64;
            let (wi, he) = ((d(2) - d(3)) * 3.0, (d(0) - d(1)) * 2.0);
            match decode_scale(&cls, &region, &map) {
                Ok(est) => {
                    assert_eq!(est.cell, (best.0 / w, best.0 % w));
                    assert!((est.width - wi).abs() < 1e-12 && (est.height - he).abs() < 1e-12);
                    assert!((est.confidence - best.1).abs() < 1e-12);
                }
                Err(Error::NonPositiveScale(..)) => assert!(wi <= 0.0 || he <= 0.0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn constant_shift_of_class_logits_keeps_the_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let cls = random(&[1, 2, 8, 8], -4.0, 4.0, &mut rng);
            let region = random(&[1, 4, 8, 8], 1.0, 2.0, &mut rng).map(|v| v);
            let mut region = region;
            for v in &mut region.data_mut()[64..128] {
                *v = -*v;
            }
            for v in &mut region.data_mut()[192..] {
                *v = -*v;
            }
            let base = decode_scale(&cls, &region, &CoordinateMapping::identity()).unwrap();
            for k in [0.5f32, 3.0, -7.0] {
                let shifted = cls.map(|v| v + k);
                let est = decode_scale(&shifted, &region, &CoordinateMapping::identity()).unwrap();
                assert_eq!(est.cell, base.cell);
            }
        }
    }

    #[test]
    fn shapes_on_a_24_cell_grid() {
        let cfg = NetConfig::default();
        let mut store = ParamStore::new();
        let nets = SemNets::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::inference();
        let mask = g.constant(Tensor::zeros([1, 1, 384, 384]));
        let mf = nets.adjust_mask(&mut g, &store, mask);
        assert_eq!(g.shape(mf), &[1, 64, 24, 24]);
        let ds = nets.downsample_mask(&mut g, mask);
        assert_eq!(g.shape(ds), &[1, 64, 24, 24]);
        let t = g.constant(Tensor::zeros([1, 128, 24, 24]));
        let td = nets.template_descriptor(&mut g, &store, t);
        let s = g.constant(Tensor::full([1, 128, 24, 24], 0.1));
        let out = nets.predict(&mut g, &store, td, s, mf).unwrap();
        assert_eq!(g.shape(out.cls), &[1, 2, 24, 24]);
        assert_eq!(g.shape(out.region), &[1, 4, 24, 24]);
        let bad = g.constant(Tensor::zeros([1, 64, 12, 12]));
        assert!(nets.predict(&mut g, &store, td, s, bad).is_err());
    }

    #[test]
    fn gradient_reaches_every_part() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = SemNets::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new(Trainable::All);
        let mask = g.constant(random(&[1, 1, 64, 64], 0.0, 1.0, &mut rng));
        let t = g.constant(random(&[1, 16, 4, 4], 0.0, 1.0, &mut rng));
        let s = g.constant(random(&[1, 16, 4, 4], 0.0, 1.0, &mut rng));
        let mf = nets.adjust_mask(&mut g, &store, mask);
        let td = nets.template_descriptor(&mut g, &store, t);
        let out = nets.predict(&mut g, &store, td, s, mf).unwrap();
        let target = SemTargets::new(&BoundingBox::new(1.0, 1.0, 2.0, 1.5, crate::geometry::BoxRole::Inherent).unwrap(), 4, 4);
        let loss = sem_loss(&mut g, &out, &target);
        let grads = g.backward(loss);
        for group in ["sem.mam", "sem.template_reduce", "sem.search_reduce", "sem.cls", "sem.region"] {
            assert!(grads.norm_with_prefix(&store, group) > 0.0, "{group}");
        }
    }

    #[test]
    fn targets_follow_the_signed_convention() {
        let b = BoundingBox::new(2.0, 1.0, 3.0, 4.0, crate::geometry::BoxRole::Inherent).unwrap();
        let t = SemTargets::new(&b, 8, 8);
        for i in 0..64 {
            if t.inside.data()[i] > 0.5 {
                let d = |c: usize| t.region.plane(0, c)[i];
                assert!((d(2) - d(3) - 3.0).abs() < 1e-6);
                assert!((d(0) - d(1) - 4.0).abs() < 1e-6);
                assert!(d(2) > 0.0 && d(3) < 0.0 && d(0) > 0.0 && d(1) < 0.0);
            }
        }
        assert_eq!(t.inside.data().iter().filter(|&&v| v > 0.5).count(), 12);
        // Centre (3.5, 3.0): cells within one cell of it are positive.
        assert_eq!(t.cls.data()[2 * 8 + 3], 1.0);
        assert_eq!(t.cls.data()[2 * 8 + 5], 0.0);
    }

    #[test]
    fn region_loss_ignores_cells_outside_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0, crate::geometry::BoxRole::Inherent).unwrap();
        let t = SemTargets::new(&b, 8, 8);
        let cls = random(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let region = random(&[1, 4, 8, 8], -3.0, 3.0, &mut rng);
        let mut zeroed = region.clone();
        for c in 0..4 {
            for i in 0..64 {
                if t.inside.data()[i] < 0.5 {
                    zeroed.data_mut()[c * 64 + i] = 0.0;
                }
            }
        }
        let eval = |r: &Tensor| {
            let mut g = Graph::inference();
            let out = SemOutput { cls: g.constant(cls.clone()), region: g.constant(r.clone()) };
            let l = sem_loss(&mut g, &out, &t);
            g.value(l).item()
        };
        assert_eq!(eval(&region), eval(&zeroed));
    }

    #[test]
    fn overfitting_one_pair_halves_the_loss() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nets = SemNets::new(&mut store, &cfg, &mut rng);
        let mask = random(&[1, 1, 128, 128], 0.0, 1.0, &mut rng);
        let t = random(&[1, 16, 8, 8], 0.0, 1.0, &mut rng);
        let s = random(&[1, 16, 8, 8], 0.0, 1.0, &mut rng);
        let target = SemTargets::new(&BoundingBox::new(2.5, 3.0, 3.0, 2.0, crate::geometry::BoxRole::Inherent).unwrap(), 8, 8);
        let mut adam = Adam::new(1e-3);
        let mut history = Vec::new();
        for _ in 0..300 {
            let mut g = Graph::new(Trainable::All);
            let m = g.constant(mask.clone());
            let tn = g.constant(t.clone());
            let sn = g.constant(s.clone());
            let mf = nets.adjust_mask(&mut g, &store, m);
            let td = nets.template_descriptor(&mut g, &store, tn);
            let out = nets.predict(&mut g, &store, td, sn, mf).unwrap();
            let loss = sem_loss(&mut g, &out, &target);
            history.push(g.value(loss).item());
            let grads = g.backward(loss);
            adam.step(&mut store, &grads);
        }
        assert!(history[299] <= 0.5 * history[0], "{} -> {}", history[0], history[299]);
    }
}
