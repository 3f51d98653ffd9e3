//! Online tracking loop: initialization from a mask or a box, then per frame
//! segmentation, box fitting, scale update and filter update.

use std::sync::Arc;
use std::time::Instant;

use log::debug;
use serde::Serialize;

use crate::backbone::images_to_tensor;
use crate::config::{Ablation, TrackerConfig};
use crate::error::{Error, Result};
use crate::gem::DcfFilter;
use crate::geometry::{
    extract_mask_region, extract_region, fit_axis_aligned_box, map_mask_to_frame, BoundingBox, BoxRole, CoordSpace,
    CoordinateMapping, Image, Mask,
};
use crate::gim::{build_model, foreground_cells, GimModel};
use crate::pipeline::NetworkBundle;
use crate::sem::{cell_mapping, decode_scale, CELL};

/// What the tracker is told about the target in the first frame.
#[derive(Clone, Debug)]
pub enum InitTarget {
    Mask(Mask),
    Box(BoundingBox),
}

/// Fallbacks and notable events of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FrameFlags {
    /// No pixel reached the threshold; the box was moved to the filter peak.
    pub mask_empty: bool,
    /// The scale heads gave a non-positive size.
    pub sem_nonpositive: bool,
    /// The scale estimate was below the confidence threshold.
    pub sem_low_confidence: bool,
    /// The scale estimate changed the size by more than the allowed ratio.
    pub sem_out_of_range: bool,
    /// The box initialization fell back to the box interior as mask.
    pub proxy_empty: bool,
}

impl FrameFlags {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.mask_empty, "mask_empty"),
            (self.sem_nonpositive, "sem_nonpositive"),
            (self.sem_low_confidence, "sem_low_confidence"),
            (self.sem_out_of_range, "sem_out_of_range"),
            (self.proxy_empty, "proxy_empty"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub index: usize,
    /// Foreground probability in frame coordinates.
    pub mask: Mask,
    pub visible: BoundingBox,
    pub inherent: BoundingBox,
    /// Side of the square search region this frame was processed in.
    pub search_side: f64,
    pub flags: FrameFlags,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub inherent: BoundingBox,
    pub visible: BoundingBox,
    pub gim_model: GimModel,
    pub dcf: DcfFilter,
    /// Template descriptor for the scale heads.
    pub template: crate::nn::Tensor,
    pub last_mask: Mask,
    pub frame_index: usize,
    /// Search centre for the next frame.
    pub center: (f64, f64),
    /// Proxy-mask refinement passes run during a box initialization.
    pub proxy_iterations: usize,
}

pub struct Tracker {
    bundle: Arc<NetworkBundle>,
    cfg: TrackerConfig,
    ablation: Ablation,
    state: TrackerState,
}

impl Tracker {
    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    fn search_side(cfg: &TrackerConfig, inherent: &BoundingBox) -> f64 {
        cfg.search_factor * inherent.w.max(inherent.h).max(cfg.min_box_side)
    }

    pub fn initialize(
        bundle: Arc<NetworkBundle>,
        cfg: &TrackerConfig,
        ablation: Ablation,
        frame: &Image,
        target: &InitTarget,
    ) -> Result<(Self, FrameResult)> {
        let start = Instant::now();
        cfg.validate()?;
        let (fw, fh) = (frame.width(), frame.height());
        let given_mask = match target {
            InitTarget::Mask(m) => {
                if m.width() != fw || m.height() != fh {
                    return Err(Error::ShapeMismatch(format!(
                        "initial mask is {}x{}, frame is {fw}x{fh}",
                        m.width(),
                        m.height()
                    )));
                }
                if m.count_at_least(cfg.mask_threshold) == 0 {
                    return Err(Error::EmptyTarget);
                }
                m.clone()
            }
            InitTarget::Box(b) => {
                let inside = b.x < fw as f64 && b.y < fh as f64 && b.x + b.w > 0.0 && b.y + b.h > 0.0;
                let m = Mask::from_box(fw, fh, b, CoordSpace::Image);
                if !inside || m.count_at_least(0.5) == 0 {
                    return Err(Error::EmptyTarget);
                }
                m
            }
        };
        let visible = fit_axis_aligned_box(&given_mask, cfg.mask_threshold)?;
        let inherent = match target {
            InitTarget::Box(b) => b.with_role(BoxRole::Inherent),
            InitTarget::Mask(_) => visible.with_role(BoxRole::Inherent),
        };
        let visible = match target {
            InitTarget::Box(b) => b.with_role(BoxRole::Visible),
            InitTarget::Mask(_) => visible,
        };
        let center = inherent.center();
        let side = Self::search_side(cfg, &inherent);
        let res = bundle.config.patch_size;
        let (patch, mapping) = extract_region(frame, center, side, res)?;
        let x = images_to_tensor(&[&patch])?;
        let deepest = bundle.deepest_features(&x)?;
        let gim_feats = bundle.gim_features(&deepest);
        let grid = res / CELL;
        let model_from = |mask_img: &Mask| -> Result<GimModel> {
            let pm = extract_mask_region(mask_img, &mapping, res);
            let fg = foreground_cells(&pm, grid, 0.5);
            build_model(&gim_feats, &fg, &vec![true; grid * grid])
        };

        let mut dcf = DcfFilter::new(&bundle.gem, &bundle.store, cfg);
        let (cell_center, cell_size) = cell_target(&mapping, &inherent);
        dcf.train(&deepest, cell_center, cell_size, cfg.dcf_init_steps)?;

        let mut flags = FrameFlags::default();
        let mut proxy_iterations = 0;
        let (gim_model, mask) = match target {
            InitTarget::Mask(_) => (model_from(&given_mask)?, given_mask),
            InitTarget::Box(_) => {
                let box_model = model_from(&given_mask)?;
                proxy_iterations += 1;
                let out = bundle.forward(&x, &box_model, Some(&dcf), &ablation)?;
                let pm = Mask::new(res, res, out.mask.into_data(), CoordSpace::Patch)?;
                // The target lies inside the given box, so the proxy is clipped to it.
                let mapped = map_mask_to_frame(&pm, &mapping, fw, fh);
                let clipped = mapped.data().iter().zip(given_mask.data()).map(|(p, b)| p * b).collect();
                let proxy = Mask::new(fw, fh, clipped, CoordSpace::Image)?;
                if proxy.count_at_least(cfg.mask_threshold) == 0 {
                    flags.proxy_empty = true;
                    (box_model, given_mask)
                } else {
                    (model_from(&proxy)?, proxy)
                }
            }
        };
        let template = bundle.template_descriptor(&deepest);
        let state = TrackerState {
            inherent,
            visible,
            gim_model,
            dcf,
            template,
            last_mask: mask.clone(),
            frame_index: 0,
            center: visible.center(),
            proxy_iterations,
        };
        let result = FrameResult {
            index: 0,
            mask,
            visible,
            inherent,
            search_side: side,
            flags,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((Self { bundle, cfg: cfg.clone(), ablation, state }, result))
    }

    /// Processes the next frame. Failures inside the frame fall back to the
    /// previous state and are reported in the flags.
    pub fn step(&mut self, frame: &Image) -> Result<FrameResult> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let st = &mut self.state;
        let (fw, fh) = (frame.width(), frame.height());
        let side = Self::search_side(cfg, &st.inherent);
        debug!(
            "frame {}: search side {side:.2} from inherent {:.2}x{:.2}",
            st.frame_index + 1,
            st.inherent.w,
            st.inherent.h
        );
        let res = self.bundle.config.patch_size;
        let (patch, mapping) = extract_region(frame, st.center, side, res)?;
        let x = images_to_tensor(&[&patch])?;
        let dcf = (!self.ablation.no_gem).then_some(&st.dcf);
        let out = self.bundle.forward(&x, &st.gim_model, dcf, &self.ablation)?;
        let pm = Mask::new(res, res, out.mask.data().to_vec(), CoordSpace::Patch)?;
        let mask = map_mask_to_frame(&pm, &mapping, fw, fh);

        let mut flags = FrameFlags::default();
        let visible = match fit_axis_aligned_box(&mask, cfg.mask_threshold) {
            Ok(b) => clamp_size(b, cfg.min_box_side),
            Err(Error::NoForeground) => {
                flags.mask_empty = true;
                let (pr, pc) = out.peak;
                let (px, py) = mapping.to_frame((pc as f64 + 0.5) * CELL as f64, (pr as f64 + 0.5) * CELL as f64);
                st.visible.recentered(px, py)
            }
            Err(e) => return Err(e),
        };

        let inherent = if self.ablation.no_sem {
            visible.with_role(BoxRole::Inherent)
        } else {
            let (cls, region) = self.bundle.scale_maps(&st.template, &out.deepest, &out.mask, &self.ablation)?;
            let keep = st.inherent.recentered(visible.center().0, visible.center().1);
            match decode_scale(&cls, &region, &cell_mapping(&mapping)) {
                Ok(est) => {
                    let (rw, rh) = (est.width / st.inherent.w, est.height / st.inherent.h);
                    let lo = 1.0 / cfg.sem_max_ratio;
                    if est.confidence < cfg.sem_min_confidence as f64 {
                        flags.sem_low_confidence = true;
                        keep
                    } else if !(lo..=cfg.sem_max_ratio).contains(&rw) || !(lo..=cfg.sem_max_ratio).contains(&rh) {
                        flags.sem_out_of_range = true;
                        keep
                    } else {
                        clamp_size(est.to_box()?, cfg.min_box_side)
                    }
                }
                Err(Error::NonPositiveScale(..)) => {
                    flags.sem_nonpositive = true;
                    keep
                }
                Err(e) => return Err(e),
            }
        };

        if let (Some(reduced), false) = (out.reduced.as_ref(), flags.mask_empty) {
            let (c, s) = cell_target(&mapping, &inherent);
            st.dcf.update(reduced, c, s, cfg.dcf_update_steps)?;
        }

        st.frame_index += 1;
        st.visible = visible;
        st.inherent = inherent;
        st.center = visible.center();
        st.last_mask = mask.clone();
        Ok(FrameResult {
            index: st.frame_index,
            mask,
            visible,
            inherent,
            search_side: side,
            flags,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn clamp_size(b: BoundingBox, min_side: f64) -> BoundingBox {
    let (cx, cy) = b.center();
    BoundingBox { w: b.w.max(min_side), h: b.h.max(min_side), ..b }.recentered(cx, cy)
}

/// Centre `(row, col)` and size `(h, w)` of a frame box on the cell grid of
/// a patch.
fn cell_target(mapping: &CoordinateMapping, b: &BoundingBox) -> ((f64, f64), (f64, f64)) {
    let pb = mapping.box_to_patch(b);
    let (cx, cy) = pb.center();
    let cell = CELL as f64;
    ((cy / cell - 0.5, cx / cell - 0.5), (pb.h / cell, pb.w / cell))
}

/// Tracks a whole sequence; the first result is the initialization frame.
pub fn run_sequence(
    bundle: Arc<NetworkBundle>,
    cfg: &TrackerConfig,
    ablation: Ablation,
    frames: &[Image],
    init: &InitTarget,
) -> Result<Vec<FrameResult>> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames to track".into()))?;
    let (mut tracker, r0) = Tracker::initialize(bundle, cfg, ablation, first, init)?;
    let mut results = Vec::with_capacity(frames.len());
    results.push(r0);
    for f in &frames[1..] {
        results.push(tracker.step(f)?);
    }
    Ok(results)
}
