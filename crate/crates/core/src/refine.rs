//! Refinement decoder: fuses the location, similarity and posterior channels
//! and upsamples them to a full-resolution two-class probability map.

use rand_chacha::ChaCha8Rng;

use crate::backbone::Pyramid;
use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvGeom, Graph, Linear, NodeId, ParamStore, Tensor};

/// Initial gate bias; sigmoid(3) is about 0.95 so attention starts close to
/// the identity.
pub const GATE_BIAS: f32 = 3.0;

/// Channel re-weighting by a sigmoid of an affine map of the pooled values.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub gate: Linear,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let gate = Linear::new(store, name, channels, channels, rng);
        store.value_mut(gate.w).data_mut().fill(0.0);
        store.value_mut(gate.b).data_mut().fill(GATE_BIAS);
        Self { gate }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let pooled = g.mean_spatial(x);
        let z = self.gate.forward(g, store, pooled);
        let s = g.sigmoid(z);
        g.scale_channels(x, s)
    }
}

#[derive(Clone, Debug)]
pub struct UpStage {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
    pub attention: ChannelAttention,
}

#[derive(Clone, Debug)]
pub struct RefineNet {
    pub fuse: Conv2d,
    pub stages: [UpStage; 2],
    pub head: Conv2d,
}

impl RefineNet {
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let fuse = Conv2d::same(store, "refine.fuse", 3, cfg.fuse_channels, 3, rng);
        // Skip sources: stride 8 for the first stage, stride 4 for the second.
        let skips = [cfg.backbone_widths[2], cfg.backbone_widths[1]];
        let mut cin = cfg.fuse_channels;
        let stages = [0, 1].map(|i| {
            let w = cfg.refine_widths[i];
            let name = format!("refine.stage{i}");
            let stage = UpStage {
                conv1: Conv2d::same(store, &format!("{name}.conv1"), cin, w, 3, rng),
                conv2: Conv2d::same(store, &format!("{name}.conv2"), w, w, 3, rng),
                skip: Conv2d::new(store, &format!("{name}.skip"), skips[i], w, 1, ConvGeom { stride: 1, pad: [0; 4] }, rng),
                attention: ChannelAttention::new(store, &format!("{name}.attention"), w, rng),
            };
            cin = w;
            stage
        });
        let head = Conv2d::same(store, "refine.head", cfg.refine_widths[1], 2, 3, rng);
        Self { fuse, stages, head }
    }

    /// Concatenates L, F, P (in that order) and applies the fuse block.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, l: NodeId, f: NodeId, p: NodeId) -> Result<NodeId> {
        let s = g.shape(l).to_vec();
        for other in [f, p] {
            if g.shape(other) != s.as_slice() {
                return Err(Error::ShapeMismatch(format!("fuse inputs {:?} vs {:?}", s, g.shape(other))));
            }
        }
        let x = g.concat_channels(&[l, f, p]);
        let y = self.fuse.forward(g, store, x);
        Ok(g.relu(y))
    }

    /// Doubles `x`, applies two convolutions and adds the adjusted skip
    /// features, re-weighted by channel attention when `attention` is set.
    pub fn upscale_stage(
        &self,
        stage: usize,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        skip: NodeId,
        attention: bool,
    ) -> Result<NodeId> {
        let st = &self.stages[stage];
        let (n, _, h, w) = g.value(x).dims4();
        let (sn, _, sh, sw) = g.value(skip).dims4();
        if sn != n || sh != 2 * h || sw != 2 * w {
            return Err(Error::ShapeMismatch(format!("skip {sh}x{sw} for input {h}x{w}")));
        }
        let up = g.upsample_nearest2x(x);
        let y = st.conv1.forward(g, store, up);
        let y = g.relu(y);
        let y = st.conv2.forward(g, store, y);
        let y = g.relu(y);
        let adj = st.skip.forward(g, store, skip);
        let adj = g.relu(adj);
        let adj = if attention { st.attention.forward(g, store, adj) } else { adj };
        Ok(g.add(y, adj))
    }

    /// Two-class logits at the source resolution of `pyramid`; channel 0 is
    /// foreground.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lfp: (NodeId, NodeId, NodeId),
        pyramid: &Pyramid,
        attention: bool,
    ) -> Result<NodeId> {
        let x = self.fuse(g, store, lfp.0, lfp.1, lfp.2)?;
        let x = self.upscale_stage(0, g, store, x, pyramid.s8, attention)?;
        let x = self.upscale_stage(1, g, store, x, pyramid.s4, attention)?;
        let x = g.upsample_nearest2x(x);
        let x = self.head.forward(g, store, x);
        let (_, _, h, w) = g.value(x).dims4();
        let full = pyramid.source_resolution;
        Ok(if h == full && w == full { x } else { g.resize_bilinear(x, full, full) })
    }

    /// Per-pixel `{fg, bg}` probabilities at patch resolution.
    pub fn segment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lfp: (NodeId, NodeId, NodeId),
        pyramid: &Pyramid,
        attention: bool,
    ) -> Result<NodeId> {
        let z = self.logits(g, store, lfp, pyramid, attention)?;
        Ok(g.softmax_channels(z))
    }
}

/// Mean per-pixel cross-entropy between two-class logits `[N, 2, H, W]`
/// and a foreground target `[N, 1, H, W]` with values in [0, 1].
pub fn cross_entropy(g: &mut Graph, logits: NodeId, target: &Tensor) -> NodeId {
    let (n, _, h, w) = target.dims4();
    let plane = h * w;
    let mut both = Vec::with_capacity(n * 2 * plane);
    for i in 0..n {
        let fg = &target.data()[i * plane..(i + 1) * plane];
        both.extend_from_slice(fg);
        both.extend(fg.iter().map(|v| 1.0 - v));
    }
    let t = g.constant(Tensor::new([n, 2, h, w], both));
    let lp = g.log_softmax_channels(logits);
    let prod = g.mul(lp, t);
    let mean = g.mean_all(prod);
    g.scale(mean, -2.0)
}
