//! Small convolutional encoder producing features at strides 4, 8 and 16.

use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::nn::{Conv2d, ConvGeom, Graph, NodeId, ParamStore, Tensor};

/// Feature maps at strides 4, 8 and 16 of the input patch.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub s4: NodeId,
    pub s8: NodeId,
    pub s16: NodeId,
    pub source_resolution: usize,
}

/// Four downsampling blocks: a stride-2 3x3 convolution, then (except in the
/// stem) a stride-1 3x3 convolution, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<(Conv2d, Option<Conv2d>)>,
    widths: [usize; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.backbone_widths.iter().enumerate() {
            let down = Conv2d::new(store, &format!("backbone.block{i}.down"), cin, w, 3, ConvGeom::strided(3, 2), rng);
            let conv = (i > 0).then(|| Conv2d::same(store, &format!("backbone.block{i}.conv"), w, w, 3, rng));
            blocks.push((down, conv));
            cin = w;
        }
        Self { blocks, widths: cfg.backbone_widths }
    }

    /// Channel counts at strides 4, 8 and 16.
    pub fn level_widths(&self) -> (usize, usize, usize) {
        (self.widths[1], self.widths[2], self.widths[3])
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<Pyramid> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::BadResolution(w, h));
        }
        let mut cur = g.add_scalar(x, -0.5);
        let mut levels = Vec::with_capacity(4);
        for (down, conv) in &self.blocks {
            let y = down.forward(g, store, cur);
            cur = g.relu(y);
            if let Some(conv) = conv {
                let y = conv.forward(g, store, cur);
                cur = g.relu(y);
            }
            levels.push(cur);
        }
        Ok(Pyramid { s4: levels[1], s8: levels[2], s16: levels[3], source_resolution: h })
    }
}

/// `[N, 3, H, W]` batch from same-sized RGB images.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if im.width() != w || im.height() != h || im.channels() != 3 {
            return Err(Error::ShapeMismatch("image batch must share size and have 3 channels".into()));
        }
        data.extend(im.to_planar());
    }
    Ok(Tensor::new([images.len(), 3, h, w], data))
}
