//! Foreground/background prototype matching: similarity channels F and B and
//! the posterior P.

use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::nn::{Conv2d, ConvGeom, Graph, Linear, NodeId, ParamStore, Tensor};

/// Added to feature norms before dividing, so zero vectors give similarity 0.
pub const NORM_EPS: f32 = 1e-8;

/// Value used to pad the sorted similarity list when there are fewer
/// prototypes than decoder inputs.
pub const SIMILARITY_PAD: f32 = -1.0;

/// Two-layer perceptron mapping sorted similarities to one score.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityDecoder {
    hidden: Linear,
    out: Linear,
    inputs: usize,
}

impl SimilarityDecoder {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), inputs, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 1, rng),
            inputs,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// `[M, inputs] -> [M, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.hidden.forward(g, store, x);
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct GimNets {
    reduce: Conv2d,
    refine: Conv2d,
    pub fg_decoder: SimilarityDecoder,
    pub bg_decoder: SimilarityDecoder,
    top_n: usize,
}

/// Similarity outputs for one image, each `[1, C, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct GimChannels {
    pub f: NodeId,
    pub b: NodeId,
    /// Softmax of `(F, B)`: channel 0 is the foreground posterior.
    pub p: NodeId,
}

impl GimNets {
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let cin = cfg.backbone_widths[3];
        let c = cfg.gim_channels;
        Self {
            reduce: Conv2d::new(store, "gim.reduce", cin, c, 1, ConvGeom { stride: 1, pad: [0; 4] }, rng),
            refine: Conv2d::same(store, "gim.refine", c, c, 3, rng),
            fg_decoder: SimilarityDecoder::new(store, "gim.fg_decoder", cfg.top_n, cfg.mlp_hidden, rng),
            bg_decoder: SimilarityDecoder::new(store, "gim.bg_decoder", cfg.top_n, cfg.mlp_hidden, rng),
            top_n: cfg.top_n,
        }
    }

    /// Segmentation features: 1x1 conv + ReLU, then 3x3 conv + ReLU.
    pub fn reduce_features(&self, g: &mut Graph, store: &ParamStore, deepest: NodeId) -> NodeId {
        let y = self.reduce.forward(g, store, deepest);
        let y = g.relu(y);
        let y = self.refine.forward(g, store, y);
        g.relu(y)
    }

    /// F, B and P for a single image `feats: [1, C, h, w]` against prototype
    /// rows `[P, C]`.
    pub fn channels(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: NodeId,
        fg_protos: NodeId,
        bg_protos: NodeId,
    ) -> GimChannels {
        let f = similarity_channel(g, store, feats, fg_protos, &self.fg_decoder, self.top_n);
        let b = similarity_channel(g, store, feats, bg_protos, &self.bg_decoder, self.top_n);
        let fb = g.concat_channels(&[f, b]);
        let p = g.softmax_channels(fb);
        GimChannels { f, b, p }
    }
}

/// Raw normalized dot products `[h*w, P]` between every pixel feature of
/// `feats: [1, C, h, w]` and every prototype row.
pub fn raw_similarities(g: &mut Graph, feats: NodeId, protos: NodeId) -> NodeId {
    let rows = g.nchw_to_rows(feats);
    let y = g.l2_normalize_rows(rows, NORM_EPS);
    let x = g.l2_normalize_rows(protos, NORM_EPS);
    g.matmul(y, x, true)
}

/// Decoded similarity map `[1, 1, h, w]`: per pixel, similarities to all
/// prototypes sorted in descending order, the best `n` (padded with -1) fed to
/// the decoder.
pub fn similarity_channel(
    g: &mut Graph,
    store: &ParamStore,
    feats: NodeId,
    protos: NodeId,
    decoder: &SimilarityDecoder,
    n: usize,
) -> NodeId {
    let (_, _, h, w) = g.value(feats).dims4();
    let s = raw_similarities(g, feats, protos);
    debug_assert!(g.value(s).data().iter().all(|v| (-1.0 - 1e-5..=1.0 + 1e-5).contains(v)));
    let top = g.topk_desc(s, n, SIMILARITY_PAD);
    let out = decoder.forward(g, store, top);
    g.rows_to_nchw(out, 1, h, w)
}

/// Per-pixel `softmax(F, B)` as `[1, 2, h, w]` (foreground first).
pub fn posterior(f: &Tensor, b: &Tensor) -> Result<Tensor> {
    if f.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("F {:?} vs B {:?}", f.shape(), b.shape())));
    }
    let mut g = Graph::inference();
    let (f, b) = (g.constant(f.clone()), g.constant(b.clone()));
    let fb = g.concat_channels(&[f, b]);
    let p = g.softmax_channels(fb);
    Ok(g.value(p).clone())
}

/// Prototype sets captured from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GimModel {
    /// `[N_F, C]` foreground feature vectors.
    pub fg: Tensor,
    /// `[N_B, C]` background feature vectors.
    pub bg: Tensor,
}

impl GimModel {
    pub fn fg_count(&self) -> usize {
        self.fg.shape()[0]
    }

    pub fn bg_count(&self) -> usize {
        self.bg.shape()[0]
    }
}

/// Collects prototypes from `feats: [1, C, h, w]`. Foreground comes from the
/// `fg` cells; background from `neighborhood` cells that are not foreground,
/// falling back to every non-foreground cell if that is empty.
pub fn build_model(feats: &Tensor, fg: &[bool], neighborhood: &[bool]) -> Result<GimModel> {
    let (n, c, h, w) = feats.dims4();
    if n != 1 || fg.len() != h * w || neighborhood.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} with {} / {} cell flags",
            feats.shape(),
            fg.len(),
            neighborhood.len()
        )));
    }
    let (fg_idx, bg_idx) = prototype_cells(fg, neighborhood)?;
    let gather = |idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            for ch in 0..c {
                data.push(feats.plane(0, ch)[i]);
            }
        }
        Tensor::new([idx.len(), c], data)
    };
    Ok(GimModel { fg: gather(&fg_idx), bg: gather(&bg_idx) })
}

/// Cell indices used for the foreground and background prototype sets.
pub fn prototype_cells(fg: &[bool], neighborhood: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    let fg_idx: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    if fg_idx.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut bg_idx: Vec<usize> = (0..fg.len()).filter(|&i| neighborhood[i] && !fg[i]).collect();
    if bg_idx.is_empty() {
        bg_idx = (0..fg.len()).filter(|&i| !fg[i]).collect();
    }
    if bg_idx.is_empty() {
        return Err(Error::EmptyBackground);
    }
    Ok((fg_idx, bg_idx))
}

/// Marks stride-`cell` grid cells whose mean mask coverage reaches
/// `threshold`. If none does but the mask is not empty, the best covered
/// cell is used so small targets still yield a prototype.
pub fn foreground_cells(mask: &Mask, grid: usize, threshold: f32) -> Vec<bool> {
    let cov = cell_coverage(mask, grid);
    let mut out: Vec<bool> = cov.iter().map(|&v| v >= threshold).collect();
    if !out.iter().any(|&b| b) {
        let (best, &v) = cov
            .iter()
            .enumerate()
            .fold((0, &0.0f32), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if v > 0.0 {
            out[best] = true;
        }
    }
    out
}

/// Mean mask value over each cell of a `grid x grid` partition.
pub fn cell_coverage(mask: &Mask, grid: usize) -> Vec<f32> {
    let (w, h) = (mask.width(), mask.height());
    let mut sums = vec![0.0f64; grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for r in 0..h {
        let gr = (r * grid / h).min(grid - 1);
        for c in 0..w {
            let gc = (c * grid / w).min(grid - 1);
            sums[gr * grid + gc] += mask.get(c, r) as f64;
            counts[gr * grid + gc] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 }).collect()
}
