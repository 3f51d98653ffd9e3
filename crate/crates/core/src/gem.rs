//! Online correlation filter: feature reduction, PeLU response, peak
//! localization and the filter's own gradient-descent training.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::config::{NetConfig, TrackerConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvGeom, Graph, NodeId, ParamId, ParamStore, Tensor, Trainable};

/// Initial weights of the filter's feature reduction. Each tracker copies
/// them and fine-tunes its copy on the first frame.
#[derive(Clone, Copy, Debug)]
pub struct GemNets {
    pub reduce: Conv2d,
    channels: usize,
    kernel: usize,
}

impl GemNets {
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let reduce = Conv2d::new(
            store,
            "gem.reduce",
            cfg.backbone_widths[3],
            cfg.gem_channels,
            1,
            ConvGeom { stride: 1, pad: [0; 4] },
            rng,
        );
        Self { reduce, channels: cfg.gem_channels, kernel: cfg.dcf_kernel }
    }
}

/// Row-major argmax; ties go to the smallest row, then the smallest column.
pub fn localize(values: &[f32], cols: usize) -> (usize, usize) {
    assert!(!values.is_empty() && cols > 0);
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    (best / cols, best % cols)
}

/// Gaussian regression target on a `rows x cols` cell grid centred at
/// `center = (row, col)` (cell centres sit at integer coordinates).
pub fn gaussian_label(rows: usize, cols: usize, center: (f64, f64), sigma: (f64, f64)) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dy = (r as f64 - center.0) / sigma.0;
            let dx = (c as f64 - center.1) / sigma.1;
            data.push((-0.5 * (dx * dx + dy * dy)).exp() as f32);
        }
    }
    Tensor::new([1, 1, rows, cols], data)
}

/// Label width for a target of `size_cells = (height, width)` cells.
pub fn label_sigma(size_cells: (f64, f64), factor: f64) -> (f64, f64) {
    ((factor * size_cells.0).max(1e-3), (factor * size_cells.1).max(1e-3))
}

#[derive(Clone, Debug)]
struct Sample {
    feats: Tensor,
    label: Tensor,
}

/// A trained correlation filter with its own reduction layer and sample memory.
#[derive(Clone, Debug)]
pub struct DcfFilter {
    store: ParamStore,
    reduce: Conv2d,
    kernel: ParamId,
    pelu: ParamId,
    geom: ConvGeom,
    channels: usize,
    step: f32,
    weight_decay: f32,
    sigma_factor: f64,
    memory: usize,
    first: Option<Sample>,
    recent: VecDeque<Sample>,
    /// Loss before the last training call followed by the loss after each
    /// accepted step.
    pub trace: Vec<f32>,
    /// Accepted optimizer steps over the filter's lifetime.
    pub accepted_steps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Reduction, kernel and PeLU are trained on raw backbone features.
    Full,
    /// Only the kernel is trained, on stored reduced features.
    KernelOnly,
}

impl DcfFilter {
    /// Fresh filter with a zero kernel, identity-like PeLU (a = b = c = 1)
    /// and the reduction copied from `nets`.
    pub fn new(nets: &GemNets, bundle: &ParamStore, cfg: &TrackerConfig) -> Self {
        let mut store = ParamStore::new();
        let rw = store.add("reduce.weight", bundle.value(nets.reduce.w).clone());
        let rb = store.add("reduce.bias", bundle.value(nets.reduce.b).clone());
        let reduce = Conv2d { w: rw, b: rb, geom: nets.reduce.geom };
        let kernel = store.add_zeros("kernel", &[1, nets.channels, nets.kernel, nets.kernel]);
        let pelu = store.add("pelu", Tensor::new([3], vec![1.0, 1.0, 1.0]));
        Self {
            store,
            reduce,
            kernel,
            pelu,
            geom: ConvGeom::same(nets.kernel),
            channels: nets.channels,
            step: cfg.dcf_initial_step,
            weight_decay: cfg.dcf_weight_decay,
            sigma_factor: cfg.dcf_sigma_factor,
            memory: cfg.dcf_memory,
            first: None,
            recent: VecDeque::new(),
            trace: Vec::new(),
            accepted_steps: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> &Tensor {
        self.store.value(self.kernel)
    }

    pub fn pelu_params(&self) -> [f32; 3] {
        let d = self.store.value(self.pelu).data();
        [d[0], d[1], d[2]]
    }

    /// Replaces the kernel, e.g. to probe the correlation in isolation.
    pub fn set_kernel(&mut self, k: Tensor) -> Result<()> {
        if k.shape() != self.kernel().shape() {
            return Err(Error::ShapeMismatch(format!("kernel {:?}, expected {:?}", k.shape(), self.kernel().shape())));
        }
        *self.store.value_mut(self.kernel) = k;
        Ok(())
    }

    pub fn label_for(&self, rows: usize, cols: usize, center: (f64, f64), size_cells: (f64, f64)) -> Tensor {
        gaussian_label(rows, cols, center, label_sigma(size_cells, self.sigma_factor))
    }

    /// Applies the filter's reduction to raw backbone features `[1, C, h, w]`.
    pub fn reduce(&self, backbone: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let x = g.constant(backbone.clone());
        let y = self.reduce_node(&mut g, x);
        g.value(y).clone()
    }

    fn reduce_node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.reduce.forward(g, &self.store, x);
        g.relu(y)
    }

    fn response_node(&self, g: &mut Graph, reduced: NodeId) -> NodeId {
        let k = g.param(&self.store, self.kernel);
        let p = g.param(&self.store, self.pelu);
        let r = g.conv2d(reduced, k, None, self.geom);
        g.pelu(r, p)
    }

    /// PeLU of the cross-correlation of reduced features with the kernel,
    /// same spatial size as the input.
    pub fn correlate(&self, reduced: &Tensor) -> Result<Tensor> {
        if reduced.rank() != 4 || reduced.shape()[1] != self.channels {
            let got = if reduced.rank() == 4 { reduced.shape()[1] } else { 0 };
            return Err(Error::ChannelMismatch { expected: self.channels, got });
        }
        let mut g = Graph::inference();
        let x = g.constant(reduced.clone());
        let r = self.response_node(&mut g, x);
        Ok(g.value(r).clone())
    }

    fn loss(&self, g: &mut Graph, mode: Mode) -> NodeId {
        let mut terms = Vec::new();
        let mut samples: Vec<&Sample> = self.first.iter().collect();
        samples.extend(self.recent.iter());
        for s in &samples {
            let x = g.constant(s.feats.clone());
            let reduced = if mode == Mode::Full { self.reduce_node(g, x) } else { x };
            let r = self.response_node(g, reduced);
            let y = g.constant(s.label.clone());
            let d = g.sub(r, y);
            let d = g.sqr(d);
            terms.push(g.mean_all(d));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        let total = g.scale(total, 1.0 / terms.len() as f32);
        let k = g.param(&self.store, self.kernel);
        let k2 = g.sqr(k);
        let mut reg = g.sum_all(k2);
        if mode == Mode::Full {
            let w = g.param(&self.store, self.reduce.w);
            let w2 = g.sqr(w);
            let w2 = g.sum_all(w2);
            reg = g.add(reg, w2);
        }
        let reg = g.scale(reg, self.weight_decay);
        g.add(total, reg)
    }

    fn eval_loss(&self, mode: Mode) -> f32 {
        let mut g = Graph::inference();
        let l = self.loss(&mut g, mode);
        g.value(l).item()
    }

    /// Gradient descent with backtracking: a step is accepted only if it does
    /// not increase the loss, so the recorded trace is non-increasing.
    fn optimize(&mut self, mode: Mode, steps: usize) -> Result<()> {
        let trainable = match mode {
            Mode::Full => Trainable::All,
            Mode::KernelOnly => Trainable::Prefixes(vec!["kernel".into()]),
        };
        let mut current = self.eval_loss(mode);
        if !current.is_finite() {
            return Err(Error::NonFiniteLoss(format!("filter loss {current} before training")));
        }
        self.trace = vec![current];
        for _ in 0..steps {
            let mut g = Graph::new(trainable.clone());
            let l = self.loss(&mut g, mode);
            let grads = g.backward(l);
            let grads: Vec<(ParamId, Tensor)> = grads.params().map(|(id, t)| (id, t.clone())).collect();
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFiniteLoss("non-finite filter gradient".into()));
            }
            let saved: Vec<(ParamId, Tensor)> = grads.iter().map(|(id, _)| (*id, self.store.value(*id).clone())).collect();
            let mut accepted = false;
            for _ in 0..40 {
                for ((id, grad), (_, old)) in grads.iter().zip(&saved) {
                    let p = self.store.value_mut(*id);
                    for ((v, o), d) in p.data_mut().iter_mut().zip(old.data()).zip(grad.data()) {
                        *v = o - self.step * d;
                    }
                    if *id == self.pelu {
                        for v in p.data_mut() {
                            *v = v.max(0.05);
                        }
                    }
                }
                let trial = self.eval_loss(mode);
                if trial.is_finite() && trial <= current {
                    current = trial;
                    accepted = true;
                    self.step = (self.step * 2.0).min(1e4);
                    break;
                }
                self.step *= 0.5;
            }
            if accepted {
                self.trace.push(current);
                self.accepted_steps += 1;
            } else {
                for (id, old) in saved {
                    *self.store.value_mut(id) = old;
                }
                break;
            }
        }
        Ok(())
    }

    /// First-frame training of reduction, kernel and PeLU on raw backbone
    /// features, with the label centred at `center = (row, col)` in cells.
    pub fn train(&mut self, backbone: &Tensor, center: (f64, f64), size_cells: (f64, f64), steps: usize) -> Result<()> {
        let (_, _, h, w) = backbone.dims4();
        let label = self.label_for(h, w, center, size_cells);
        self.first = Some(Sample { feats: backbone.clone(), label });
        self.recent.clear();
        self.optimize(Mode::Full, steps)?;
        // From now on the reduction is fixed: keep the reduced first sample.
        let first = self.first.take().expect("set above");
        self.first = Some(Sample { feats: self.reduce(&first.feats), label: first.label });
        Ok(())
    }

    /// Online update on reduced features `[1, channels, h, w]`. The new
    /// sample joins the memory (the first frame is always kept) and the
    /// kernel takes `steps` descent steps.
    pub fn update(&mut self, reduced: &Tensor, center: (f64, f64), size_cells: (f64, f64), steps: usize) -> Result<()> {
        if reduced.shape()[1] != self.channels {
            return Err(Error::ChannelMismatch { expected: self.channels, got: reduced.shape()[1] });
        }
        let (_, _, h, w) = reduced.dims4();
        let label = self.label_for(h, w, center, size_cells);
        let sample = Sample { feats: reduced.clone(), label };
        let repeat = self.recent.back().is_some_and(|s| s.feats == sample.feats && s.label == sample.label);
        if !repeat {
            self.recent.push_back(sample);
            while self.recent.len() + usize::from(self.first.is_some()) > self.memory && !self.recent.is_empty() {
                self.recent.pop_front();
            }
        }
        if steps == 0 {
            self.trace = vec![self.eval_loss(Mode::KernelOnly)];
            return Ok(());
        }
        self.optimize(Mode::KernelOnly, steps)
    }
}
