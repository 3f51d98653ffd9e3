//! All networks of the tracker in one bundle, the single-shot per-frame
//! forward pass and the ablation stand-ins.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Pyramid};
use crate::config::{Ablation, NetConfig};
use crate::error::{Error, Result};
use crate::gem::{localize, DcfFilter, GemNets};
use crate::geometry::euclidean_location_channel;
use crate::gim::{GimModel, GimNets};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};
use crate::refine::RefineNet;
use crate::sem::SemNets;

const FORMAT: &str = "segtrack-weights-1";

/// Weights and architecture of every network plus call counters.
#[derive(Debug)]
pub struct NetworkBundle {
    pub config: NetConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub gim: GimNets,
    pub gem: GemNets,
    pub refine: RefineNet,
    pub sem: SemNets,
    encode_calls: AtomicUsize,
    refine_calls: AtomicUsize,
}

impl Clone for NetworkBundle {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            backbone: self.backbone.clone(),
            gim: self.gim.clone(),
            gem: self.gem,
            refine: self.refine.clone(),
            sem: self.sem.clone(),
            encode_calls: AtomicUsize::new(0),
            refine_calls: AtomicUsize::new(0),
        }
    }
}

/// Everything one forward pass produces. Maps are `[1, 1, h, w]` at stride
/// 16 unless noted.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Foreground probability `[1, 1, H, W]` at patch resolution.
    pub mask: Tensor,
    pub l: Tensor,
    pub f: Tensor,
    pub p: Tensor,
    /// Correlation filter response, absent when the filter is disabled.
    pub response: Option<Tensor>,
    /// Cell the location channel is centred on.
    pub peak: (usize, usize),
    /// Deepest backbone features `[1, C, h, w]`.
    pub deepest: Tensor,
    /// Filter-reduced features, absent when the filter is disabled.
    pub reduced: Option<Tensor>,
}

impl NetworkBundle {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, &mut rng);
        let gim = GimNets::new(&mut store, config, &mut rng);
        let gem = GemNets::new(&mut store, config, &mut rng);
        let refine = RefineNet::new(&mut store, config, &mut rng);
        let sem = SemNets::new(&mut store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            gim,
            gem,
            refine,
            sem,
            encode_calls: AtomicUsize::new(0),
            refine_calls: AtomicUsize::new(0),
        })
    }

    /// Writes all weights, extra tensors (e.g. optimizer state) and metadata.
    pub fn save(&self, path: &Path, extra: &[(String, Tensor)], mut metadata: HashMap<String, String>) -> Result<()> {
        metadata.insert("format".into(), FORMAT.into());
        metadata.insert("network".into(), serde_json::to_string(&self.config).expect("config serializes"));
        self.store.save(path, extra, metadata)
    }

    /// Reads a weights file written by [`save`](Self::save). Returns the
    /// bundle, tensors that are not network weights, and the metadata.
    pub fn load(path: &Path) -> Result<(Self, std::collections::BTreeMap<String, Tensor>, HashMap<String, String>)> {
        let meta = ParamStore::read_metadata(path)?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Model(format!("{} is not a segtrack weights file", path.display())));
        }
        let config: NetConfig = serde_json::from_str(meta.get("network").map(String::as_str).unwrap_or(""))
            .map_err(|e| Error::Model(format!("bad network config in {}: {e}", path.display())))?;
        let mut bundle = Self::new(&config, 0)?;
        let (rest, meta) = bundle.store.load(path)?;
        Ok((bundle, rest, meta))
    }

    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn refine_calls(&self) -> usize {
        self.refine_calls.load(Ordering::Relaxed)
    }

    /// Backbone pass on `x: [N, 3, H, W]`.
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<Pyramid> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        self.backbone.encode(g, &self.store, x)
    }

    /// Deepest features of one patch, outside any training graph.
    pub fn deepest_features(&self, patch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(patch.clone());
        let pyr = self.encode(&mut g, x)?;
        Ok(g.value(pyr.s16).clone())
    }

    /// GIM segmentation features for `deepest: [1, C, h, w]`.
    pub fn gim_features(&self, deepest: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let x = g.constant(deepest.clone());
        let y = self.gim.reduce_features(&mut g, &self.store, x);
        g.value(y).clone()
    }

    /// Location channel centred on the middle cell, used when the filter is off.
    pub fn centre_prior(rows: usize, cols: usize) -> Tensor {
        let lc = euclidean_location_channel((rows / 2, cols / 2), rows, cols).expect("centre is on the grid");
        Tensor::new([1, 1, rows, cols], lc.values)
    }

    /// Refine the foreground probability in a graph, given already computed
    /// L, F and P nodes. Counts as the frame's refine call.
    pub fn refine_nodes(
        &self,
        g: &mut Graph,
        lfp: (NodeId, NodeId, NodeId),
        pyramid: &Pyramid,
        ablation: &Ablation,
    ) -> Result<NodeId> {
        self.refine_calls.fetch_add(1, Ordering::Relaxed);
        self.refine.logits(g, &self.store, lfp, pyramid, !ablation.no_attention)
    }

    /// Single-shot segmentation of one patch `[1, 3, H, W]`: one backbone
    /// pass, GIM channels, filter localization and one refinement pass.
    pub fn forward(
        &self,
        patch: &Tensor,
        model: &GimModel,
        dcf: Option<&DcfFilter>,
        ablation: &Ablation,
    ) -> Result<FrameOutput> {
        let mut g = Graph::inference();
        let x = g.constant(patch.clone());
        let pyr = self.encode(&mut g, x)?;
        let deepest = g.value(pyr.s16).clone();
        let (_, _, rows, cols) = deepest.dims4();

        let (f, p) = if ablation.no_gim {
            let half = g.constant(Tensor::full([1, 1, rows, cols], 0.5));
            (half, half)
        } else {
            let feats = self.gim.reduce_features(&mut g, &self.store, pyr.s16);
            let fg = g.constant(model.fg.clone());
            let bg = g.constant(model.bg.clone());
            let ch = self.gim.channels(&mut g, &self.store, feats, fg, bg);
            (ch.f, g.slice_channels(ch.p, 0, 1))
        };

        let (l, response, peak, reduced) = match dcf {
            Some(filter) if !ablation.no_gem => {
                let reduced = filter.reduce(&deepest);
                let response = filter.correlate(&reduced)?;
                let peak = localize(response.data(), cols);
                let lc = euclidean_location_channel(peak, rows, cols)?;
                (Tensor::new([1, 1, rows, cols], lc.values), Some(response), peak, Some(reduced))
            }
            _ => (Self::centre_prior(rows, cols), None, (rows / 2, cols / 2), None),
        };
        let ln = g.constant(l.clone());

        let logits = self.refine_nodes(&mut g, (ln, f, p), &pyr, ablation)?;
        let probs = g.softmax_channels(logits);
        let mask = g.slice_channels(probs, 0, 1);
        Ok(FrameOutput {
            mask: g.value(mask).clone(),
            l,
            f: g.value(f).clone(),
            p: g.value(p).clone(),
            response,
            peak,
            deepest,
            reduced,
        })
    }

    /// Template descriptor `[1, C]` from the first frame's deepest features.
    pub fn template_descriptor(&self, template: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let t = g.constant(template.clone());
        let d = self.sem.template_descriptor(&mut g, &self.store, t);
        g.value(d).clone()
    }

    /// Mask features for the scale heads, honouring the mask ablations.
    pub fn sem_mask_features(&self, g: &mut Graph, mask: NodeId, ablation: &Ablation) -> NodeId {
        if ablation.no_mask_in_sem {
            let (n, _, h, w) = g.value(mask).dims4();
            let c = self.sem.mask_channels();
            g.constant(Tensor::zeros([n, c, h / crate::sem::CELL, w / crate::sem::CELL]))
        } else if ablation.no_mam {
            self.sem.downsample_mask(g, mask)
        } else {
            self.sem.adjust_mask(g, &self.store, mask)
        }
    }

    /// Class and region maps for one frame.
    pub fn scale_maps(
        &self,
        template: &Tensor,
        deepest: &Tensor,
        mask: &Tensor,
        ablation: &Ablation,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let t = g.constant(template.clone());
        let s = g.constant(deepest.clone());
        let m = g.constant(mask.clone());
        let mf = self.sem_mask_features(&mut g, m, ablation);
        let out = self.sem.predict(&mut g, &self.store, t, s, mf)?;
        Ok((g.value(out.cls).clone(), g.value(out.region).clone()))
    }
}

/// One variant's scores on a benchmark. Overlaps are per-frame mask
/// Jaccard; accuracy and robustness are averaged over sequences.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub robustness: f64,
    pub jaccard: f64,
    pub failures: usize,
}

impl AblationRow {
    pub fn score(&self) -> f64 {
        self.accuracy * self.robustness
    }
}

/// The full pipeline followed by every single-flag variant.
pub fn standard_variants() -> Vec<(String, Ablation)> {
    let mut v = vec![("full".to_string(), Ablation::default())];
    for name in Ablation::NAMES {
        v.push((name.to_string(), Ablation::parse(name).expect("known flag")));
    }
    v
}

/// Tracks every sequence with every variant, initialized from the first
/// ground-truth mask, and scores frames after the first.
pub fn ablation_report(
    bundle: std::sync::Arc<NetworkBundle>,
    tracker: &crate::config::TrackerConfig,
    variants: &[(String, Ablation)],
    sequences: &[crate::synth::SyntheticSequence],
) -> Result<Vec<AblationRow>> {
    use crate::eval::{accuracy_robustness, mask_overlaps};
    use crate::tracker::{run_sequence, InitTarget};
    let mut rows = Vec::with_capacity(variants.len());
    for (name, ablation) in variants {
        let (mut a, mut r, mut j, mut failures) = (0.0, 0.0, 0.0, 0);
        for seq in sequences {
            let init = InitTarget::Mask(seq.masks[0].clone());
            let results = run_sequence(bundle.clone(), tracker, *ablation, &seq.frames, &init)?;
            let masks: Vec<_> = results.into_iter().skip(1).map(|f| f.mask).collect();
            let overlaps = mask_overlaps(&masks, &seq.masks[1..])?;
            let ar = accuracy_robustness(&overlaps);
            a += ar.accuracy;
            r += ar.robustness;
            j += overlaps.iter().sum::<f64>() / overlaps.len().max(1) as f64;
            failures += ar.failures.len();
        }
        let n = sequences.len().max(1) as f64;
        rows.push(AblationRow { variant: name.clone(), accuracy: a / n, robustness: r / n, jaccard: j / n, failures });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrackerConfig;
    use crate::gim::build_model;

    fn small() -> NetConfig {
        NetConfig {
            patch_size: 64,
            backbone_widths: [4, 8, 8, 16],
            gim_channels: 8,
            gem_channels: 8,
            fuse_channels: 8,
            refine_widths: [8, 4],
            sem_reduce_channels: 8,
            sem_head_width: 8,
            mam_width: 8,
            ..NetConfig::default()
        }
    }

    fn patch(side: usize) -> Tensor {
        Tensor::new([1, 3, side, side], (0..3 * side * side).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect())
    }

    fn model_for(bundle: &NetworkBundle, x: &Tensor) -> GimModel {
        let feats = bundle.gim_features(&bundle.deepest_features(x).unwrap());
        let (_, _, h, w) = feats.dims4();
        let mut fg = vec![false; h * w];
        fg[(h / 2) * w + w / 2] = true;
        build_model(&feats, &fg, &vec![true; h * w]).unwrap()
    }

    #[test]
    fn shapes_on_a_128_patch() {
        let bundle = NetworkBundle::new(&NetConfig::default(), 1).unwrap();
        let x = patch(128);
        let model = model_for(&bundle, &x);
        let mut dcf = DcfFilter::new(&bundle.gem, &bundle.store, &TrackerConfig::default());
        dcf.train(&bundle.deepest_features(&x).unwrap(), (3.5, 3.5), (2.0, 2.0), 2).unwrap();
        let out = bundle.forward(&x, &model, Some(&dcf), &Ablation::default()).unwrap();
        assert_eq!(out.mask.shape(), &[1, 1, 128, 128]);
        for t in [&out.l, &out.f, &out.p] {
            assert_eq!(t.shape(), &[1, 1, 8, 8]);
        }
        assert_eq!(out.response.as_ref().unwrap().shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn one_encode_and_one_refine_per_frame() {
        let bundle = NetworkBundle::new(&small(), 2).unwrap();
        let x = patch(64);
        let model = model_for(&bundle, &x);
        let (e0, r0) = (bundle.encode_calls(), bundle.refine_calls());
        for i in 1..=3 {
            bundle.forward(&x, &model, None, &Ablation::default()).unwrap();
            assert_eq!(bundle.encode_calls() - e0, i);
            assert_eq!(bundle.refine_calls() - r0, i);
        }
    }

    #[test]
    fn stand_ins_replace_the_disabled_channels() {
        let bundle = NetworkBundle::new(&small(), 3).unwrap();
        let x = patch(64);
        let model = model_for(&bundle, &x);
        let no_gim = Ablation::parse("no_gim").unwrap();
        let out = bundle.forward(&x, &model, None, &no_gim).unwrap();
        assert!(out.f.data().iter().chain(out.p.data()).all(|&v| v == 0.5));
        let out = bundle.forward(&x, &model, None, &Ablation::parse("no_gem").unwrap()).unwrap();
        assert_eq!(out.peak, (2, 2));
        assert_eq!(out.l, NetworkBundle::centre_prior(4, 4));
        assert!(out.response.is_none());
        for flags in Ablation::NAMES {
            let a = Ablation::parse(flags).unwrap();
            let out = bundle.forward(&x, &model, None, &a).unwrap();
            let t = bundle.template_descriptor(&out.deepest);
            let (cls, region) = bundle.scale_maps(&t, &out.deepest, &out.mask, &a).unwrap();
            assert_eq!(cls.shape(), &[1, 2, 4, 4]);
            assert_eq!(region.shape(), &[1, 4, 4, 4]);
        }
    }

    #[test]
    fn forward_equals_the_modules_called_by_hand() {
        let bundle = NetworkBundle::new(&small(), 4).unwrap();
        let x = patch(64);
        let model = model_for(&bundle, &x);
        let mut dcf = DcfFilter::new(&bundle.gem, &bundle.store, &TrackerConfig::default());
        let deepest = bundle.deepest_features(&x).unwrap();
        dcf.train(&deepest, (1.5, 2.5), (1.0, 1.0), 5).unwrap();
        let out = bundle.forward(&x, &model, Some(&dcf), &Ablation::default()).unwrap();

        let store = &bundle.store;
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let pyr = bundle.backbone.encode(&mut g, store, xn).unwrap();
        let feats = bundle.gim.reduce_features(&mut g, store, pyr.s16);
        let fg = g.constant(model.fg.clone());
        let bg = g.constant(model.bg.clone());
        let ch = bundle.gim.channels(&mut g, store, feats, fg, bg);
        let p = g.slice_channels(ch.p, 0, 1);
        let response = dcf.correlate(&dcf.reduce(g.value(pyr.s16))).unwrap();
        let peak = localize(response.data(), 4);
        let l = euclidean_location_channel(peak, 4, 4).unwrap();
        let l = g.constant(Tensor::new([1, 1, 4, 4], l.values));
        let probs = bundle.refine.segment(&mut g, store, (l, ch.f, p), &pyr, true).unwrap();
        let mask = g.slice_channels(probs, 0, 1);
        assert_eq!(g.value(mask), &out.mask);
        assert_eq!(g.value(ch.f), &out.f);
    }

    #[test]
    fn ablation_report_covers_every_variant() {
        let bundle = std::sync::Arc::new(NetworkBundle::new(&small(), 6).unwrap());
        let seq = crate::synth::generate_sequence(&crate::synth::SynthParams { length: 3, ..Default::default() }, 0);
        let tracker = TrackerConfig { dcf_init_steps: 2, ..TrackerConfig::default() };
        let variants = standard_variants();
        let rows = ablation_report(bundle.clone(), &tracker, &variants, std::slice::from_ref(&seq)).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].variant, "full");
        for row in &rows {
            assert!((0.0..=1.0).contains(&row.jaccard) && (0.0..=1.0).contains(&row.score()));
        }
        let again = ablation_report(bundle, &tracker, &variants, std::slice::from_ref(&seq)).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn weights_round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let bundle = NetworkBundle::new(&small(), 5).unwrap();
        bundle.save(&path, &[], HashMap::new()).unwrap();
        let (loaded, rest, meta) = NetworkBundle::load(&path).unwrap();
        assert!(rest.is_empty());
        assert_eq!(meta.get("format").unwrap(), FORMAT);
        assert_eq!(loaded.config, bundle.config);
        for id in bundle.store.ids() {
            assert_eq!(bundle.store.value(id), loaded.store.value(id));
        }
    }
}
