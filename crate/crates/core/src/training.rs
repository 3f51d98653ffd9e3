//! Supervised training on synthetic sequences: segmentation (backbone, GIM
//! and refinement) first, then the scale heads on frozen features.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::images_to_tensor;
use crate::config::{TrackerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    euclidean_location_channel, extract_mask_region, extract_region, BoundingBox, BoxRole, Image,
};
use crate::gim::{build_model, foreground_cells, GimModel};
use crate::nn::{Adam, Graph, NodeId, Tensor, Trainable};
use crate::pipeline::NetworkBundle;
use crate::refine::cross_entropy;
use crate::sem::{sem_loss, SemTargets, CELL};
use crate::synth::{generate_sequence, SynthParams, SyntheticSequence};

/// Which of the two training stages a record or checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmentation,
    Scale,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Segmentation => "segmentation",
            Stage::Scale => "scale",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Segmentation => 0x5e6_0001,
            Stage::Scale => 0x5ca_1e02,
        }
    }

    fn trainable(self) -> Trainable {
        match self {
            Stage::Segmentation => Trainable::Prefixes(vec!["backbone.".into(), "gim.".into(), "refine.".into()]),
            Stage::Scale => Trainable::Prefixes(vec!["sem.".into()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub loss: f32,
    pub lr: f32,
    pub stage: Stage,
}

/// Training sequences: sequence `k` uses seed `seed + k`; every second one
/// has an occlusion in its middle third.
pub fn training_sequences(cfg: &TrainConfig, seed: u64) -> Vec<SyntheticSequence> {
    (0..cfg.sequences)
        .map(|k| {
            let len = cfg.sequence_length;
            let params = SynthParams {
                frame_size: cfg.frame_size,
                length: len,
                occlusion: (k % 2 == 1 && len >= 6).then_some((len / 3, 2 * len / 3)),
                ..SynthParams::default()
            };
            generate_sequence(&params, seed.wrapping_add(k as u64))
        })
        .collect()
}

/// Two distinct frame indices at most `max_gap` apart, `(reference, train)`.
/// Every admissible ordered pair is equally likely.
pub fn sample_pair(len: usize, max_gap: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len < 2 || max_gap == 0 {
        return Err(Error::InvalidArgument(format!("cannot draw a pair from {len} frames with gap {max_gap}")));
    }
    loop {
        let i = rng.gen_range(0..len);
        let lo = i.saturating_sub(max_gap);
        let hi = (i + max_gap).min(len - 1);
        let j = rng.gen_range(lo..hi);
        let j = if j >= i { j + 1 } else { j };
        // Rejection keeps ordered pairs uniform despite truncation at the ends.
        let span = hi - lo;
        if rng.gen_range(0..2 * max_gap) < span {
            return Ok((i, j));
        }
    }
}

/// Shifts each coordinate by an independent `U[-fraction·sigma, fraction·sigma]`.
pub fn perturb_location(center: (f64, f64), sigma: f64, fraction: f64, rng: &mut impl Rng) -> (f64, f64) {
    let r = fraction * sigma.max(0.0);
    if r == 0.0 {
        return center;
    }
    (center.0 + rng.gen_range(-r..=r), center.1 + rng.gen_range(-r..=r))
}

/// One training pair cut out of a sequence, in patch coordinates.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub reference: Image,
    /// Visible target in the reference patch, values in [0, 1].
    pub reference_mask: Tensor,
    pub train: Image,
    pub train_mask: Tensor,
    /// Whole-target box in train-patch cells.
    pub train_box_cells: BoundingBox,
    /// Cell the location channel is centred on.
    pub location_cell: (usize, usize),
}

fn crop(
    frame: &Image,
    mask: &crate::geometry::Mask,
    center: (f64, f64),
    side: f64,
    res: usize,
) -> Result<(Image, Tensor, crate::geometry::CoordinateMapping)> {
    let (patch, mapping) = extract_region(frame, center, side, res)?;
    let m = extract_mask_region(mask, &mapping, res);
    Ok((patch, Tensor::new([1, 1, res, res], m.data().to_vec()), mapping))
}

/// Draws one pair. With probability `static_fraction` both crops come from a
/// single freshly generated frame, otherwise from two frames of a sequence.
pub fn sample_training_pair(
    sequences: &[SyntheticSequence],
    cfg: &TrainConfig,
    search_factor: f64,
    res: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairSample> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    let fresh;
    let (seq, i, j) = if rng.gen_bool(cfg.static_fraction) {
        let params = SynthParams { frame_size: cfg.frame_size, length: 1, ..SynthParams::default() };
        fresh = generate_sequence(&params, rng.gen());
        (&fresh, 0, 0)
    } else {
        let seq = &sequences[rng.gen_range(0..sequences.len())];
        let (i, j) = sample_pair(seq.len(), cfg.max_gap, rng)?;
        (seq, i, j)
    };

    let rb = seq.amodal[i];
    let sigma = rb.w.max(rb.h);
    let rc = perturb_location(rb.center(), sigma, cfg.perturbation, rng);
    let (reference, reference_mask, _) = crop(&seq.frames[i], &seq.masks[i], rc, search_factor * sigma, res)?;

    let tb = seq.amodal[j];
    let sigma = tb.w.max(tb.h);
    let vc = seq.visible_box(j).center();
    let side = search_factor * sigma * (1.0 + rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter));
    let tc = perturb_location(vc, sigma, cfg.crop_jitter, rng);
    let (train, train_mask, mapping) = crop(&seq.frames[j], &seq.masks[j], tc, side, res)?;

    let pb = mapping.box_to_patch(&tb);
    let cell = CELL as f64;
    let cells = BoundingBox::new(pb.x / cell, pb.y / cell, pb.w / cell, pb.h / cell, BoxRole::Inherent)?;
    let grid = res / CELL;
    let (px, py) = perturb_location(mapping.to_patch(vc.0, vc.1), pb.w.max(pb.h), cfg.perturbation, rng);
    let to_cell = |v: f64| ((v / cell).floor().max(0.0) as usize).min(grid - 1);
    Ok(PairSample {
        reference,
        reference_mask,
        train,
        train_mask,
        train_box_cells: cells,
        location_cell: (to_cell(py), to_cell(px)),
    })
}

/// Draws a batch from the stream of iteration `iteration`.
pub fn sample_batch(
    sequences: &[SyntheticSequence],
    cfg: &TrainConfig,
    search_factor: f64,
    res: usize,
    seed: u64,
    stage: Stage,
    iteration: usize,
) -> Result<Vec<PairSample>> {
    let mut rng = iteration_rng(seed, stage, iteration);
    (0..cfg.batch_size).map(|_| sample_training_pair(sequences, cfg, search_factor, res, &mut rng)).collect()
}

fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.salt());
    rng.set_stream(iteration as u64);
    rng
}

/// Everything one segmentation step needs, with the reference side already
/// reduced to prototype sets.
pub struct SegmentationBatch {
    pub train: Tensor,
    pub targets: Tensor,
    pub location: Tensor,
    pub models: Vec<GimModel>,
}

impl SegmentationBatch {
    /// Prototypes come from the reference crops under the current weights and
    /// are treated as constants.
    pub fn new(bundle: &NetworkBundle, samples: &[PairSample]) -> Result<Self> {
        let refs: Vec<&Image> = samples.iter().map(|s| &s.reference).collect();
        let x = images_to_tensor(&refs)?;
        let deepest = bundle.deepest_features(&x)?;
        let res = bundle.config.patch_size;
        let grid = res / CELL;
        let mut models = Vec::with_capacity(samples.len());
        for (k, s) in samples.iter().enumerate() {
            let feats = bundle.gim_features(&deepest.batch_item(k));
            let mask = crate::geometry::Mask::new(res, res, s.reference_mask.data().to_vec(), crate::geometry::CoordSpace::Patch)?;
            let fg = foreground_cells(&mask, grid, 0.5);
            models.push(build_model(&feats, &fg, &vec![true; grid * grid])?);
        }
        let trains: Vec<&Image> = samples.iter().map(|s| &s.train).collect();
        let location = samples
            .iter()
            .map(|s| {
                let lc = euclidean_location_channel(s.location_cell, grid, grid)?;
                Ok(Tensor::new([1, 1, grid, grid], lc.values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train: images_to_tensor(&trains)?,
            targets: Tensor::stack_batch(&samples.iter().map(|s| s.train_mask.clone()).collect::<Vec<_>>()),
            location: Tensor::stack_batch(&location),
            models,
        })
    }
}

/// Cross-entropy of the refined mask for a batch, recorded in `g`.
pub fn segmentation_loss(g: &mut Graph, bundle: &NetworkBundle, batch: &SegmentationBatch) -> Result<NodeId> {
    let x = g.constant(batch.train.clone());
    let pyr = bundle.encode(g, x)?;
    let feats = bundle.gim.reduce_features(g, &bundle.store, pyr.s16);
    let mut fs = Vec::with_capacity(batch.models.len());
    let mut ps = Vec::with_capacity(batch.models.len());
    for (k, model) in batch.models.iter().enumerate() {
        let fk = g.select_batch(feats, k);
        let fg = g.constant(model.fg.clone());
        let bg = g.constant(model.bg.clone());
        let ch = bundle.gim.channels(g, &bundle.store, fk, fg, bg);
        fs.push(ch.f);
        ps.push(g.slice_channels(ch.p, 0, 1));
    }
    let f = g.concat_batch(&fs);
    let p = g.concat_batch(&ps);
    let l = g.constant(batch.location.clone());
    let logits = bundle.refine.logits(g, &bundle.store, (l, f, p), &pyr, true)?;
    Ok(cross_entropy(g, logits, &batch.targets))
}

/// Inputs of one scale-head step; backbone features are precomputed.
pub struct ScaleBatch {
    pub template: Tensor,
    pub search: Tensor,
    pub masks: Tensor,
    pub targets: SemTargets,
}

impl ScaleBatch {
    pub fn new(bundle: &NetworkBundle, samples: &[PairSample]) -> Result<Self> {
        let refs: Vec<&Image> = samples.iter().map(|s| &s.reference).collect();
        let trains: Vec<&Image> = samples.iter().map(|s| &s.train).collect();
        let template = bundle.deepest_features(&images_to_tensor(&refs)?)?;
        let search = bundle.deepest_features(&images_to_tensor(&trains)?)?;
        let grid = bundle.config.patch_size / CELL;
        let targets: Vec<SemTargets> = samples.iter().map(|s| SemTargets::new(&s.train_box_cells, grid, grid)).collect();
        Ok(Self {
            template,
            search,
            masks: Tensor::stack_batch(&samples.iter().map(|s| s.train_mask.clone()).collect::<Vec<_>>()),
            targets: SemTargets::stack(&targets),
        })
    }
}

pub fn scale_loss(g: &mut Graph, bundle: &NetworkBundle, batch: &ScaleBatch) -> Result<NodeId> {
    let t = g.constant(batch.template.clone());
    let desc = bundle.sem.template_descriptor(g, &bundle.store, t);
    let s = g.constant(batch.search.clone());
    let m = g.constant(batch.masks.clone());
    let mf = bundle.sem.adjust_mask(g, &bundle.store, m);
    let out = bundle.sem.predict(g, &bundle.store, desc, s, mf)?;
    Ok(sem_loss(g, &out, &batch.targets))
}

enum StageBatch {
    Segmentation(SegmentationBatch),
    Scale(ScaleBatch),
}

impl StageBatch {
    fn new(stage: Stage, bundle: &NetworkBundle, samples: &[PairSample]) -> Result<Self> {
        Ok(match stage {
            Stage::Segmentation => StageBatch::Segmentation(SegmentationBatch::new(bundle, samples)?),
            Stage::Scale => StageBatch::Scale(ScaleBatch::new(bundle, samples)?),
        })
    }
}

/// One optimizer step on a prepared batch; returns the loss before the step.
fn step(bundle: &mut NetworkBundle, adam: &mut Adam, stage: Stage, batch: &StageBatch, lr: f32) -> Result<f32> {
    let mut g = Graph::new(stage.trainable());
    let loss = match batch {
        StageBatch::Segmentation(b) => segmentation_loss(&mut g, bundle, b)?,
        StageBatch::Scale(b) => scale_loss(&mut g, bundle, b)?,
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{} loss is {value}", stage.name())));
    }
    let grads = g.backward(loss);
    drop(g);
    adam.lr = lr;
    adam.step(&mut bundle.store, &grads);
    Ok(value)
}

/// Repeatedly steps on one fixed batch; returns the loss of every step.
pub fn overfit(bundle: &mut NetworkBundle, stage: Stage, samples: &[PairSample], iterations: usize, lr: f32) -> Result<Vec<f32>> {
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        // Segmentation prototypes follow the weights, so the batch is rebuilt.
        let batch = StageBatch::new(stage, bundle, samples)?;
        losses.push(step(bundle, &mut adam, stage, &batch, lr)?);
    }
    Ok(losses)
}

/// Where a run keeps its checkpoints and loss history.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Continue from the stage checkpoint in `dir` when one exists.
    pub resume: bool,
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.ckpt.safetensors", stage.name()))
}

pub fn history_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.history.jsonl", stage.name()))
}

fn save_checkpoint(dir: &Path, stage: Stage, bundle: &NetworkBundle, adam: &Adam, next: usize, seed: u64) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("stage".into(), stage.name().into());
    meta.insert("next_iteration".into(), next.to_string());
    meta.insert("adam_steps".into(), adam.steps().to_string());
    meta.insert("seed".into(), seed.to_string());
    let path = checkpoint_path(dir, stage);
    let tmp = path.with_extension("tmp");
    bundle.save(&tmp, &adam.export(&bundle.store), meta)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_history(path: &Path, records: &[HistoryRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn run_stage(
    bundle: &mut NetworkBundle,
    sequences: &[SyntheticSequence],
    cfg: &TrainConfig,
    tracker: &TrackerConfig,
    seed: u64,
    stage: Stage,
    iterations: usize,
    out: &RunOutput,
) -> Result<Vec<HistoryRecord>> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut start = 0;
    if let (Some(dir), true) = (&out.dir, out.resume) {
        let ckpt = checkpoint_path(dir, stage);
        if ckpt.exists() {
            let (loaded, rest, meta) = NetworkBundle::load(&ckpt)?;
            if loaded.config != bundle.config {
                return Err(Error::Model(format!("{} was written for a different network", ckpt.display())));
            }
            bundle.store = loaded.store;
            let num = |k: &str| -> Result<u64> {
                meta.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Model(format!("{} lacks {k}", ckpt.display())))
            };
            start = num("next_iteration")? as usize;
            adam.import(&bundle.store, &rest, num("adam_steps")?);
            let hp = history_path(dir, stage);
            if hp.exists() {
                history = read_history(&hp)?;
                history.retain(|r: &HistoryRecord| r.iteration < start);
            }
            info!("{}: resuming at iteration {start}", stage.name());
        }
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let res = bundle.config.patch_size;
    for it in start..iterations {
        let lr = cfg.lr_at(it);
        let samples = sample_batch(sequences, cfg, tracker.search_factor, res, seed, stage, it)?;
        let batch = StageBatch::new(stage, bundle, &samples)?;
        let loss = match step(bundle, &mut adam, stage, &batch, lr) {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss(_)) => {
                if let Some(dir) = &out.dir {
                    save_checkpoint(dir, stage, bundle, &adam, it, seed)?;
                    write_history(&history_path(dir, stage), &history)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        history.push(HistoryRecord { iteration: it, loss, lr, stage });
        if it % 50 == 0 {
            info!("{} iteration {it}: loss {loss:.5} lr {lr:e}", stage.name());
        }
        let done = it + 1;
        if let Some(dir) = &out.dir {
            if done % cfg.checkpoint_every == 0 || done == iterations {
                save_checkpoint(dir, stage, bundle, &adam, done, seed)?;
                write_history(&history_path(dir, stage), &history)?;
            }
        }
    }
    Ok(history)
}

/// Trains backbone, GIM and refinement with per-pixel cross-entropy.
pub fn train_segmentation(
    bundle: &mut NetworkBundle,
    sequences: &[SyntheticSequence],
    cfg: &TrainConfig,
    tracker: &TrackerConfig,
    seed: u64,
    out: &RunOutput,
) -> Result<Vec<HistoryRecord>> {
    run_stage(bundle, sequences, cfg, tracker, seed, Stage::Segmentation, cfg.iterations, out)
}

/// Trains the scale heads on frozen backbone features and ground-truth masks.
pub fn train_sem(
    bundle: &mut NetworkBundle,
    sequences: &[SyntheticSequence],
    cfg: &TrainConfig,
    tracker: &TrackerConfig,
    seed: u64,
    out: &RunOutput,
) -> Result<Vec<HistoryRecord>> {
    run_stage(bundle, sequences, cfg, tracker, seed, Stage::Scale, cfg.sem_iterations, out)
}

/// Both stages on the default synthetic training set.
pub fn train_all(
    bundle: &mut NetworkBundle,
    cfg: &TrainConfig,
    tracker: &TrackerConfig,
    seed: u64,
    out: &RunOutput,
) -> Result<Vec<HistoryRecord>> {
    let sequences = training_sequences(cfg, seed);
    let mut history = train_segmentation(bundle, &sequences, cfg, tracker, seed, out)?;
    history.extend(train_sem(bundle, &sequences, cfg, tracker, seed, out)?);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;

    fn tiny_net() -> NetConfig {
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

    fn tiny_train() -> TrainConfig {
        TrainConfig { batch_size: 2, sequences: 2, sequence_length: 8, frame_size: 96, checkpoint_every: 2, ..TrainConfig::default() }
    }

    #[test]
    fn two_frames_give_the_only_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (i, j) = sample_pair(2, 1, &mut rng).unwrap();
            assert!((i, j) == (0, 1) || (i, j) == (1, 0));
        }
        assert!(sample_pair(1, 5, &mut rng).is_err());
    }

    #[test]
    fn pairs_respect_the_gap_and_are_uniform() {
        let (len, gap) = (12usize, 4usize);
        let mut admissible = Vec::new();
        for i in 0..len {
            for j in 0..len {
                if i != j && i.abs_diff(j) <= gap {
                    admissible.push((i, j));
                }
            }
        }
        let mut counts = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 20_000;
        for _ in 0..draws {
            let p = sample_pair(len, gap, &mut rng).unwrap();
            assert!(p.0 != p.1 && p.0.abs_diff(p.1) <= gap);
            *counts.entry(p).or_insert(0usize) += 1;
        }
        let expected = draws as f64 / admissible.len() as f64;
        let chi2: f64 = admissible.iter().map(|p| (*counts.get(p).unwrap_or(&0) as f64 - expected).powi(2) / expected).sum();
        // 83 degrees of freedom; the 0.999 quantile is about 127.
        assert!(chi2 < 127.0, "chi2 = {chi2}");
    }

    #[test]
    fn perturbation_stays_within_an_eighth_and_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bins = [0usize; 10];
        for _ in 0..10_000 {
            let (x, y) = perturb_location((100.0, 50.0), 80.0, 0.125, &mut rng);
            assert!((x - 100.0).abs() <= 10.0 && (y - 50.0).abs() <= 10.0);
            bins[(((x - 90.0) / 2.0) as usize).min(9)] += 1;
        }
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // 9 degrees of freedom; the 0.999 quantile is about 27.9.
        assert!(chi2 < 27.9, "chi2 = {chi2}");
        assert_eq!(perturb_location((3.0, 4.0), 0.0, 0.125, &mut rng), (3.0, 4.0));
    }

    #[test]
    fn samples_have_targets_inside_the_patch() {
        let cfg = tiny_train();
        let seqs = training_sequences(&cfg, 3);
        assert_eq!(seqs.len(), 2);
        let batch = sample_batch(&seqs, &cfg, 4.0, 64, 3, Stage::Segmentation, 0).unwrap();
        for s in &batch {
            assert!(s.reference_mask.data().iter().any(|&v| v > 0.5));
            assert!(s.train_mask.data().iter().any(|&v| v > 0.5));
            let (cx, cy) = s.train_box_cells.center();
            assert!((0.0..4.0).contains(&cx) && (0.0..4.0).contains(&cy));
        }
        let again = sample_batch(&seqs, &cfg, 4.0, 64, 3, Stage::Segmentation, 0).unwrap();
        assert_eq!(batch[1].train, again[1].train);
    }

    #[test]
    fn history_follows_the_decay_schedule() {
        let cfg = TrainConfig { iterations: 4, iterations_per_epoch: 1, decay_every_epochs: 2, ..tiny_train() };
        let mut bundle = NetworkBundle::new(&tiny_net(), 0).unwrap();
        let seqs = training_sequences(&cfg, 0);
        let h = train_segmentation(&mut bundle, &seqs, &cfg, &TrackerConfig::default(), 0, &RunOutput::default()).unwrap();
        let lrs: Vec<f32> = h.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3 * 0.2, 1e-3 * 0.2]);
        assert!(h.iter().all(|r| r.loss.is_finite() && r.stage == Stage::Segmentation));
    }

    #[test]
    fn resuming_reproduces_the_uninterrupted_run() {
        let tracker = TrackerConfig::default();
        let full_cfg = TrainConfig { iterations: 4, sem_iterations: 4, ..tiny_train() };
        let seqs = training_sequences(&full_cfg, 5);
        let mut a = NetworkBundle::new(&tiny_net(), 1).unwrap();
        let ha = train_segmentation(&mut a, &seqs, &full_cfg, &tracker, 5, &RunOutput::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput { dir: Some(dir.path().to_path_buf()), resume: true };
        let mut b = NetworkBundle::new(&tiny_net(), 1).unwrap();
        let half = TrainConfig { iterations: 2, ..full_cfg.clone() };
        train_segmentation(&mut b, &seqs, &half, &tracker, 5, &out).unwrap();
        let mut c = NetworkBundle::new(&tiny_net(), 1).unwrap();
        let hc = train_segmentation(&mut c, &seqs, &full_cfg, &tracker, 5, &out).unwrap();
        assert_eq!(ha, hc);
        assert_eq!(read_history(&history_path(dir.path(), Stage::Segmentation)).unwrap(), ha);
        for id in a.store.ids() {
            assert_eq!(a.store.value(id), c.store.value(id), "{}", a.store.name(id));
        }
    }

    #[test]
    fn scale_stage_touches_only_the_scale_heads() {
        let cfg = TrainConfig { sem_iterations: 2, ..tiny_train() };
        let mut bundle = NetworkBundle::new(&tiny_net(), 2).unwrap();
        let before = bundle.store.clone();
        let seqs = training_sequences(&cfg, 1);
        let h = train_sem(&mut bundle, &seqs, &cfg, &TrackerConfig::default(), 1, &RunOutput::default()).unwrap();
        assert_eq!(h.len(), 2);
        let mut changed = 0;
        for id in bundle.store.ids() {
            let name = bundle.store.name(id);
            if name.starts_with("sem.") {
                changed += usize::from(bundle.store.value(id) != before.value(id));
            } else {
                assert_eq!(bundle.store.value(id), before.value(id), "{name}");
            }
        }
        assert!(changed > 0);
    }
}
