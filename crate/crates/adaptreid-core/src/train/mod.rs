//! Training loops.
//!
//! The joint loop alternates per step: discriminators first (fakes detached),
//! then one update of everything else on the weighted total objective.
//! Attention networks train only during their initial window and are
//! bit-frozen afterwards; after the discriminator window the discriminators'
//! real inputs switch to background-masked images while fakes remain the
//! composed translations.
//!
//! Modes: `edaan_end_to_end` runs the joint loop with the re-ID losses
//! inside; `daan_two_stage` first trains translation alone, then trains a
//! fresh re-ID network on real plus translated images; `direct_transfer`
//! trains the re-ID network on source images only.

pub mod checkpoint;
pub mod schedule;

pub use checkpoint::{load_joint, load_reid, peek_kind, save_joint, save_reid, CheckpointKind};
pub use schedule::{lr_schedule, phase_flags, PhaseFlags};

use crate::data::{stack_images, Domain, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{self, graph, LossComponents, LossReport, LossWeights};
use crate::model::{build_domain_models, build_reid_net, DomainModelSet, NetworkConfig, ReidNet, Side};
use crate::nn::adam::Adam;
use crate::nn::layers::ForwardCtx;
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::rng::rng_derived;
use crate::sampler::{sample_domain_pair_batch, sample_quartet_batch, IdentityIndex, QuartetBatch};
use crate::translate::{self, translate_s2t, translate_t2s, CycleDirection};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    EdaanEndToEnd,
    DaanTwoStage,
    DirectTransfer,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::EdaanEndToEnd => write!(f, "edaan_end_to_end"),
            TrainMode::DaanTwoStage => write!(f, "daan_two_stage"),
            TrainMode::DirectTransfer => write!(f, "direct_transfer"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricLossKind {
    #[default]
    Quartet,
    Triplet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub attention_enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Defaults to epochs/2 when unset.
    pub decay_start_epoch: Option<usize>,
    /// Defaults to epochs scaled by the 30-of-200 reference ratio.
    pub attention_train_epochs: Option<usize>,
    /// Defaults like `attention_train_epochs`.
    pub disc_whole_image_epochs: Option<usize>,
    pub seed: u64,
    pub checkpoint_interval_epochs: usize,
    /// 0 disables periodic sample grids.
    pub sample_interval_epochs: usize,
    /// Feed composed translations of the metric/identity batches through the
    /// re-ID heads as well (end-to-end coupling).
    pub reid_on_translated: bool,
    pub metric_loss: MetricLossKind,
    /// Cycle the composed image instead of the raw generator output.
    pub cycle_composed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::EdaanEndToEnd,
            attention_enabled: true,
            epochs: 60,
            lr: 2e-4,
            batch_size: 16,
            decay_start_epoch: None,
            attention_train_epochs: None,
            disc_whole_image_epochs: None,
            seed: 0,
            checkpoint_interval_epochs: 20,
            sample_interval_epochs: 20,
            reid_on_translated: true,
            metric_loss: MetricLossKind::Quartet,
            cycle_composed: false,
        }
    }
}

impl TrainConfig {
    pub fn decay_start(&self) -> usize {
        self.decay_start_epoch.unwrap_or(self.epochs / 2)
    }

    /// 30 epochs of the 200-epoch reference protocol, scaled.
    pub fn attention_epochs(&self) -> usize {
        self.attention_train_epochs
            .unwrap_or_else(|| ((self.epochs * 30 + 100) / 200).max(1))
    }

    pub fn disc_whole_image(&self) -> usize {
        self.disc_whole_image_epochs
            .unwrap_or_else(|| ((self.epochs * 30 + 100) / 200).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        let attn = self.attention_epochs();
        if attn == 0 || attn > self.epochs {
            return Err(Error::Config(format!(
                "train.attention_train_epochs must be in [1, epochs], got {attn}"
            )));
        }
        if self.decay_start() >= self.epochs {
            return Err(Error::Config(format!(
                "train.decay_start_epoch must be < epochs, got {}",
                self.decay_start()
            )));
        }
        if self.checkpoint_interval_epochs == 0 {
            return Err(Error::Config("train.checkpoint_interval_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mutable state of the joint loop; everything a checkpoint captures.
#[derive(Debug)]
pub struct JointState {
    pub models: DomainModelSet,
    pub store: ParamStore,
    pub adam_d: Adam,
    pub adam_g: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub flags: PhaseFlags,
    pub rng: ChaCha8Rng,
    pub attention_enabled: bool,
}

#[derive(Debug)]
pub struct ReidState {
    pub net: ReidNet,
    pub store: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

/// Instrumentation hooks for tests and monitoring.
pub trait TrainObserver {
    fn on_epoch_start(&mut self, _epoch: usize, _flags: PhaseFlags) {}
    /// The exact tensor fed to a discriminator as its real input this step,
    /// along with the unmasked batch and the attention mask in effect (when
    /// the masked regime is active).
    fn on_disc_real_input(
        &mut self,
        _epoch: usize,
        _masked: bool,
        _side: Side,
        _input: &Tensor,
        _original: &Tensor,
        _mask: Option<&Tensor>,
    ) {
    }
    fn on_step(&mut self, _step: usize, _epoch: usize, _report: &LossReport) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub loss_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Everything `train` leaves behind, including final in-memory states for
/// direct evaluation.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub stages: Vec<StageOutput>,
    pub joint: Option<JointState>,
    pub reid: Option<ReidState>,
}

impl TrainOutcome {
    /// The checkpoint holding the re-ID model used at test time.
    pub fn reid_checkpoint(&self) -> &Path {
        &self.stages.last().expect("at least one stage").final_checkpoint
    }
}

fn label_mapping(images: &[LabeledImage]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = images.iter().map(|i| i.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

fn stack_by_indices(images: &[LabeledImage], indices: &[usize]) -> Result<Tensor> {
    let refs: Vec<&LabeledImage> = indices.iter().map(|&i| &images[i]).collect();
    stack_images(&refs)
}

fn labels_by_indices(
    images: &[LabeledImage],
    indices: &[usize],
    mapping: &BTreeMap<u32, usize>,
) -> Vec<usize> {
    indices.iter().map(|&i| mapping[&images[i].identity]).collect()
}

fn write_csv_line(buf: &mut String, values: &[f64], step: usize, epoch: usize) {
    let _ = write!(buf, "{step},{epoch}");
    for v in values {
        let _ = write!(buf, ",{v}");
    }
    buf.push('\n');
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Background-masked copy of an image batch: (1 - mask) .* x, plain values.
fn masked_background(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = x.clone();
    {
        let od = out.data_mut();
        let md = mask.data();
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    od[(i * c + ch) * hw + p] *= 1.0 - md[i * hw + p];
                }
            }
        }
    }
    Ok(out)
}

struct ReidBatch {
    stacks: [Tensor; 4],
    labels: [Vec<usize>; 4],
}

fn sample_reid_batch(
    images: &[LabeledImage],
    index: &IdentityIndex,
    mapping: &BTreeMap<u32, usize>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ReidBatch> {
    let q: QuartetBatch = sample_quartet_batch(index, batch_size, rng)?;
    Ok(ReidBatch {
        stacks: [
            stack_by_indices(images, &q.anchors)?,
            stack_by_indices(images, &q.positives)?,
            stack_by_indices(images, &q.negatives)?,
            stack_by_indices(images, &q.second_negatives)?,
        ],
        labels: [
            labels_by_indices(images, &q.anchors, mapping),
            labels_by_indices(images, &q.positives, mapping),
            labels_by_indices(images, &q.negatives, mapping),
            labels_by_indices(images, &q.second_negatives, mapping),
        ],
    })
}

/// Embeddings and identity logits of the four quartet stacks, plus the same
/// through composed translations when requested. Returns (metric, id) nodes.
#[allow(clippy::too_many_arguments)]
fn reid_terms_joint(
    t: &mut Tape,
    models: &DomainModelSet,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    batch: &ReidBatch,
    weights: &LossWeights,
    metric_kind: MetricLossKind,
    on_translated: bool,
    attention_enabled: bool,
) -> Result<(NodeId, NodeId)> {
    let mut real_embs = Vec::with_capacity(4);
    let mut ce_terms: Vec<(NodeId, f64)> = Vec::new();
    let mut composed_embs = Vec::with_capacity(4);
    let mut ctx = ForwardCtx::train(rng);
    for (stack, labels) in batch.stacks.iter().zip(&batch.labels) {
        let x = t.leaf(stack.clone());
        let feat = models.encode(t, store, Side::Source, x)?;
        let emb = models.embed_head.forward(t, store, feat)?;
        let logits = models.class_head.forward(t, store, feat, &mut ctx)?;
        real_embs.push(emb);
        ce_terms.push((graph::identity(t, logits, labels)?, 1.0));
        if on_translated {
            let raw = models.decode(t, store, Side::Source, feat)?;
            let mask = if attention_enabled {
                models.forward_attention(t, store, Side::Source, x)?
            } else {
                let (n, _, h, w) = t.value(x).dims4()?;
                t.leaf(Tensor::zeros(&[n, 1, h, w]))
            };
            let (_, _, composed) = translate::compose(t, mask, x, raw)?;
            let feat_c = models.encode(t, store, Side::Source, composed)?;
            let emb_c = models.embed_head.forward(t, store, feat_c)?;
            let logits_c = models.class_head.forward(t, store, feat_c, &mut ctx)?;
            composed_embs.push(emb_c);
            ce_terms.push((graph::identity(t, logits_c, labels)?, 1.0));
        }
    }
    let metric_of = |t: &mut Tape, e: &[NodeId]| -> Result<NodeId> {
        match metric_kind {
            MetricLossKind::Quartet => graph::quartet(t, e[0], e[1], e[2], e[3], weights),
            MetricLossKind::Triplet => graph::triplet(t, e[0], e[1], e[2], weights),
        }
    };
    let metric = if on_translated {
        let m_real = metric_of(t, &real_embs)?;
        let m_comp = metric_of(t, &composed_embs)?;
        t.add_weighted(&[(m_real, 0.5), (m_comp, 0.5)])
    } else {
        metric_of(t, &real_embs)?
    };
    let k = ce_terms.len() as f64;
    let weighted: Vec<(NodeId, f64)> = ce_terms.into_iter().map(|(n, _)| (n, 1.0 / k)).collect();
    let id = t.add_weighted(&weighted);
    Ok((metric, id))
}

/// One alternating update. Returns the generator-side loss report.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    state: &mut JointState,
    cfg: &TrainConfig,
    weights: &LossWeights,
    lr: f64,
    src_batch: Tensor,
    tgt_batch: Tensor,
    reid_batch: Option<&ReidBatch>,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<LossReport> {
    let JointState { models, store, adam_d, adam_g, rng, flags, attention_enabled, .. } = state;
    let attention_enabled = *attention_enabled;
    let flags = *flags;

    let mut t = Tape::new(true);
    if flags.attention_frozen {
        // frozen attention parameters take no gradient, so their whole
        // backward subgraph is skipped
        t.set_param_filter(|entry| !entry.group.is_attention());
    }
    let x_s = t.leaf(src_batch);
    let x_t = t.leaf(tgt_batch);
    let out_s2t = translate_s2t(models, &mut t, store, x_s)?;
    let out_t2s = translate_t2s(models, &mut t, store, x_t)?;

    // -- phase 1: discriminators on detached fakes --
    let fake_t = t.detach(out_s2t.composed);
    let fake_s = t.detach(out_t2s.composed);
    let mask_real = flags.disc_masked && attention_enabled;
    let real_t = if mask_real {
        let mask = t.value(out_t2s.foreground_mask).clone();
        let masked = masked_background(t.value(x_t), &mask)?;
        observer.on_disc_real_input(epoch, true, Side::Target, &masked, t.value(x_t), Some(&mask));
        t.leaf(masked)
    } else {
        observer.on_disc_real_input(epoch, false, Side::Target, t.value(x_t), t.value(x_t), None);
        x_t
    };
    let real_s = if mask_real {
        let mask = t.value(out_s2t.foreground_mask).clone();
        let masked = masked_background(t.value(x_s), &mask)?;
        observer.on_disc_real_input(epoch, true, Side::Source, &masked, t.value(x_s), Some(&mask));
        t.leaf(masked)
    } else {
        observer.on_disc_real_input(epoch, false, Side::Source, t.value(x_s), t.value(x_s), None);
        x_s
    };
    let d_real_t = models.discriminate_score(&mut t, store, Side::Target, real_t)?;
    let d_fake_t = models.discriminate_score(&mut t, store, Side::Target, fake_t)?;
    let loss_d_t = graph::adversarial_d(&mut t, d_real_t, d_fake_t)?;
    let d_real_s = models.discriminate_score(&mut t, store, Side::Source, real_s)?;
    let d_fake_s = models.discriminate_score(&mut t, store, Side::Source, fake_s)?;
    let loss_d_s = graph::adversarial_d(&mut t, d_real_s, d_fake_s)?;
    let loss_d = t.add(loss_d_t, loss_d_s)?;
    let d_value = t.value(loss_d).item();
    if !d_value.is_finite() {
        return Err(Error::NonFinite { term: "gan_d".into(), value: d_value });
    }
    let grads_d = t.backward(loss_d)?;
    let disc_ids = store.trainable_in(|g| g.is_discriminator());
    let updates: Vec<_> = disc_ids
        .iter()
        .filter_map(|&id| t.param_grad(&grads_d, id).map(|g| (id, g)))
        .collect();
    adam_d.step(store, lr, &updates);
    drop(grads_d);
    t.refresh_params_nograd(store, &disc_ids);

    // -- phase 2: generator side against the updated discriminators --
    let score_fake_t = models.discriminate_score(&mut t, store, Side::Target, out_s2t.composed)?;
    let gan_s = graph::adversarial_g(&mut t, score_fake_t)?;
    let score_fake_s = models.discriminate_score(&mut t, store, Side::Source, out_t2s.composed)?;
    let gan_t = graph::adversarial_g(&mut t, score_fake_s)?;
    let recon_s =
        translate::cycle_reconstruct(models, &mut t, store, x_s, CycleDirection::S2t2s, cfg.cycle_composed)?;
    let recon_t =
        translate::cycle_reconstruct(models, &mut t, store, x_t, CycleDirection::T2s2t, cfg.cycle_composed)?;
    let cycle = graph::cycle(&mut t, x_s, recon_s, x_t, recon_t)?;
    let attn = if attention_enabled {
        let a_of_translated_src =
            models.forward_attention(&mut t, store, Side::Target, out_s2t.composed)?;
        let a_of_translated_tgt =
            models.forward_attention(&mut t, store, Side::Source, out_t2s.composed)?;
        Some(graph::attention_consistency(
            &mut t,
            out_s2t.foreground_mask,
            a_of_translated_src,
            out_t2s.foreground_mask,
            a_of_translated_tgt,
        )?)
    } else {
        None
    };
    let (metric, id) = match reid_batch {
        Some(batch) => {
            let (m, i) = reid_terms_joint(
                &mut t,
                models,
                store,
                rng,
                batch,
                weights,
                cfg.metric_loss,
                cfg.reid_on_translated,
                attention_enabled,
            )?;
            (Some(m), Some(i))
        }
        None => (None, None),
    };
    let total = graph::total(
        &mut t,
        &graph::TotalTerms { gan_s, gan_t, cycle: Some(cycle), attn, quartet: metric, id },
        weights,
    );
    let components = LossComponents {
        gan_s: t.value(gan_s).item(),
        gan_t: t.value(gan_t).item(),
        cycle: t.value(cycle).item(),
        attn: attn.map(|a| t.value(a).item()).unwrap_or(0.0),
        quartet: metric.map(|m| t.value(m).item()).unwrap_or(0.0),
        id: id.map(|i| t.value(i).item()).unwrap_or(0.0),
    };
    let report = losses::total_loss(&components, weights)?;
    let grads = t.backward(total)?;
    let gen_ids = store.trainable_in(|g| {
        !g.is_discriminator() && !(flags.attention_frozen && g.is_attention())
    });
    let updates: Vec<_> = gen_ids
        .iter()
        .filter_map(|&id| t.param_grad(&grads, id).map(|g| (id, g)))
        .collect();
    adam_g.step(store, lr, &updates);
    Ok(report)
}

fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.bin")
}

#[allow(clippy::too_many_arguments)]
fn train_joint(
    cfg: &TrainConfig,
    ncfg: &NetworkConfig,
    weights: &LossWeights,
    source_train: &[LabeledImage],
    target_train: &[LabeledImage],
    include_reid: bool,
    dir: &Path,
    observer: &mut dyn TrainObserver,
    resume_from: Option<&Path>,
) -> Result<(JointState, StageOutput)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mapping = label_mapping(source_train);
    let index = IdentityIndex::build(source_train);
    let mut state = match resume_from {
        Some(path) => load_joint(path)?,
        None => {
            let mut ncfg = ncfg.clone();
            ncfg.num_classes = mapping.len().max(1);
            let (models, store) = build_domain_models(&ncfg, cfg.attention_enabled, cfg.seed)?;
            JointState {
                models,
                store,
                adam_d: Adam::new(ADAM_BETA1, ADAM_BETA2),
                adam_g: Adam::new(ADAM_BETA1, ADAM_BETA2),
                epoch: 0,
                flags: PhaseFlags::default(),
                rng: rng_derived(cfg.seed, &[0x7e41]),
                attention_enabled: cfg.attention_enabled,
            }
        }
    };

    let steps_per_epoch = div_ceil(source_train.len(), cfg.batch_size);
    let mut csv = String::new();
    if include_reid {
        csv.push_str("step,epoch,gan_s,gan_t,cycle,attn,quartet,id,total\n");
    } else {
        csv.push_str("step,epoch,gan_s,gan_t,cycle,attn,total\n");
    }
    let mut checkpoints = Vec::new();

    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        state.flags = phase_flags(epoch, cfg);
        observer.on_epoch_start(epoch, state.flags);
        let lr = lr_schedule(epoch, cfg)?;
        for step_in_epoch in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let (src_idx, tgt_idx) = sample_domain_pair_batch(
                source_train.len(),
                target_train.len(),
                cfg.batch_size,
                &mut state.rng,
            )?;
            let src_batch = stack_by_indices(source_train, &src_idx)?;
            let tgt_batch = stack_by_indices(target_train, &tgt_idx)?;
            let reid_batch = if include_reid {
                Some(sample_reid_batch(
                    source_train,
                    &index,
                    &mapping,
                    cfg.batch_size,
                    &mut state.rng,
                )?)
            } else {
                None
            };
            let report = joint_step(
                &mut state,
                cfg,
                weights,
                lr,
                src_batch,
                tgt_batch,
                reid_batch.as_ref(),
                epoch,
                observer,
            )?;
            if include_reid {
                write_csv_line(
                    &mut csv,
                    &[
                        report.gan_s,
                        report.gan_t,
                        report.cycle,
                        report.attn,
                        report.quartet,
                        report.id,
                        report.total,
                    ],
                    step,
                    epoch,
                );
            } else {
                write_csv_line(
                    &mut csv,
                    &[report.gan_s, report.gan_t, report.cycle, report.attn, report.total],
                    step,
                    epoch,
                );
            }
            observer.on_step(step, epoch, &report);
        }
        state.epoch = epoch + 1;
        if (epoch + 1) % cfg.checkpoint_interval_epochs == 0 && epoch + 1 != cfg.epochs {
            let path = dir.join(checkpoint_name(epoch + 1));
            save_joint(&path, &state)?;
            checkpoints.push(path);
        }
        if cfg.sample_interval_epochs > 0
            && (epoch + 1) % cfg.sample_interval_epochs == 0
            && !source_train.is_empty()
        {
            let sample = &source_train[0];
            let path = dir.join("samples").join(format!("epoch{:04}_s2t.png", epoch + 1));
            translate::export_translation_grid(
                &state.models,
                &state.store,
                &sample.image,
                Side::Source,
                &path,
            )?;
        }
    }

    let loss_csv = dir.join("losses.csv");
    fs::write(&loss_csv, &csv).map_err(|e| Error::io(&loss_csv, e))?;
    let final_path = dir.join("ckpt_final.bin");
    save_joint(&final_path, &state)?;
    checkpoints.push(final_path.clone());
    Ok((
        state,
        StageOutput { dir: dir.to_path_buf(), loss_csv, checkpoints, final_checkpoint: final_path },
    ))
}

/// One re-ID-only update on quartet/identity losses.
fn reid_step(
    state: &mut ReidState,
    weights: &LossWeights,
    metric_kind: MetricLossKind,
    lr: f64,
    batch: &ReidBatch,
) -> Result<LossReport> {
    let ReidState { net, store, adam, rng, .. } = state;
    let mut t = Tape::new(true);
    let mut embs = Vec::with_capacity(4);
    let mut ce_terms = Vec::with_capacity(4);
    let mut ctx = ForwardCtx::train(rng);
    for (stack, labels) in batch.stacks.iter().zip(&batch.labels) {
        let x = t.leaf(stack.clone());
        let feat = net.enc.forward(&mut t, store, x)?;
        let emb = net.embed_head.forward(&mut t, store, feat)?;
        let logits = net.class_head.forward(&mut t, store, feat, &mut ctx)?;
        embs.push(emb);
        ce_terms.push(graph::identity(&mut t, logits, labels)?);
    }
    let metric = match metric_kind {
        MetricLossKind::Quartet => graph::quartet(&mut t, embs[0], embs[1], embs[2], embs[3], weights)?,
        MetricLossKind::Triplet => graph::triplet(&mut t, embs[0], embs[1], embs[2], weights)?,
    };
    let k = ce_terms.len() as f64;
    let id_terms: Vec<(NodeId, f64)> = ce_terms.into_iter().map(|n| (n, 1.0 / k)).collect();
    let id = t.add_weighted(&id_terms);
    let total = t.add_weighted(&[(metric, weights.lambda_quartet), (id, weights.lambda_id)]);
    let report = LossReport {
        gan_s: 0.0,
        gan_t: 0.0,
        cycle: 0.0,
        attn: 0.0,
        quartet: t.value(metric).item(),
        id: t.value(id).item(),
        total: t.value(total).item(),
    };
    for (name, v) in [("quartet", report.quartet), ("id", report.id)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into(), value: v });
        }
    }
    let grads = t.backward(total)?;
    let ids = store.trainable_in(|_| true);
    let updates: Vec<_> =
        ids.iter().filter_map(|&id| t.param_grad(&grads, id).map(|g| (id, g))).collect();
    adam.step(store, lr, &updates);
    Ok(report)
}

fn train_reid_only(
    cfg: &TrainConfig,
    ncfg: &NetworkConfig,
    weights: &LossWeights,
    train_set: &[LabeledImage],
    dir: &Path,
    observer: &mut dyn TrainObserver,
    resume_from: Option<&Path>,
) -> Result<(ReidState, StageOutput)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mapping = label_mapping(train_set);
    let index = IdentityIndex::build(train_set);
    let mut state = match resume_from {
        Some(path) => load_reid(path)?,
        None => {
            let mut ncfg = ncfg.clone();
            ncfg.num_classes = mapping.len().max(1);
            let (net, store) = build_reid_net(&ncfg, cfg.seed)?;
            ReidState {
                net,
                store,
                adam: Adam::new(ADAM_BETA1, ADAM_BETA2),
                epoch: 0,
                rng: rng_derived(cfg.seed, &[0x4e1d]),
            }
        }
    };
    let steps_per_epoch = div_ceil(train_set.len(), cfg.batch_size);
    let mut csv = String::from("step,epoch,quartet,id,total\n");
    let mut checkpoints = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        observer.on_epoch_start(epoch, PhaseFlags::default());
        let lr = lr_schedule(epoch, cfg)?;
        for step_in_epoch in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let batch =
                sample_reid_batch(train_set, &index, &mapping, cfg.batch_size, &mut state.rng)?;
            let report = reid_step(&mut state, weights, cfg.metric_loss, lr, &batch)?;
            write_csv_line(&mut csv, &[report.quartet, report.id, report.total], step, epoch);
            observer.on_step(step, epoch, &report);
        }
        state.epoch = epoch + 1;
        if (epoch + 1) % cfg.checkpoint_interval_epochs == 0 && epoch + 1 != cfg.epochs {
            let path = dir.join(checkpoint_name(epoch + 1));
            save_reid(&path, &state)?;
            checkpoints.push(path);
        }
    }
    let loss_csv = dir.join("losses.csv");
    fs::write(&loss_csv, &csv).map_err(|e| Error::io(&loss_csv, e))?;
    let final_path = dir.join("ckpt_final.bin");
    save_reid(&final_path, &state)?;
    checkpoints.push(final_path.clone());
    Ok((
        state,
        StageOutput { dir: dir.to_path_buf(), loss_csv, checkpoints, final_checkpoint: final_path },
    ))
}

/// Translate every image source-to-target with the given joint model,
/// evaluation mode, keeping labels. Used to build the second-stage training
/// set of the two-stage mode.
pub fn translate_training_set(
    state: &JointState,
    images: &[LabeledImage],
) -> Result<Vec<LabeledImage>> {
    const BATCH: usize = 32;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(BATCH) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let batch = stack_images(&refs)?;
        let mut t = Tape::new(false);
        let x = t.leaf(batch);
        let translated = translate_s2t(&state.models, &mut t, &state.store, x)?;
        let (_, c, h, w) = t.value(translated.composed).dims4()?;
        for (i, img) in chunk.iter().enumerate() {
            let plane = c * h * w;
            let data = t.value(translated.composed).data()[i * plane..(i + 1) * plane].to_vec();
            out.push(LabeledImage {
                image: Tensor::from_vec(&[c, h, w], data),
                identity: img.identity,
                camera: img.camera,
                domain: Domain::Target,
                gt_mask: None,
                path: img.path.as_ref().map(|p| format!("{p}#translated")),
            });
        }
    }
    Ok(out)
}

/// Run a full training job under `run_dir`. Validation happens before any
/// side effect.
pub fn train(
    cfg: &TrainConfig,
    ncfg: &NetworkConfig,
    weights: &LossWeights,
    source_train: &[LabeledImage],
    target_train: &[LabeledImage],
    run_dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ncfg.validate()?;
    weights.validate()?;
    if source_train.is_empty() {
        return Err(Error::Data("training requires a non-empty source set".into()));
    }
    let needs_target = !matches!(cfg.mode, TrainMode::DirectTransfer);
    if needs_target && target_train.is_empty() {
        return Err(Error::Data("this mode requires a non-empty target set".into()));
    }

    match cfg.mode {
        TrainMode::EdaanEndToEnd => {
            let (state, stage) = train_joint(
                cfg,
                ncfg,
                weights,
                source_train,
                target_train,
                true,
                run_dir,
                observer,
                None,
            )?;
            Ok(TrainOutcome {
                run_dir: run_dir.to_path_buf(),
                stages: vec![stage],
                joint: Some(state),
                reid: None,
            })
        }
        TrainMode::DaanTwoStage => {
            let stage1_dir = run_dir.join("stage1");
            let (joint_state, stage1) = train_joint(
                cfg,
                ncfg,
                weights,
                source_train,
                target_train,
                false,
                &stage1_dir,
                observer,
                None,
            )?;
            let translated = translate_training_set(&joint_state, source_train)?;
            let mut stage2_set = source_train.to_vec();
            stage2_set.extend(translated);
            let stage2_dir = run_dir.join("stage2");
            let (reid_state, stage2) = train_reid_only(
                cfg,
                ncfg,
                weights,
                &stage2_set,
                &stage2_dir,
                observer,
                None,
            )?;
            Ok(TrainOutcome {
                run_dir: run_dir.to_path_buf(),
                stages: vec![stage1, stage2],
                joint: Some(joint_state),
                reid: Some(reid_state),
            })
        }
        TrainMode::DirectTransfer => {
            let (state, stage) = train_reid_only(
                cfg,
                ncfg,
                weights,
                source_train,
                run_dir,
                observer,
                None,
            )?;
            Ok(TrainOutcome {
                run_dir: run_dir.to_path_buf(),
                stages: vec![stage],
                joint: None,
                reid: Some(state),
            })
        }
    }
}

/// Resume a joint run from a checkpoint, writing outputs under `run_dir`.
/// Only the end-to-end mode supports resuming (the ablation stages are short).
pub fn resume_joint(
    cfg: &TrainConfig,
    ncfg: &NetworkConfig,
    weights: &LossWeights,
    source_train: &[LabeledImage],
    target_train: &[LabeledImage],
    run_dir: &Path,
    checkpoint: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let include_reid = matches!(cfg.mode, TrainMode::EdaanEndToEnd);
    let (state, stage) = train_joint(
        cfg,
        ncfg,
        weights,
        source_train,
        target_train,
        include_reid,
        run_dir,
        observer,
        Some(checkpoint),
    )?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        stages: vec![stage],
        joint: Some(state),
        reid: None,
    })
}
