//! Training loops for DMG and the Aggregate / Multi-Headed baselines.
//!
//! All three methods share one loop over pooled source-domain batches.
//! DMG samples a binary mask per instance from that instance's domain,
//! backpropagates the batch-mean cross-entropy through the hard masks to
//! the network and through the straight-through path to the mask logits,
//! and adds `λ_O · sIoU` (or `λ_S · L1`) once per optimizer step.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DomainSuite, Split};
use crate::error::{Error, Result};
use crate::eval::{accuracy, predict, InferenceMode};
use crate::mask::{MaskBank, MaskGrads, MaskInit};
use crate::network::{mask_grads, sample_row_masks, HeadSel, LayerMask, Network, NetworkSpec};
use crate::ops::softmax_xent;
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dmg,
    Aggregate,
    Multiheaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// A fresh mask for every instance.
    #[default]
    PerInstance,
    /// One mask per domain shared by that domain's rows in a batch.
    PerDomainBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_o: f64,
    pub lambda_s: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Multiplier on the network learning rate for mask logits.
    pub mask_lr_scale: f64,
    /// L2 coefficient added to network gradients.
    pub weight_decay: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub final_init_std: f64,
    pub feature_widths: Vec<usize>,
    /// Hidden widths of the task network; the class layer is appended.
    pub task_hidden: Vec<usize>,
    pub mask_init: MaskInit,
    /// Interleave domains within each epoch instead of a plain shuffle.
    pub balanced_batches: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Dmg,
            lambda_o: 0.1,
            lambda_s: 0.0,
            epochs: 50,
            batch_size: 64,
            schedule: LrSchedule::Inverse {
                lr0: 1e-3,
                gamma: 1e-4,
                power: 0.75,
            },
            mask_lr_scale: 10.0,
            weight_decay: 0.0,
            seed: 0,
            sampling: SamplingMode::PerInstance,
            final_init_std: 1e-3,
            feature_widths: vec![256],
            task_hidden: vec![128, 64],
            mask_init: MaskInit::Uniform { lo: 0.0, hi: 1.0 },
            balanced_batches: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lambda_o >= 0.0 && self.lambda_s >= 0.0) || !self.lambda_o.is_finite() || !self.lambda_s.is_finite() {
            return bad(format!("lambdas must be finite and >= 0 (lambda_o={}, lambda_s={})", self.lambda_o, self.lambda_s));
        }
        if self.lambda_o > 0.0 && self.lambda_s > 0.0 {
            return bad("at most one of lambda_o and lambda_s may be non-zero".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.mask_lr_scale > 0.0) || !(self.weight_decay >= 0.0) || !(self.final_init_std >= 0.0) {
            return bad("mask_lr_scale must be > 0; weight_decay and final_init_std >= 0".into());
        }
        self.schedule.validate()
    }

    pub fn network_spec(&self, input_dim: usize, classes: usize, sources: usize) -> NetworkSpec {
        let mut task_widths = self.task_hidden.clone();
        task_widths.push(classes);
        NetworkSpec {
            input_dim,
            feature_widths: self.feature_widths.clone(),
            task_widths,
            heads: if self.method == Method::Multiheaded { sources } else { 0 },
            final_init_std: self.final_init_std,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A mini-batch of pooled source instances with domain tags.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Source-domain index of every row.
    pub domains: Vec<usize>,
}

/// How the masks of a loss evaluation are produced.
#[derive(Debug, Clone, Copy)]
pub enum MaskDraw {
    Sampled(SamplingMode),
    /// Probabilities substituted for samples: the smooth relaxation.
    Soft,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub class_loss: f64,
    /// `λ_O · sIoU + λ_S · L1`.
    pub penalty: f64,
    pub net_grads: Network,
    pub mask_grads: Option<MaskGrads>,
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Batch-mean cross-entropy plus the mask penalties, with gradients for
/// the network and (when a bank is given) every mask logit.
pub fn loss_total(
    net: &Network,
    bank: Option<&MaskBank>,
    batch: &Batch,
    lambda_o: f64,
    lambda_s: f64,
    draw: MaskDraw,
    rng: &mut Rng,
) -> Result<LossOutput> {
    let n = batch.y.len();
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch.domains.len() != n || batch.x.rows() != n {
        return Err(Error::shape("loss_total", n, batch.domains.len()));
    }
    let n_domains = match (bank, net.is_multi_head()) {
        (Some(b), _) => Some(b.num_domains()),
        (None, true) => Some(net.heads.len()),
        (None, false) => None,
    };
    if let (Some(limit), Some(&bad)) = (n_domains, batch.domains.iter().max()) {
        if bad >= limit {
            return Err(Error::UnknownDomain(format!("domain index {bad}")));
        }
    }

    let masks: Vec<LayerMask> = match bank {
        None => vec![LayerMask::Identity; net.task.len()],
        Some(bank) => match draw {
            MaskDraw::Sampled(SamplingMode::PerInstance) => sample_row_masks(bank, &batch.domains, rng),
            MaskDraw::Sampled(SamplingMode::PerDomainBatch) => {
                let per_domain: Vec<Vec<LayerMask>> = (0..bank.num_domains())
                    .map(|d| sample_row_masks(bank, &[d], rng))
                    .collect();
                expand_rows(bank, &batch.domains, |d, l| match &per_domain[d][l] {
                    LayerMask::PerRow(t) => t.data().to_vec(),
                    _ => unreachable!("sample_row_masks yields per-row masks"),
                })
            }
            MaskDraw::Soft => expand_rows(bank, &batch.domains, |d, l| bank.probs(d, l)),
        },
    };
    let heads = if net.is_multi_head() {
        HeadSel::PerRow(&batch.domains)
    } else {
        HeadSel::Single
    };
    let (logits, cache) = net.forward(&batch.x, &masks, heads)?;
    let (class_loss, grad_logits) = softmax_xent(&logits, &batch.y)?;
    check_finite("classification loss", class_loss)?;
    let (net_grads, grad_masked) = net.backward(&cache, &grad_logits)?;

    let mut penalty = 0.0;
    let mut mgrads = None;
    if let Some(bank) = bank {
        let mut g = mask_grads(bank, &cache, &grad_masked, &batch.domains)?;
        if lambda_o > 0.0 {
            let (s, sg) = bank.siou_total()?;
            check_finite("soft-IoU penalty", s)?;
            penalty += lambda_o * s;
            add_scaled(&mut g, &sg, lambda_o);
        }
        if lambda_s > 0.0 {
            let (s, sg) = bank.l1_penalty();
            check_finite("L1 mask penalty", s)?;
            penalty += lambda_s * s;
            add_scaled(&mut g, &sg, lambda_s);
        }
        mgrads = Some(g);
    }
    let total = class_loss + penalty;
    check_finite("total loss", total)?;
    Ok(LossOutput {
        total,
        class_loss,
        penalty,
        net_grads,
        mask_grads: mgrads,
    })
}

fn expand_rows(bank: &MaskBank, domains: &[usize], row_mask: impl Fn(usize, usize) -> Vec<f64>) -> Vec<LayerMask> {
    bank.layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let per_domain: Vec<Vec<f64>> = (0..bank.num_domains()).map(|d| row_mask(d, l)).collect();
            let mut t = Tensor::zeros(&[domains.len(), spec.k]);
            for (r, &d) in domains.iter().enumerate() {
                t.row_mut(r).copy_from_slice(&per_domain[d]);
            }
            LayerMask::PerRow(t)
        })
        .collect()
}

fn add_scaled(acc: &mut MaskGrads, g: &MaskGrads, scale: f64) {
    for (a, b) in acc.iter_mut().flatten().zip(g.iter().flatten()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += scale * y;
        }
    }
}

/// Epoch (1-based) with the highest value; ties go to the earliest.
pub fn select_checkpoint(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::Invalid("cannot select a checkpoint from an empty history".into()));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub suite_hash: String,
    pub config: TrainConfig,
    /// Source-domain ids in training order.
    pub domains: Vec<String>,
    pub epoch: usize,
    pub val_acc: f64,
    pub network: Network,
    pub mask_bank: Option<MaskBank>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint format_version {}", ckpt.format_version)));
        }
        if let Some(bank) = &ckpt.mask_bank {
            bank.validate()?;
        }
        if !ckpt.network.all_finite() {
            return Err(Error::NonFinite("checkpoint network parameters".into()));
        }
        Ok(ckpt)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Inference mode used for validation and headline in-domain accuracy.
    pub fn default_mode(&self) -> InferenceMode {
        if self.mask_bank.is_some() {
            InferenceMode::PredEns
        } else {
            InferenceMode::Plain
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over steps of the batch classification loss.
    pub class_loss: f64,
    /// Mean over steps of the weighted mask penalty.
    pub penalty: f64,
    pub val_acc: BTreeMap<String, f64>,
    pub mean_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub suite_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selected_val_acc: f64,
    pub wall_time_s: f64,
}

struct Pooled {
    x: Tensor,
    y: Vec<usize>,
    domains: Vec<usize>,
}

fn pool_sources(suite: &DomainSuite) -> Result<Pooled> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut domains = Vec::new();
    for (d, ds) in suite.sources.iter().enumerate() {
        for i in ds.indices(Split::Train) {
            rows.extend_from_slice(ds.x.row(i));
            y.push(ds.y[i]);
            domains.push(d);
        }
    }
    if y.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    Ok(Pooled {
        x: Tensor::new(vec![y.len(), suite.dim], rows)?,
        y,
        domains,
    })
}

fn epoch_order(pooled: &Pooled, n_domains: usize, balanced: bool, rng: &mut Rng) -> Vec<usize> {
    if !balanced {
        let mut order: Vec<usize> = (0..pooled.y.len()).collect();
        rng.shuffle(&mut order);
        return order;
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); n_domains];
    for (i, &d) in pooled.domains.iter().enumerate() {
        per[d].push(i);
    }
    for p in &mut per {
        rng.shuffle(p);
    }
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|j| per.iter().filter_map(move |p| p.get(j).copied()))
        .collect()
}

/// Mean over source domains of validation accuracy, plus the per-domain map.
pub fn validation_accuracy(net: &Network, bank: Option<&MaskBank>, suite: &DomainSuite) -> Result<(f64, BTreeMap<String, f64>)> {
    let mode = if bank.is_some() { InferenceMode::PredEns } else { InferenceMode::Plain };
    let mut per = BTreeMap::new();
    let mut sum = 0.0;
    for ds in &suite.sources {
        let (x, y) = ds.subset(Split::Val);
        let acc = if y.is_empty() {
            0.0
        } else {
            let probs = predict(net, bank, &x, &mode, Some(&ds.domain_id), false)?;
            accuracy(&probs, &y)?
        };
        sum += acc;
        per.insert(ds.domain_id.clone(), acc);
    }
    Ok((sum / suite.sources.len() as f64, per))
}

/// Trains `config.method` on the suite's source domains and returns the
/// checkpoint with the best mean in-domain validation accuracy.
pub fn train(config: &TrainConfig, suite: &DomainSuite) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let p = suite.sources.len();
    if config.method == Method::Dmg && p < 2 {
        return Err(Error::Invalid(format!("dmg needs at least 2 source domains, suite has {p}")));
    }
    let pooled = pool_sources(suite)?;

    let spec = config.network_spec(suite.dim, suite.classes, p);
    let mut net = Network::new(&spec, &mut Rng::stream(config.seed, streams::NET_INIT))?;
    let mut bank = if config.method == Method::Dmg {
        Some(MaskBank::new(
            suite.source_ids(),
            net.mask_specs(),
            config.mask_init,
            &mut Rng::stream(config.seed, streams::MASK_INIT),
        )?)
    } else {
        None
    };
    let mut shuffle_rng = Rng::stream(config.seed, streams::SHUFFLE);
    let mut sample_rng = Rng::stream(config.seed, streams::MASK_SAMPLE);
    let mut net_opt = AdamState::new(config.adam, net.tensors());
    let mut mask_opt = bank.as_ref().map(|b| AdamState::new(config.adam, b.param_tensors()));

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Network, Option<MaskBank>, usize)> = None;
    for epoch in 1..=config.epochs {
        let lr = config.schedule.lr_at(epoch)?;
        let order = epoch_order(&pooled, p, config.balanced_batches, &mut shuffle_rng);
        let (mut class_sum, mut pen_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                x: pooled.x.select_rows(chunk),
                y: chunk.iter().map(|&i| pooled.y[i]).collect(),
                domains: chunk.iter().map(|&i| pooled.domains[i]).collect(),
            };
            let out = loss_total(
                &net,
                bank.as_ref(),
                &batch,
                config.lambda_o,
                config.lambda_s,
                MaskDraw::Sampled(config.sampling),
                &mut sample_rng,
            )?;
            class_sum += out.class_loss;
            pen_sum += out.penalty;
            steps += 1;

            let mut grads = out.net_grads;
            if config.weight_decay > 0.0 {
                for (g, w) in grads.tensors_mut().into_iter().zip(net.tensors()) {
                    for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
                        *gv += config.weight_decay * wv;
                    }
                }
            }
            net_opt.step(&mut net.named_params_mut(), &grads.tensors(), lr)?;
            if let (Some(bank), Some(opt), Some(mg)) = (bank.as_mut(), mask_opt.as_mut(), out.mask_grads.as_ref()) {
                let g: Vec<&Tensor> = mg.iter().flatten().collect();
                opt.step(&mut bank.named_params_mut(), &g, lr * config.mask_lr_scale)?;
            }
        }
        let (mean_val, per_val) = validation_accuracy(&net, bank.as_ref(), suite)?;
        records.push(EpochRecord {
            epoch,
            lr,
            class_loss: class_sum / steps as f64,
            penalty: pen_sum / steps as f64,
            val_acc: per_val,
            mean_val_acc: mean_val,
        });
        if best.as_ref().is_none_or(|(v, ..)| mean_val > *v) {
            best = Some((mean_val, net.clone(), bank.clone(), epoch));
        }
    }

    let history: Vec<f64> = records.iter().map(|r| r.mean_val_acc).collect();
    let selected = select_checkpoint(&history)?;
    let (val_acc, best_net, best_bank, best_epoch) = best.expect("at least one epoch");
    debug_assert_eq!(best_epoch, selected);
    let config_hash = config.hash();
    let suite_hash = suite.fingerprint();
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.clone(),
        suite_hash: suite_hash.clone(),
        config: config.clone(),
        domains: suite.source_ids(),
        epoch: selected,
        val_acc,
        network: best_net,
        mask_bank: best_bank,
    };
    let report = TrainReport {
        schema_version: REPORT_VERSION,
        config: config.clone(),
        seed: config.seed,
        config_hash,
        suite_hash,
        epochs: records,
        selected_epoch: selected,
        selected_val_acc: val_acc,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}
