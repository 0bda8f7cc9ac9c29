//! Inference modes and analyses over trained checkpoints.
//!
//! Modes:
//! * `pred-ens`: average the class probabilities obtained under every
//!   source domain's soft mask.
//! * `mask-ens`: one prediction under the entrywise mean of the soft masks.
//! * `kd`: the soft mask of the (known) domain the data comes from.
//! * `single-mask:<d>`: domain `d`'s soft mask on every domain.
//! * `plain`: no masks (Aggregate); Multi-Headed averages its heads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DomainSuite, Split};
use crate::error::{Error, Result};
use crate::mask::{jaccard, neuron_categories, MaskBank, NeuronCategories, DEFAULT_THRESHOLD};
use crate::network::{HeadSel, LayerMask, Network};
use crate::ops::softmax;
use crate::tensor::Tensor;
use crate::train::{train, Checkpoint, TrainConfig};

pub const EVAL_REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InferenceMode {
    PredEns,
    MaskEns,
    Kd,
    SingleMask(String),
    Plain,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::PredEns => f.write_str("pred-ens"),
            InferenceMode::MaskEns => f.write_str("mask-ens"),
            InferenceMode::Kd => f.write_str("kd"),
            InferenceMode::SingleMask(d) => write!(f, "single-mask:{d}"),
            InferenceMode::Plain => f.write_str("plain"),
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pred-ens" => Ok(InferenceMode::PredEns),
            "mask-ens" => Ok(InferenceMode::MaskEns),
            "kd" => Ok(InferenceMode::Kd),
            "plain" => Ok(InferenceMode::Plain),
            other => match other.strip_prefix("single-mask:") {
                Some(d) if !d.is_empty() => Ok(InferenceMode::SingleMask(d.to_string())),
                _ => Err(Error::Invalid(format!(
                    "unknown inference mode `{other}` (expected pred-ens, mask-ens, kd, single-mask:<domain>, plain)"
                ))),
            },
        }
    }
}

impl Serialize for InferenceMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InferenceMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn soft_masks(bank: &MaskBank, d: usize) -> Vec<LayerMask> {
    bank.domain_probs(d).into_iter().map(LayerMask::Shared).collect()
}

fn logits_under(net: &Network, x: &Tensor, masks: &[LayerMask]) -> Result<Tensor> {
    Ok(net.forward(x, masks, HeadSel::Single)?.0)
}

fn require_bank(bank: Option<&MaskBank>) -> Result<&MaskBank> {
    bank.ok_or_else(|| Error::Invalid("this inference mode needs a trained mask bank".into()))
}

/// Class probabilities under domain `domain`'s soft mask.
pub fn predict_kd(net: &Network, bank: &MaskBank, x: &Tensor, domain: &str) -> Result<Tensor> {
    let d = bank.domain_index(domain)?;
    softmax(&logits_under(net, x, &soft_masks(bank, d))?)
}

/// Mean over source domains of the soft-masked predictions. With
/// `logit_average` the logits are averaged before a single softmax.
pub fn predict_pred_ens(net: &Network, bank: &MaskBank, x: &Tensor, logit_average: bool) -> Result<Tensor> {
    let p = bank.num_domains();
    if p == 0 {
        return Err(Error::Invalid("empty mask bank".into()));
    }
    let mut acc = Tensor::zeros(&[x.rows(), net.classes()]);
    for d in 0..p {
        let logits = logits_under(net, x, &soft_masks(bank, d))?;
        let part = if logit_average { logits } else { softmax(&logits)? };
        for (a, v) in acc.data_mut().iter_mut().zip(part.data()) {
            *a += v;
        }
    }
    acc.data_mut().iter_mut().for_each(|v| *v /= p as f64);
    if logit_average {
        softmax(&acc)
    } else {
        Ok(acc)
    }
}

/// One prediction under the mean soft mask.
pub fn predict_mask_ens(net: &Network, bank: &MaskBank, x: &Tensor) -> Result<Tensor> {
    if bank.num_domains() == 0 {
        return Err(Error::Invalid("empty mask bank".into()));
    }
    let masks: Vec<LayerMask> = bank.mean_soft_mask().into_iter().map(LayerMask::Shared).collect();
    softmax(&logits_under(net, x, &masks)?)
}

/// Dispatches on `mode`. `data_domain` is the known domain of `x`, used by `kd`.
pub fn predict(
    net: &Network,
    bank: Option<&MaskBank>,
    x: &Tensor,
    mode: &InferenceMode,
    data_domain: Option<&str>,
    logit_average: bool,
) -> Result<Tensor> {
    match mode {
        InferenceMode::Plain => {
            let masks = vec![LayerMask::Identity; net.task.len()];
            net.predict_proba(x, &masks)
        }
        InferenceMode::PredEns => predict_pred_ens(net, require_bank(bank)?, x, logit_average),
        InferenceMode::MaskEns => predict_mask_ens(net, require_bank(bank)?, x),
        InferenceMode::Kd => {
            let d = data_domain.ok_or_else(|| Error::Invalid("kd needs the domain of the data".into()))?;
            predict_kd(net, require_bank(bank)?, x, d)
        }
        InferenceMode::SingleMask(d) => predict_kd(net, require_bank(bank)?, x, d),
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (correct, total) = correct_count(probs, labels)?;
    if total == 0 {
        return Err(Error::Invalid("accuracy over zero rows".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn correct_count(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("accuracy", probs.rows(), labels.len()));
    }
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok((correct, labels.len()))
}

fn split_accuracy(
    net: &Network,
    bank: Option<&MaskBank>,
    suite: &DomainSuite,
    domain: &str,
    split: Split,
    mode: &InferenceMode,
    logit_average: bool,
) -> Result<f64> {
    let ds = suite.domain(domain)?;
    let (x, y) = ds.subset(split);
    if y.is_empty() {
        return Err(Error::Invalid(format!("{domain} has an empty {split:?} split")));
    }
    let probs = predict(net, bank, &x, mode, Some(domain), logit_average)?;
    accuracy(&probs, &y)
}

/// Test accuracy of `mode` on one domain.
pub fn test_accuracy(ckpt: &Checkpoint, suite: &DomainSuite, domain: &str, mode: &InferenceMode, logit_average: bool) -> Result<f64> {
    split_accuracy(&ckpt.network, ckpt.mask_bank.as_ref(), suite, domain, Split::Test, mode, logit_average)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationTable {
    /// Row labels: the domain whose mask is applied.
    pub mask_domains: Vec<String>,
    /// Column labels: the domain whose test split is scored (sources then targets).
    pub data_domains: Vec<String>,
    /// `values[i][j]`: accuracy on `data_domains[j]` under `mask_domains[i]`.
    pub values: Vec<Vec<f64>>,
    /// Pred-ens accuracy per data domain.
    pub combined: Vec<f64>,
}

impl SpecializationTable {
    /// For each source column: matched-mask accuracy and the best mismatched one.
    pub fn diagonal_gaps(&self) -> Vec<(String, f64, f64)> {
        self.mask_domains
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                let j = self.data_domains.iter().position(|c| c == d)?;
                let matched = self.values[i][j];
                let best_other = (0..self.mask_domains.len())
                    .filter(|&k| k != i)
                    .map(|k| self.values[k][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                Some((d.clone(), matched, best_other))
            })
            .collect()
    }
}

pub fn specialization_table(net: &Network, bank: &MaskBank, suite: &DomainSuite) -> Result<SpecializationTable> {
    let data_domains: Vec<String> = suite.domains().map(|d| d.domain_id.clone()).collect();
    let mut values = Vec::with_capacity(bank.num_domains());
    for mask_domain in bank.domains() {
        let mode = InferenceMode::SingleMask(mask_domain.clone());
        let row = data_domains
            .iter()
            .map(|d| split_accuracy(net, Some(bank), suite, d, Split::Test, &mode, false))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    let combined = data_domains
        .iter()
        .map(|d| split_accuracy(net, Some(bank), suite, d, Split::Test, &InferenceMode::PredEns, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpecializationTable {
        mask_domains: bank.domains().to_vec(),
        data_domains,
        values,
        combined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIou {
    pub layer_index: usize,
    pub k: usize,
    /// `p × p` Jaccard matrix of the discretized masks; unit diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over unordered domain pairs.
    pub mean: f64,
    pub categories: NeuronCategories,
    /// Fraction of neurons kept, per domain.
    pub on_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub threshold: f64,
    pub domains: Vec<String>,
    pub per_layer: Vec<LayerIou>,
    /// Mean of the per-layer pairwise means.
    pub overall: f64,
    /// Fraction of all mask entries kept, over domains and layers.
    pub on_fraction: f64,
}

pub fn iou_report(bank: &MaskBank, threshold: f64) -> Result<IouReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let disc = bank.discretized(threshold);
    let p = bank.num_domains();
    let mut per_layer = Vec::with_capacity(bank.layers().len());
    let (mut on_total, mut entries) = (0.0, 0usize);
    for (l, spec) in bank.layers().iter().enumerate() {
        let masks: Vec<Vec<f64>> = (0..p).map(|d| disc[d][l].clone()).collect();
        let mut matrix = vec![vec![1.0; p]; p];
        let mut pair_sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..p {
            for j in i + 1..p {
                let v = jaccard(&masks[i], &masks[j])?;
                matrix[i][j] = v;
                matrix[j][i] = v;
                pair_sum += v;
                pairs += 1;
            }
        }
        let on_fraction: Vec<f64> = masks
            .iter()
            .map(|m| m.iter().sum::<f64>() / spec.k as f64)
            .collect();
        on_total += masks.iter().flatten().sum::<f64>();
        entries += p * spec.k;
        per_layer.push(LayerIou {
            layer_index: spec.layer_index,
            k: spec.k,
            matrix,
            mean: if pairs == 0 { 1.0 } else { pair_sum / pairs as f64 },
            categories: neuron_categories(&masks)?,
            on_fraction,
        });
    }
    let overall = if per_layer.is_empty() {
        1.0
    } else {
        per_layer.iter().map(|l| l.mean).sum::<f64>() / per_layer.len() as f64
    };
    Ok(IouReport {
        threshold,
        domains: bank.domains().to_vec(),
        per_layer,
        overall,
        on_fraction: if entries == 0 { 0.0 } else { on_total / entries as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub modes: Vec<InferenceMode>,
    pub threshold: f64,
    /// Average logits instead of probabilities in pred-ens.
    pub logit_average: bool,
    /// Include the mask × domain accuracy matrix.
    pub specialization: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            modes: vec![InferenceMode::PredEns, InferenceMode::MaskEns, InferenceMode::Kd],
            threshold: DEFAULT_THRESHOLD,
            logit_average: false,
            specialization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainResult {
    pub role: crate::data::Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_acc: Option<f64>,
    pub per_mode: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub hash: String,
    pub config_hash: String,
    pub suite_hash: String,
    pub method: crate::train::Method,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    /// The resolved run configuration, filled in by the caller.
    pub config: serde_json::Value,
    pub seed: u64,
    pub checkpoint: CheckpointInfo,
    pub primary_mode: InferenceMode,
    pub per_domain: BTreeMap<String, DomainResult>,
    pub mean_in_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_out_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<IouReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeMap<String, NeuronCategories>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specialization_matrix: Option<SpecializationTable>,
    pub wall_time_s: f64,
}

/// Evaluates a checkpoint on every domain of `suite`.
///
/// Refuses when the suite is not the one the checkpoint was trained on.
pub fn evaluate(ckpt: &Checkpoint, suite: &DomainSuite, cfg: &EvalConfig) -> Result<EvalReport> {
    let started = std::time::Instant::now();
    let fp = suite.fingerprint();
    if fp != ckpt.suite_hash {
        return Err(Error::Invalid(format!(
            "checkpoint was trained on suite {} but this suite hashes to {}; refusing to evaluate",
            ckpt.suite_hash, fp
        )));
    }
    let bank = ckpt.mask_bank.as_ref();
    let primary = ckpt.default_mode();
    let mut modes: Vec<InferenceMode> = vec![primary.clone()];
    for m in &cfg.modes {
        let usable = match m {
            InferenceMode::Plain => bank.is_none(),
            _ => bank.is_some(),
        };
        if usable && !modes.contains(m) {
            modes.push(m.clone());
        }
    }
    if let (Some(bank), Some(InferenceMode::SingleMask(d))) = (bank, modes.iter().find(|m| matches!(m, InferenceMode::SingleMask(_)))) {
        bank.domain_index(d)?;
    }

    let mut per_domain = BTreeMap::new();
    let (mut in_sum, mut out_sum, mut n_out) = (0.0, 0.0, 0usize);
    for ds in suite.domains() {
        let is_source = suite.is_source(&ds.domain_id);
        let mut per_mode = BTreeMap::new();
        for m in &modes {
            if *m == InferenceMode::Kd && !is_source {
                continue;
            }
            let acc = test_accuracy(ckpt, suite, &ds.domain_id, m, cfg.logit_average)?;
            per_mode.insert(m.to_string(), acc);
        }
        let head = per_mode[&primary.to_string()];
        let result = if is_source {
            in_sum += head;
            DomainResult { role: crate::data::Role::Source, in_acc: Some(head), out_acc: None, per_mode }
        } else {
            out_sum += head;
            n_out += 1;
            DomainResult { role: crate::data::Role::Target, in_acc: None, out_acc: Some(head), per_mode }
        };
        per_domain.insert(ds.domain_id.clone(), result);
    }

    let iou = bank.map(|b| iou_report(b, cfg.threshold)).transpose()?;
    let categories = iou.as_ref().map(|r| {
        r.per_layer
            .iter()
            .map(|l| (format!("layer{}", l.layer_index), l.categories))
            .collect()
    });
    let specialization_matrix = match bank {
        Some(b) if cfg.specialization => Some(specialization_table(&ckpt.network, b, suite)?),
        _ => None,
    };
    Ok(EvalReport {
        schema_version: EVAL_REPORT_VERSION,
        config: serde_json::Value::Null,
        seed: ckpt.config.seed,
        checkpoint: CheckpointInfo {
            hash: ckpt.hash(),
            config_hash: ckpt.config_hash.clone(),
            suite_hash: ckpt.suite_hash.clone(),
            method: ckpt.config.method,
            epoch: ckpt.epoch,
        },
        primary_mode: primary,
        per_domain,
        mean_in_acc: in_sum / suite.sources.len() as f64,
        mean_out_acc: (n_out > 0).then(|| out_sum / n_out as f64),
        iou,
        categories,
        specialization_matrix,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "lambda_O")]
    LambdaO,
    #[serde(rename = "lambda_S")]
    LambdaS,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_O" | "lambda_o" => Ok(SweepParam::LambdaO),
            "lambda_S" | "lambda_s" => Ok(SweepParam::LambdaS),
            other => Err(Error::Invalid(format!("unknown sweep parameter `{other}` (expected lambda_O or lambda_S)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::LambdaO => "lambda_O",
            SweepParam::LambdaS => "lambda_S",
        })
    }
}

/// The default λ grid: 0 then decades from 1e-5 to 1.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
}

impl SweepParam {
    /// `base` with this parameter set to `value` and the other incentive off.
    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::LambdaO => {
                cfg.lambda_o = value;
                cfg.lambda_s = 0.0;
            }
            SweepParam::LambdaS => {
                cfg.lambda_s = value;
                cfg.lambda_o = 0.0;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub in_acc: Option<f64>,
    pub out_acc: Option<f64>,
    pub mean_iou: Option<f64>,
    pub on_fraction: Option<f64>,
    pub error: Option<String>,
}

/// One run's outputs, kept so callers can persist per-run artifacts.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub row: SweepRow,
    pub checkpoint: Option<Checkpoint>,
    pub train_report: Option<crate::train::TrainReport>,
    pub eval_report: Option<EvalReport>,
}

fn sweep_one(param: SweepParam, base: &TrainConfig, value: f64, suite: &DomainSuite, eval: &EvalConfig) -> SweepRun {
    let cfg = param.apply(base, value);
    let outcome = train(&cfg, suite).and_then(|(ckpt, report)| {
        let ev = evaluate(&ckpt, suite, eval)?;
        Ok((ckpt, report, ev))
    });
    match outcome {
        Ok((ckpt, report, ev)) => SweepRun {
            row: SweepRow {
                lambda: value,
                in_acc: Some(ev.mean_in_acc),
                out_acc: ev.mean_out_acc,
                mean_iou: ev.iou.as_ref().map(|r| r.overall),
                on_fraction: ev.iou.as_ref().map(|r| r.on_fraction),
                error: None,
            },
            checkpoint: Some(ckpt),
            train_report: Some(report),
            eval_report: Some(ev),
        },
        Err(e) => SweepRun {
            row: SweepRow {
                lambda: value,
                in_acc: None,
                out_acc: None,
                mean_iou: None,
                on_fraction: None,
                error: Some(e.to_string()),
            },
            checkpoint: None,
            train_report: None,
            eval_report: None,
        },
    }
}

/// Trains and evaluates one run per value, `jobs` at a time. Rows come
/// back in input order; a failed run is recorded in its row.
pub fn lambda_sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    suite: &DomainSuite,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    if jobs <= 1 {
        return Ok(values.iter().map(|&v| sweep_one(param, base, v, suite, eval)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        values
            .par_iter()
            .map(|&v| sweep_one(param, base, v, suite, eval))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{LayerMaskSpec, MaskInit};
    use crate::network::NetworkSpec;
    use crate::rng::Rng;

    fn net_and_bank(domains: usize, logits: Option<Vec<f64>>) -> (Network, MaskBank, Tensor) {
        let mut rng = Rng::new(21);
        let spec = NetworkSpec {
            input_dim: 3,
            feature_widths: vec![5],
            task_widths: vec![4, 3],
            heads: 0,
            final_init_std: 0.5,
        };
        let net = Network::new(&spec, &mut rng).unwrap();
        let ids: Vec<String> = (0..domains).map(|d| format!("d{d}")).collect();
        let bank = match logits {
            Some(l) => {
                let layers = net.mask_specs();
                let params = (0..domains)
                    .map(|_| layers.iter().map(|s| l[..s.k].to_vec()).collect())
                    .collect();
                MaskBank::from_params(ids, layers, params).unwrap()
            }
            None => MaskBank::new(ids, net.mask_specs(), MaskInit::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).unwrap(),
        };
        let mut x = Tensor::zeros(&[6, 3]);
        for v in x.data_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        (net, bank, x)
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn modes_parse_and_print() {
        for s in ["pred-ens", "mask-ens", "kd", "plain", "single-mask:src1"] {
            assert_eq!(s.parse::<InferenceMode>().unwrap().to_string(), s);
        }
        assert!("ensemble".parse::<InferenceMode>().is_err());
        assert!("single-mask:".parse::<InferenceMode>().is_err());
    }

    #[test]
    fn single_domain_modes_coincide() {
        let (net, bank, x) = net_and_bank(1, None);
        let kd = predict_kd(&net, &bank, &x, "d0").unwrap();
        assert!(max_diff(&kd, &predict_pred_ens(&net, &bank, &x, false).unwrap()) < 1e-15);
        assert!(max_diff(&kd, &predict_mask_ens(&net, &bank, &x).unwrap()) < 1e-15);
    }

    #[test]
    fn identical_masks_coincide() {
        let (net, bank, x) = net_and_bank(3, Some(vec![0.4, -1.3, 2.0, 0.1, -0.2]));
        let kd = predict_kd(&net, &bank, &x, "d1").unwrap();
        assert!(max_diff(&kd, &predict_pred_ens(&net, &bank, &x, false).unwrap()) < 1e-12);
        assert!(max_diff(&kd, &predict_mask_ens(&net, &bank, &x).unwrap()) < 1e-12);
        assert!(predict_kd(&net, &bank, &x, "nope").is_err());
    }

    #[test]
    fn all_on_masks_equal_unmasked() {
        let (net, bank, x) = net_and_bank(2, Some(vec![1e3; 5]));
        let plain = predict(&net, None, &x, &InferenceMode::Plain, None, false).unwrap();
        assert!(max_diff(&plain, &predict_mask_ens(&net, &bank, &x).unwrap()) < 1e-15);
    }

    #[test]
    fn logit_average_differs_but_is_a_distribution() {
        let (net, bank, x) = net_and_bank(3, None);
        let p = predict_pred_ens(&net, &bank, &x, true).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_ties_pick_lowest_index() {
        let probs = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        assert_eq!(accuracy(&probs, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, &[1, 1]).unwrap(), 0.5);
    }

    fn bank_from_binary(masks: Vec<Vec<f64>>) -> MaskBank {
        let k = masks[0].len();
        let ids = (0..masks.len()).map(|d| format!("d{d}")).collect();
        let params = masks
            .into_iter()
            .map(|m| vec![m.into_iter().map(|v| if v == 1.0 { 10.0 } else { -10.0 }).collect()])
            .collect();
        MaskBank::from_params(ids, vec![LayerMaskSpec { layer_index: 0, k }], params).unwrap()
    }

    #[test]
    fn iou_report_extremes() {
        let same = bank_from_binary(vec![vec![1.0, 0.0, 1.0]; 3]);
        let r = iou_report(&same, 0.5).unwrap();
        assert!(r.per_layer[0].matrix.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(r.overall, 1.0);

        let disjoint = bank_from_binary(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let r = iou_report(&disjoint, 0.5).unwrap();
        assert_eq!(r.overall, 0.0);
        let l = &r.per_layer[0];
        for i in 0..3 {
            assert_eq!(l.matrix[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(l.matrix[i][j], l.matrix[j][i]);
            }
        }
        assert_eq!(l.categories, NeuronCategories { useless: 0, shared: 0, specific: 3 });
        assert!((r.on_fraction - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou_report(&same, 1.0).is_err());
    }

    #[test]
    fn sweep_rejects_empty_values() {
        let suite = crate::data::generate(&crate::data::SyntheticSpec { n_per_domain: 20, ..Default::default() }).unwrap();
        let err = lambda_sweep(&TrainConfig::default(), SweepParam::LambdaO, &[], &suite, &EvalConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("at least one value"));
        assert!("lambda_X".parse::<SweepParam>().is_err());
    }
}
