//! Per-domain neuron masks.
//!
//! Each source domain `d` owns, for every masked layer, a real vector of
//! mask logits. Their sigmoid gives keep-probabilities; training samples
//! binary masks from those probabilities and routes gradients back to the
//! logits with the straight-through estimator. A pairwise soft-IoU penalty
//! (or an L1 sparsity alternative) acts on the probabilities directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor on the soft-IoU denominator so two all-zero masks score 0 instead of 0/0.
pub const SIOU_EPS: f64 = 1e-8;

/// Default discretization threshold for mask probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMaskSpec {
    /// Index of the task layer whose input is masked.
    pub layer_index: usize,
    /// Input width of that layer.
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskInit {
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl Default for MaskInit {
    fn default() -> Self {
        MaskInit::Uniform { lo: 0.0, hi: 1.0 }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mask_probs(params: &[f64]) -> Vec<f64> {
    params.iter().map(|&v| sigmoid(v)).collect()
}

/// Elementwise `a ⊙ m`. With a soft mask this is the test-time scaling.
pub fn apply_mask(activations: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if activations.len() != mask.len() {
        return Err(Error::shape("apply_mask", activations.len(), mask.len()));
    }
    Ok(activations.iter().zip(mask).map(|(a, m)| a * m).collect())
}

/// Straight-through gradient w.r.t. the mask logits.
///
/// Treats `∂L/∂m_sample` as `∂L/∂m_prob`, so the logit gradient is
/// `(∂L/∂â ⊙ a) ⊙ σ'(m̃)`.
pub fn straight_through_grad(grad_masked: &[f64], activations: &[f64], params: &[f64]) -> Result<Vec<f64>> {
    if grad_masked.len() != activations.len() || activations.len() != params.len() {
        return Err(Error::shape(
            "straight_through_grad",
            format!("equal lengths ({})", params.len()),
            format!("{} / {}", grad_masked.len(), activations.len()),
        ));
    }
    Ok(grad_masked
        .iter()
        .zip(activations)
        .zip(params)
        .map(|((g, a), &p)| {
            let s = sigmoid(p);
            g * a * s * (1.0 - s)
        })
        .collect())
}

fn check_probs(op: &'static str, m: &[f64]) -> Result<()> {
    match m.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&value) => Err(Error::Probability { op, value }),
        None => Ok(()),
    }
}

/// Soft intersection-over-union between two probability masks.
pub fn siou_pair(a: &[f64], b: &[f64]) -> Result<f64> {
    siou_pair_with_grad(a, b).map(|(s, _, _)| s)
}

/// Soft IoU plus its partial derivatives w.r.t. each entry of `a` and `b`.
pub fn siou_pair_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("siou_pair", format!("equal non-zero lengths ({})", a.len()), b.len()));
    }
    check_probs("siou_pair", a)?;
    check_probs("siou_pair", b)?;
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let raw_union: f64 = a.iter().zip(b).map(|(x, y)| x + y - x * y).sum();
    if raw_union < SIOU_EPS {
        let ga = b.iter().map(|&y| y / SIOU_EPS).collect();
        let gb = a.iter().map(|&x| x / SIOU_EPS).collect();
        return Ok((inter / SIOU_EPS, ga, gb));
    }
    let union = raw_union;
    let s = inter / union;
    let u2 = union * union;
    // ∂I/∂a_k = b_k, ∂U/∂a_k = 1 − b_k
    let ga = b.iter().map(|&y| (y * union - inter * (1.0 - y)) / u2).collect();
    let gb = a.iter().map(|&x| (x * union - inter * (1.0 - x)) / u2).collect();
    Ok((s, ga, gb))
}

/// Mask logits for every source domain and every masked layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBank {
    domains: Vec<String>,
    layers: Vec<LayerMaskSpec>,
    /// `params[d][l]` has length `layers[l].k`.
    params: Vec<Vec<Tensor>>,
}

/// Gradients shaped like a bank's parameters: `[domain][layer]`.
pub type MaskGrads = Vec<Vec<Tensor>>;

impl MaskBank {
    pub fn new(domains: Vec<String>, layers: Vec<LayerMaskSpec>, init: MaskInit, rng: &mut Rng) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Invalid("mask bank needs at least one domain".into()));
        }
        let params = domains
            .iter()
            .map(|_| {
                layers
                    .iter()
                    .map(|spec| {
                        let data = (0..spec.k)
                            .map(|_| match init {
                                MaskInit::Uniform { lo, hi } => rng.uniform_range(lo, hi),
                                MaskInit::Constant { value } => value,
                            })
                            .collect();
                        Tensor::vector(data)
                    })
                    .collect()
            })
            .collect();
        Ok(MaskBank { domains, layers, params })
    }

    /// Builds a bank from explicit logits `params[d][l]`.
    pub fn from_params(domains: Vec<String>, layers: Vec<LayerMaskSpec>, params: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let bank = MaskBank {
            domains,
            layers,
            params: params
                .into_iter()
                .map(|per| per.into_iter().map(Tensor::vector).collect())
                .collect(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Invalid("mask bank has no domains".into()));
        }
        if self.params.len() != self.domains.len() {
            return Err(Error::shape("MaskBank", self.domains.len(), self.params.len()));
        }
        for per in &self.params {
            if per.len() != self.layers.len() {
                return Err(Error::shape("MaskBank", self.layers.len(), per.len()));
            }
            for (t, spec) in per.iter().zip(&self.layers) {
                if t.len() != spec.k {
                    return Err(Error::shape("MaskBank", spec.k, t.len()));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite("mask parameters".into()));
                }
            }
        }
        Ok(())
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn layers(&self) -> &[LayerMaskSpec] {
        &self.layers
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_index(&self, id: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn params(&self, domain: usize, layer: usize) -> &[f64] {
        self.params[domain][layer].data()
    }

    pub fn params_mut(&mut self, domain: usize, layer: usize) -> &mut [f64] {
        self.params[domain][layer].data_mut()
    }

    /// Keep-probabilities `σ(m̃)` for one domain and layer.
    pub fn probs(&self, domain: usize, layer: usize) -> Vec<f64> {
        mask_probs(self.params(domain, layer))
    }

    /// Per-layer probabilities for one domain.
    pub fn domain_probs(&self, domain: usize) -> Vec<Vec<f64>> {
        (0..self.layers.len()).map(|l| self.probs(domain, l)).collect()
    }

    pub fn zero_grads(&self) -> MaskGrads {
        self.params
            .iter()
            .map(|per| per.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect()
    }

    /// Named parameter handles in `[domain][layer]` order, for the optimizer.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let domains = &self.domains;
        let layers = &self.layers;
        self.params
            .iter_mut()
            .zip(domains)
            .flat_map(|(per, d)| {
                per.iter_mut()
                    .zip(layers)
                    .map(move |(t, spec)| (format!("mask.{d}.layer{}", spec.layer_index), t))
            })
            .collect()
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten()
    }

    /// Sum of soft IoU over masked layers and unordered domain pairs, with
    /// its gradient w.r.t. every mask logit.
    pub fn siou_total(&self) -> Result<(f64, MaskGrads)> {
        let p = self.domains.len();
        if p < 2 {
            return Err(Error::Invalid(format!("soft IoU needs at least 2 domains, bank has {p}")));
        }
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for l in 0..self.layers.len() {
            let probs: Vec<Vec<f64>> = (0..p).map(|d| self.probs(d, l)).collect();
            let mut dprob: Vec<Vec<f64>> = probs.iter().map(|m| vec![0.0; m.len()]).collect();
            for i in 0..p {
                for j in i + 1..p {
                    let (s, gi, gj) = siou_pair_with_grad(&probs[i], &probs[j])?;
                    total += s;
                    for (acc, g) in dprob[i].iter_mut().zip(gi) {
                        *acc += g;
                    }
                    for (acc, g) in dprob[j].iter_mut().zip(gj) {
                        *acc += g;
                    }
                }
            }
            for d in 0..p {
                for ((g, &dp), &m) in grads[d][l].data_mut().iter_mut().zip(&dprob[d]).zip(&probs[d]) {
                    *g = dp * m * (1.0 - m);
                }
            }
        }
        Ok((total, grads))
    }

    /// Sum of all mask probabilities (L1 norm of the soft masks) with gradient.
    pub fn l1_penalty(&self) -> (f64, MaskGrads) {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for (per, gper) in self.params.iter().zip(grads.iter_mut()) {
            for (t, g) in per.iter().zip(gper.iter_mut()) {
                for (&v, gv) in t.data().iter().zip(g.data_mut()) {
                    let s = sigmoid(v);
                    total += s;
                    *gv = s * (1.0 - s);
                }
            }
        }
        (total, grads)
    }

    /// Entrywise mean of the domain probabilities, per layer.
    pub fn mean_soft_mask(&self) -> Vec<Vec<f64>> {
        let p = self.domains.len() as f64;
        (0..self.layers.len())
            .map(|l| {
                let mut acc = vec![0.0; self.layers[l].k];
                for d in 0..self.domains.len() {
                    for (a, v) in acc.iter_mut().zip(self.probs(d, l)) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= p);
                acc
            })
            .collect()
    }

    /// Binary masks for every domain and layer, `[domain][layer]`.
    pub fn discretized(&self, threshold: f64) -> Vec<Vec<Vec<f64>>> {
        (0..self.domains.len())
            .map(|d| {
                (0..self.layers.len())
                    .map(|l| discretize(&self.probs(d, l), threshold))
                    .collect()
            })
            .collect()
    }
}

/// Binary mask `1[m > threshold]` (strict).
pub fn discretize(probs: &[f64], threshold: f64) -> Vec<f64> {
    probs
        .iter()
        .map(|&m| if m > threshold { 1.0 } else { 0.0 })
        .collect()
}

fn check_binary(op: &'static str, m: &[f64]) -> Result<()> {
    match m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&value) => Err(Error::NotBinary { op, value }),
        None => Ok(()),
    }
}

/// Jaccard index of two binary masks; 0 when both are empty.
pub fn jaccard(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("jaccard", a.len(), b.len()));
    }
    check_binary("jaccard", a)?;
    check_binary("jaccard", b)?;
    let inter = a.iter().zip(b).filter(|(x, y)| **x == 1.0 && **y == 1.0).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x == 1.0 || **y == 1.0).count();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NeuronCategories {
    /// Off for every domain.
    pub useless: usize,
    /// On for every domain.
    pub shared: usize,
    /// On for some domains but not all.
    pub specific: usize,
}

/// Classifies each neuron of one layer from the binary masks of all domains.
pub fn neuron_categories(masks: &[Vec<f64>]) -> Result<NeuronCategories> {
    let Some(first) = masks.first() else {
        return Err(Error::Invalid("neuron_categories needs at least one mask".into()));
    };
    let k = first.len();
    for m in masks {
        if m.len() != k {
            return Err(Error::shape("neuron_categories", k, m.len()));
        }
        check_binary("neuron_categories", m)?;
    }
    let mut out = NeuronCategories::default();
    for j in 0..k {
        let on = masks.iter().filter(|m| m[j] == 1.0).count();
        if on == 0 {
            out.useless += 1;
        } else if on == masks.len() {
            out.shared += 1;
        } else {
            out.specific += 1;
        }
    }
    Ok(out)
}
