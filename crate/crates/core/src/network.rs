//! The MLP backbone: an unmasked feature extractor followed by a task
//! network whose layer inputs can be masked per domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerMaskSpec, MaskBank};
use crate::ops::{dense_backward, dense_forward, relu, relu_backward, softmax};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An affine layer; also used to hold its gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    /// He-uniform weights, zero bias.
    fn uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Dense {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        for v in w.data_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
        Dense { w, b: Tensor::zeros(&[fan_out]) }
    }

    fn normal(fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Dense {
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        for v in w.data_mut() {
            *v = rng.normal(0.0, std);
        }
        Dense { w, b: Tensor::zeros(&[fan_out]) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Widths of the ReLU feature layers.
    pub feature_widths: Vec<usize>,
    /// Output widths of the task layers; the last one is the class count.
    pub task_widths: Vec<usize>,
    /// Number of classifier heads; 0 means a single shared final layer.
    pub heads: usize,
    /// Std of the zero-mean normal init of the final layer(s).
    pub final_init_std: f64,
}

impl NetworkSpec {
    pub fn classes(&self) -> usize {
        self.task_widths.last().copied().unwrap_or(0)
    }
}

/// `feature` layers (each followed by ReLU) then `task` layers (ReLU between,
/// none after the last). With multiple heads, `task` holds the shared trunk
/// and each head is a final layer of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub feature: Vec<Dense>,
    pub task: Vec<Dense>,
    pub heads: Vec<Dense>,
}

/// Mask applied to the input of one task layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMask {
    Identity,
    /// One mask vector broadcast over the batch.
    Shared(Vec<f64>),
    /// A `batch × k` mask, one row per instance.
    PerRow(Tensor),
}

/// Which classifier head produces each row's logits.
#[derive(Debug, Clone, Copy)]
pub enum HeadSel<'a> {
    /// Single-head network.
    Single,
    Head(usize),
    PerRow(&'a [usize]),
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    feature_in: Vec<Tensor>,
    feature_pre: Vec<Tensor>,
    /// Unmasked input activations of each task layer (`a_L`).
    pub task_in: Vec<Tensor>,
    task_masks: Vec<LayerMask>,
    /// Masked inputs (`â_L`).
    task_masked: Vec<Tensor>,
    task_pre: Vec<Tensor>,
    head_in: Option<Tensor>,
    head_rows: Option<Vec<usize>>,
}

fn mask_input(a: &Tensor, mask: &LayerMask) -> Result<Tensor> {
    match mask {
        LayerMask::Identity => Ok(a.clone()),
        LayerMask::Shared(m) => {
            if m.len() != a.cols() {
                return Err(Error::shape("apply_mask", a.cols(), m.len()));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (v, &mj) in out.row_mut(r).iter_mut().zip(m) {
                    *v *= mj;
                }
            }
            Ok(out)
        }
        LayerMask::PerRow(m) => {
            a.same_shape(m, "apply_mask")?;
            let data = a.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
    }
}

fn unmask_grad(g: &Tensor, mask: &LayerMask) -> Result<Tensor> {
    mask_input(g, mask)
}

impl Network {
    pub fn new(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
        if spec.input_dim == 0 || spec.task_widths.is_empty() || spec.task_widths.contains(&0) || spec.feature_widths.contains(&0) {
            return Err(Error::Invalid(format!("invalid network spec {spec:?}")));
        }
        if spec.heads > 0 && spec.task_widths.len() < 2 {
            return Err(Error::Invalid("multi-head networks need a task trunk before the heads".into()));
        }
        let mut width = spec.input_dim;
        let mut feature = Vec::new();
        for &w in &spec.feature_widths {
            feature.push(Dense::uniform(width, w, rng));
            width = w;
        }
        let n_task = spec.task_widths.len();
        let trunk_len = if spec.heads > 0 { n_task - 1 } else { n_task };
        let mut task = Vec::new();
        for (i, &w) in spec.task_widths.iter().enumerate().take(trunk_len) {
            let layer = if spec.heads == 0 && i + 1 == n_task {
                Dense::normal(width, w, spec.final_init_std, rng)
            } else {
                Dense::uniform(width, w, rng)
            };
            task.push(layer);
            width = w;
        }
        let heads = (0..spec.heads)
            .map(|_| Dense::normal(width, spec.classes(), spec.final_init_std, rng))
            .collect();
        Ok(Network { feature, task, heads })
    }

    pub fn classes(&self) -> usize {
        match self.heads.first() {
            Some(h) => h.fan_out(),
            None => self.task.last().map_or(0, Dense::fan_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature
            .first()
            .or(self.task.first())
            .map_or(0, Dense::fan_in)
    }

    pub fn is_multi_head(&self) -> bool {
        !self.heads.is_empty()
    }

    /// Mask attachment points: the input of every task layer.
    pub fn mask_specs(&self) -> Vec<LayerMaskSpec> {
        self.task
            .iter()
            .enumerate()
            .map(|(i, l)| LayerMaskSpec { layer_index: i, k: l.fan_in() })
            .collect()
    }

    pub fn zeros_like(&self) -> Network {
        Network {
            feature: self.feature.iter().map(Dense::zeros_like).collect(),
            task: self.task.iter().map(Dense::zeros_like).collect(),
            heads: self.heads.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &Dense)> {
        let f = self.feature.iter().enumerate().map(|(i, l)| ("feature", i, l));
        let t = self.task.iter().enumerate().map(|(i, l)| ("task", i, l));
        let h = self.heads.iter().enumerate().map(|(i, l)| ("head", i, l));
        f.chain(t).chain(h)
    }

    /// All parameter tensors in a fixed order (`w` then `b` per layer).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|(_, _, l)| [&l.w, &l.b]).collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (group, layers) in [("feature", &mut self.feature), ("task", &mut self.task), ("head", &mut self.heads)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{group}.{i}.w"), &mut l.w));
                out.push((format!("{group}.{i}.b"), &mut l.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_params_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Forward pass returning logits and the activation cache.
    pub fn forward(&self, x: &Tensor, masks: &[LayerMask], heads: HeadSel<'_>) -> Result<(Tensor, Cache)> {
        let (batch, dim) = x.dims2("forward")?;
        if dim != self.input_dim() {
            return Err(Error::shape("forward", format!("{} input features", self.input_dim()), dim));
        }
        if masks.len() != self.task.len() {
            return Err(Error::shape("forward", format!("{} layer masks", self.task.len()), masks.len()));
        }
        let mut h = x.clone();
        let mut feature_in = Vec::with_capacity(self.feature.len());
        let mut feature_pre = Vec::with_capacity(self.feature.len());
        for l in &self.feature {
            let z = dense_forward(&h, &l.w, &l.b)?;
            feature_in.push(std::mem::replace(&mut h, relu(&z)));
            feature_pre.push(z);
        }
        let mut task_in = Vec::with_capacity(self.task.len());
        let mut task_masked = Vec::with_capacity(self.task.len());
        let mut task_pre = Vec::with_capacity(self.task.len());
        let last = self.task.len() - 1;
        for (i, (l, m)) in self.task.iter().zip(masks).enumerate() {
            let masked = mask_input(&h, m)?;
            let z = dense_forward(&masked, &l.w, &l.b)?;
            task_in.push(h);
            task_masked.push(masked);
            let is_output = i == last && self.heads.is_empty();
            h = if is_output { z.clone() } else { relu(&z) };
            task_pre.push(z);
        }
        let mut cache = Cache {
            feature_in,
            feature_pre,
            task_in,
            task_masks: masks.to_vec(),
            task_masked,
            task_pre,
            head_in: None,
            head_rows: None,
        };
        if self.heads.is_empty() {
            return Ok((h, cache));
        }
        let rows: Vec<usize> = match heads {
            HeadSel::Single => return Err(Error::Invalid("multi-head network needs a head selection".into())),
            HeadSel::Head(k) => vec![k; batch],
            HeadSel::PerRow(r) => r.to_vec(),
        };
        if rows.len() != batch {
            return Err(Error::shape("forward", format!("{batch} head indices"), rows.len()));
        }
        if let Some(&bad) = rows.iter().find(|&&k| k >= self.heads.len()) {
            return Err(Error::Invalid(format!("head {bad} out of range ({} heads)", self.heads.len())));
        }
        let classes = self.classes();
        let mut logits = Tensor::zeros(&[batch, classes]);
        for (k, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = (0..batch).filter(|&r| rows[r] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let z = dense_forward(&h.select_rows(&idx), &head.w, &head.b)?;
            for (j, &r) in idx.iter().enumerate() {
                logits.row_mut(r).copy_from_slice(z.row(j));
            }
        }
        cache.head_in = Some(h);
        cache.head_rows = Some(rows);
        Ok((logits, cache))
    }

    /// Backpropagates `grad_logits`. Returns parameter gradients (shaped
    /// like the network) and `∂L/∂â` for every task layer input.
    pub fn backward(&self, cache: &Cache, grad_logits: &Tensor) -> Result<(Network, Vec<Tensor>)> {
        let mut grads = self.zeros_like();
        let mut g = grad_logits.clone();
        if let (Some(hin), Some(rows)) = (&cache.head_in, &cache.head_rows) {
            let mut gh = Tensor::zeros(hin.shape());
            for (k, head) in self.heads.iter().enumerate() {
                let idx: Vec<usize> = (0..rows.len()).filter(|&r| rows[r] == k).collect();
                if idx.is_empty() {
                    continue;
                }
                let dg = dense_backward(&g.select_rows(&idx), &hin.select_rows(&idx), &head.w)?;
                for (j, &r) in idx.iter().enumerate() {
                    gh.row_mut(r).copy_from_slice(dg.x.row(j));
                }
                grads.heads[k] = Dense { w: dg.w, b: dg.b };
            }
            // the trunk's last layer is followed by ReLU when heads exist
            g = relu_backward(&gh, cache.task_pre.last().expect("non-empty trunk"))?;
        }
        let mut grad_masked = vec![Tensor::zeros(&[0]); self.task.len()];
        for i in (0..self.task.len()).rev() {
            let dg = dense_backward(&g, &cache.task_masked[i], &self.task[i].w)?;
            grads.task[i] = Dense { w: dg.w, b: dg.b };
            let ga = unmask_grad(&dg.x, &cache.task_masks[i])?;
            grad_masked[i] = dg.x;
            g = if i > 0 {
                relu_backward(&ga, &cache.task_pre[i - 1])?
            } else if let Some(pre) = cache.feature_pre.last() {
                relu_backward(&ga, pre)?
            } else {
                ga
            };
        }
        for i in (0..self.feature.len()).rev() {
            let dg = dense_backward(&g, &cache.feature_in[i], &self.feature[i].w)?;
            grads.feature[i] = Dense { w: dg.w, b: dg.b };
            if i > 0 {
                g = relu_backward(&dg.x, &cache.feature_pre[i - 1])?;
            }
        }
        Ok((grads, grad_masked))
    }

    /// Class probabilities for `x`; multi-head networks average the softmax
    /// of every head.
    pub fn predict_proba(&self, x: &Tensor, masks: &[LayerMask]) -> Result<Tensor> {
        if self.heads.is_empty() {
            let (logits, _) = self.forward(x, masks, HeadSel::Single)?;
            return softmax(&logits);
        }
        let mut acc = Tensor::zeros(&[x.rows(), self.classes()]);
        for k in 0..self.heads.len() {
            let (logits, _) = self.forward(x, masks, HeadSel::Head(k))?;
            let p = softmax(&logits)?;
            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        let n = self.heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(acc)
    }
}

/// Straight-through gradients for every mask logit from a backward pass.
///
/// Row `r` of the batch used domain `row_domains[r]`'s mask, so its
/// contribution `∂L/∂â ⊙ a` accumulates into that domain's logits, then the
/// total is scaled by `σ'(m̃)`.
pub fn mask_grads(bank: &MaskBank, cache: &Cache, grad_masked: &[Tensor], row_domains: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let mut grads = bank.zero_grads();
    for (l, (ga, a)) in grad_masked.iter().zip(&cache.task_in).enumerate() {
        if a.rows() != row_domains.len() {
            return Err(Error::shape("mask_grads", a.rows(), row_domains.len()));
        }
        for (r, &d) in row_domains.iter().enumerate() {
            let acc = grads[d][l].data_mut();
            for ((o, &g), &v) in acc.iter_mut().zip(ga.row(r)).zip(a.row(r)) {
                *o += g * v;
            }
        }
        for (d, per) in grads.iter_mut().enumerate() {
            for (o, &p) in per[l].data_mut().iter_mut().zip(bank.params(d, l)) {
                let s = crate::mask::sigmoid(p);
                *o *= s * (1.0 - s);
            }
        }
    }
    Ok(grads)
}

/// How masks are produced for a single-domain forward pass.
#[derive(Debug, Clone)]
pub enum MaskMode {
    /// Bernoulli samples from the domain probabilities, one per instance.
    Sampled,
    /// The domain probabilities themselves (test-time scaling).
    Soft,
    /// Explicit per-layer masks; the domain is ignored.
    Given(Vec<Vec<f64>>),
}

/// Per-instance sampled masks: row `r` draws from domain `row_domains[r]`.
pub fn sample_row_masks(bank: &MaskBank, row_domains: &[usize], rng: &mut Rng) -> Vec<LayerMask> {
    let probs: Vec<Vec<Vec<f64>>> = (0..bank.num_domains()).map(|d| bank.domain_probs(d)).collect();
    bank.layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let mut t = Tensor::zeros(&[row_domains.len(), spec.k]);
            for (r, &d) in row_domains.iter().enumerate() {
                rng.bernoulli_into(&probs[d][l], t.row_mut(r));
            }
            LayerMask::PerRow(t)
        })
        .collect()
}

/// Logits of `x` under domain `domain`'s masks.
pub fn forward_masked(
    net: &Network,
    bank: &MaskBank,
    x: &Tensor,
    domain: &str,
    rng: &mut Rng,
    mode: &MaskMode,
) -> Result<Tensor> {
    let masks: Vec<LayerMask> = match mode {
        MaskMode::Given(m) => m.iter().cloned().map(LayerMask::Shared).collect(),
        MaskMode::Soft => {
            let d = bank.domain_index(domain)?;
            bank.domain_probs(d).into_iter().map(LayerMask::Shared).collect()
        }
        MaskMode::Sampled => {
            let d = bank.domain_index(domain)?;
            sample_row_masks(bank, &vec![d; x.rows()], rng)
        }
    };
    let (logits, _) = net.forward(x, &masks, HeadSel::Single)?;
    Ok(logits)
}
