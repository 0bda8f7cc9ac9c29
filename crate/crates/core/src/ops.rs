//! Dense layer kernels, ReLU and softmax cross-entropy.
//!
//! Weights are stored `in × out`, so a forward pass is `y = x·W + b` with
//! `x` of shape `batch × in`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = x.dims2("dense_forward")?;
    let (w_in, fan_out) = w.dims2("dense_forward")?;
    if w_in != fan_in {
        return Err(Error::shape("dense_forward", format!("W with {fan_in} rows"), w_in));
    }
    if b.len() != fan_out {
        return Err(Error::shape("dense_forward", format!("bias of length {fan_out}"), b.len()));
    }
    let mut y = Tensor::zeros(&[batch, fan_out]);
    let wd = w.data();
    for r in 0..batch {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        yr.copy_from_slice(b.data());
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &wd[i * fan_out..(i + 1) * fan_out];
            for (yj, &wij) in yr.iter_mut().zip(wrow) {
                *yj += xi * wij;
            }
        }
    }
    Ok(y)
}

/// Gradients of an affine layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn dense_backward(grad_y: &Tensor, x: &Tensor, w: &Tensor) -> Result<DenseGrads> {
    let (batch, fan_in) = x.dims2("dense_backward")?;
    let (w_in, fan_out) = w.dims2("dense_backward")?;
    let (gb, go) = grad_y.dims2("dense_backward")?;
    if w_in != fan_in || gb != batch || go != fan_out {
        return Err(Error::shape(
            "dense_backward",
            format!("grad_y {batch}x{w_in}->{fan_out}"),
            format!("x {batch}x{fan_in}, W {w_in}x{fan_out}, grad_y {gb}x{go}"),
        ));
    }
    let wd = w.data();
    let mut gx = Tensor::zeros(&[batch, fan_in]);
    let mut gw = Tensor::zeros(&[fan_in, fan_out]);
    let mut gbias = Tensor::zeros(&[fan_out]);
    for r in 0..batch {
        let g = grad_y.row(r);
        for (acc, &gj) in gbias.data_mut().iter_mut().zip(g) {
            *acc += gj;
        }
        let xr = x.row(r);
        let gwd = gw.data_mut();
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut gwd[i * fan_out..(i + 1) * fan_out];
            for (acc, &gj) in row.iter_mut().zip(g) {
                *acc += xi * gj;
            }
        }
        let gxr = gx.row_mut(r);
        for (i, out) in gxr.iter_mut().enumerate() {
            let wrow = &wd[i * fan_out..(i + 1) * fan_out];
            *out = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    Ok(DenseGrads { x: gx, w: gw, b: gbias })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of ReLU; the subgradient at exactly zero is taken as 0.
pub fn relu_backward(grad_y: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad_y.same_shape(x, "relu_backward")?;
    let data = grad_y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Row-wise softmax of a `batch × classes` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (batch, _) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for r in 0..batch {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Batch-mean cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.dims2("softmax_xent")?;
    if labels.len() != batch {
        return Err(Error::shape("softmax_xent", format!("{batch} labels"), labels.len()));
    }
    if batch == 0 {
        return Err(Error::Invalid("softmax_xent on an empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let scale = 1.0 / batch as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * scale;
        }
        row[label] -= scale;
    }
    Ok((loss * scale, grad))
}
