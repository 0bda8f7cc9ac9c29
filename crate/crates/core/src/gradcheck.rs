//! Central finite-difference checks of [`loss_total`] gradients.
//!
//! Masks enter through the soft path (probabilities in place of samples),
//! which is the smooth function whose derivative the straight-through
//! estimator reports.

use serde::Serialize;

use crate::error::Result;
use crate::mask::MaskBank;
use crate::network::Network;
use crate::rng::Rng;
use crate::train::{loss_total, Batch, MaskDraw};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `name[index]: analytic vs numeric` for every entry outside tolerance.
    pub failures: Vec<String>,
    pub max_abs_err: f64,
    /// Largest `|a - n| / max(|a|, |n|)` among entries whose magnitude exceeds `atol`.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            rtol: 1e-3,
            atol: 1e-6,
        }
    }
}

impl GradCheck {
    fn compare(&self, name: &str, analytic: f64, numeric: f64, report: &mut GradCheckReport) {
        report.checked += 1;
        let diff = (analytic - numeric).abs();
        report.max_abs_err = report.max_abs_err.max(diff);
        let scale = analytic.abs().max(numeric.abs());
        if scale > self.atol {
            report.max_rel_err = report.max_rel_err.max(diff / scale);
        }
        if diff > self.atol + self.rtol * numeric.abs() {
            report.failures.push(format!("{name}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }

    /// Checks every network parameter and every mask logit.
    pub fn run(
        &self,
        net: &Network,
        bank: Option<&MaskBank>,
        batch: &Batch,
        lambda_o: f64,
        lambda_s: f64,
    ) -> Result<GradCheckReport> {
        let mut rng = Rng::new(0);
        let loss = |n: &Network, b: Option<&MaskBank>, rng: &mut Rng| -> Result<f64> {
            Ok(loss_total(n, b, batch, lambda_o, lambda_s, MaskDraw::Soft, rng)?.total)
        };
        let out = loss_total(net, bank, batch, lambda_o, lambda_s, MaskDraw::Soft, &mut rng)?;
        let mut report = GradCheckReport {
            checked: 0,
            failures: Vec::new(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };

        let mut probe = net.clone();
        let analytic: Vec<Vec<f64>> = out.net_grads.tensors().iter().map(|t| t.data().to_vec()).collect();
        let names: Vec<String> = probe.named_params_mut().into_iter().map(|(n, _)| n).collect();
        for (p, name) in names.iter().enumerate() {
            for i in 0..analytic[p].len() {
                let orig = probe.tensors()[p].data()[i];
                probe.tensors_mut()[p].data_mut()[i] = orig + self.step;
                let up = loss(&probe, bank, &mut rng)?;
                probe.tensors_mut()[p].data_mut()[i] = orig - self.step;
                let down = loss(&probe, bank, &mut rng)?;
                probe.tensors_mut()[p].data_mut()[i] = orig;
                self.compare(&format!("{name}[{i}]"), analytic[p][i], (up - down) / (2.0 * self.step), &mut report);
            }
        }

        if let (Some(bank), Some(mg)) = (bank, out.mask_grads.as_ref()) {
            let mut probe = bank.clone();
            for d in 0..bank.num_domains() {
                for l in 0..bank.layers().len() {
                    for i in 0..bank.layers()[l].k {
                        let orig = probe.params(d, l)[i];
                        probe.params_mut(d, l)[i] = orig + self.step;
                        let up = loss(net, Some(&probe), &mut rng)?;
                        probe.params_mut(d, l)[i] = orig - self.step;
                        let down = loss(net, Some(&probe), &mut rng)?;
                        probe.params_mut(d, l)[i] = orig;
                        self.compare(
                            &format!("mask.{}.layer{}[{i}]", bank.domains()[d], bank.layers()[l].layer_index),
                            mg[d][l].data()[i],
                            (up - down) / (2.0 * self.step),
                            &mut report,
                        );
                    }
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskInit;
    use crate::network::NetworkSpec;
    use crate::tensor::Tensor;

    #[test]
    fn small_network_passes() {
        let mut rng = Rng::new(3);
        let spec = NetworkSpec {
            input_dim: 3,
            feature_widths: vec![4],
            task_widths: vec![5, 3],
            heads: 0,
            final_init_std: 0.3,
        };
        let net = Network::new(&spec, &mut rng).unwrap();
        let bank = MaskBank::new(
            vec!["a".into(), "b".into()],
            net.mask_specs(),
            MaskInit::Uniform { lo: -1.0, hi: 1.0 },
            &mut rng,
        )
        .unwrap();
        let mut x = Tensor::zeros(&[4, 3]);
        x.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        let batch = Batch {
            x,
            y: vec![0, 1, 2, 1],
            domains: vec![0, 1, 1, 0],
        };
        let report = GradCheck::default().run(&net, Some(&bank), &batch, 0.3, 0.0).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.checked, 3 * 4 + 4 + 4 * 5 + 5 + 5 * 3 + 3 + 2 * (4 + 5));
    }
}
