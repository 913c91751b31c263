//! Matching objectives between synthetic and real batches, and the adversarial losses.

mod report;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageBatch;
use crate::error::{config_err, validation_err, Error, Result};
use crate::models::Classifier;
use crate::nn::functional::{bce_with_logits, cross_entropy, scalar};
use crate::nn::Mode;

pub use report::{read_loss_log, LossLog, LossReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    Logits,
    Feature,
    Gradient,
    None,
}

impl MatchStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchStrategy::Logits => "logits",
            MatchStrategy::Feature => "feature",
            MatchStrategy::Gradient => "gradient",
            MatchStrategy::None => "none",
        }
    }
}

impl std::fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logits" => Ok(MatchStrategy::Logits),
            "feature" => Ok(MatchStrategy::Feature),
            "gradient" => Ok(MatchStrategy::Gradient),
            "none" => Ok(MatchStrategy::None),
            _ => Err(config_err!("unknown matching strategy {s:?} (logits, feature, gradient, none)")),
        }
    }
}

/// Generator-side adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    /// `-log D(G(z))`
    NonSaturating,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(validation_err!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean of squared differences over all B·C elements.
pub fn logits_matching_loss(logits_syn: &Tensor, logits_real: &Tensor) -> Result<Tensor> {
    same_shape(logits_syn, logits_real, "logits_matching_loss")?;
    let real = logits_real.to_dtype(logits_syn.dtype())?;
    Ok((logits_syn - real)?.sqr()?.mean_all()?)
}

/// Squared distance between batch-mean feature vectors, averaged over the F features.
pub fn feature_matching_loss(features_syn: &Tensor, features_real: &Tensor) -> Result<Tensor> {
    same_shape(features_syn, features_real, "feature_matching_loss")?;
    let real = features_real.to_dtype(features_syn.dtype())?;
    let diff = (features_syn.mean(0)? - real.mean(0)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Mean BCE pushing real scores to 1 and fake scores to 0, over all 2B scores.
pub fn discriminator_loss(d_score_real: &Tensor, d_score_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_score_real, d_score_fake, "discriminator_loss")?;
    check_scores(d_score_real)?;
    check_scores(d_score_fake)?;
    let real = bce_with_logits(d_score_real, 1.0)?;
    let fake = bce_with_logits(d_score_fake, 0.0)?;
    Ok(((real + fake)? * 0.5)?)
}

/// Non-saturating generator loss: mean BCE pushing fake scores to 1.
pub fn generator_loss(d_score_fake: &Tensor) -> Result<Tensor> {
    check_scores(d_score_fake)?;
    bce_with_logits(d_score_fake, 1.0)
}

fn check_scores(scores: &Tensor) -> Result<()> {
    let v: Vec<f64> = scores.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(bad) = v.iter().find(|x| x.is_nan()) {
        return Err(Error::Numeric {
            epoch: 0,
            iteration: 0,
            detail: format!("discriminator score {bad}"),
        });
    }
    Ok(())
}

/// `(l_g, l_d)` for pre-sigmoid scores of shape (B, 1).
pub fn gan_losses(d_score_real: &Tensor, d_score_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((generator_loss(d_score_fake)?, discriminator_loss(d_score_real, d_score_fake)?))
}

/// `l_g + λ·l_m`; returns `l_g` itself when λ is zero.
pub fn total_loss(l_g: &Tensor, l_m: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(config_err!("lambda must be non-negative, got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(l_g.clone());
    }
    Ok((l_g + (l_m * lambda)?)?)
}

/// A network whose weight gradients can be matched.
pub trait GradientModel {
    /// Logits for a batch; parameters stay in the graph, no state is mutated.
    fn probe_logits(&self, x: &Tensor) -> Result<Tensor>;
    /// Named weight tensors (rank ≥ 2) forming the matched groups.
    fn weight_groups(&self) -> Vec<(String, Var)>;
}

impl GradientModel for Classifier {
    fn probe_logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::PROBE)?.0)
    }

    fn weight_groups(&self) -> Vec<(String, Var)> {
        self.store()
            .entries()
            .iter()
            .filter(|e| e.role == crate::nn::params::Role::Param && e.var.rank() >= 2)
            .map(|e| (e.name.clone(), e.var.clone()))
            .collect()
    }
}

/// Value of a gradient-matching evaluation plus the groups that had no gradient signal.
pub struct GradientMatch {
    pub loss: Tensor,
    pub zero_norm_groups: Vec<String>,
}

/// True when backward passes on this thread keep gradients attached to the graph.
pub fn higher_order_grads_active() -> Result<bool> {
    let x = Var::new(&[1.0f32], &candle_core::Device::Cpu)?;
    let y = x.as_tensor().sqr()?.sum_all()?;
    let g = y.backward()?;
    Ok(g.get(x.as_tensor()).map(|t| t.track_op()).unwrap_or(false))
}

/// Σ over weight groups of `1 − cos(∇_W CE(syn), ∇_W CE(real))`, differentiable in the syn images.
///
/// Requires [`crate::nn::enable_higher_order_grads`] before the first backward pass of the thread.
pub fn gradient_matching_loss(model: &impl GradientModel, syn: &LabeledImageBatch, real: &LabeledImageBatch) -> Result<Tensor> {
    let m = gradient_matching_detail(model, syn, real)?;
    if !m.zero_norm_groups.is_empty() {
        ::log::warn!("gradient matching: zero-norm gradient in {}", m.zero_norm_groups.join(", "));
    }
    Ok(m.loss)
}

pub fn gradient_matching_detail(
    model: &impl GradientModel,
    syn: &LabeledImageBatch,
    real: &LabeledImageBatch,
) -> Result<GradientMatch> {
    let mut syn_labels = syn.labels.as_slice().to_vec();
    let mut real_labels = real.labels.as_slice().to_vec();
    syn_labels.sort_unstable();
    real_labels.sort_unstable();
    if syn_labels != real_labels {
        return Err(validation_err!("gradient matching needs the same label multiset on both sides"));
    }
    if !higher_order_grads_active()? {
        return Err(config_err!(
            "gradient matching needs higher-order gradients; call nn::enable_higher_order_grads() before any backward pass"
        ));
    }
    let groups = model.weight_groups();
    let syn_loss = cross_entropy(&model.probe_logits(&syn.images)?, syn.labels.as_slice())?;
    let real_loss = cross_entropy(&model.probe_logits(&real.images.detach())?, real.labels.as_slice())?;
    let gs = syn_loss.backward()?;
    let gr = real_loss.backward()?;
    let dtype = syn_loss.dtype();
    let mut total = Tensor::zeros((), dtype, syn_loss.device())?;
    let mut zero = Vec::new();
    for (name, var) in &groups {
        let (Some(a), Some(b)) = (gs.get(var.as_tensor()), gr.get(var.as_tensor())) else {
            zero.push(name.clone());
            total = (total + 1.0)?;
            continue;
        };
        let a = a.flatten_all()?;
        let b = b.detach().flatten_all()?;
        let na = a.sqr()?.sum_all()?.sqrt()?;
        let nb = b.sqr()?.sum_all()?.sqrt()?;
        if scalar(&na)? == 0.0 || scalar(&nb)? == 0.0 {
            zero.push(name.clone());
            total = (total + 1.0)?;
            continue;
        }
        let cos = ((&a * &b)?.sum_all()? / (na * nb)?)?;
        total = (total + (1.0 - cos)?)?;
    }
    Ok(GradientMatch {
        loss: total,
        zero_norm_groups: zero,
    })
}

/// Matching loss of one strategy for label-aligned synthetic and real batches.
pub fn matching_loss(
    strategy: MatchStrategy,
    classifier: &Classifier,
    syn: &LabeledImageBatch,
    real: &LabeledImageBatch,
) -> Result<Tensor> {
    if syn.labels != real.labels && strategy != MatchStrategy::Gradient && strategy != MatchStrategy::None {
        return Err(validation_err!("synthetic and real batches must be label-aligned"));
    }
    match strategy {
        MatchStrategy::None => Ok(Tensor::zeros((), syn.images.dtype(), syn.images.device())?),
        MatchStrategy::Logits | MatchStrategy::Feature => {
            let (ls, fs) = classifier.forward(&syn.images, Mode::FROZEN)?;
            let (lr, fr) = classifier.forward(&real.images.detach(), Mode::FROZEN)?;
            let (lr, fr) = (lr.detach(), fr.detach());
            if strategy == MatchStrategy::Logits {
                logits_matching_loss(&ls, &lr)
            } else {
                feature_matching_loss(&fs, &fr)
            }
        }
        MatchStrategy::Gradient => gradient_matching_loss(classifier, syn, real),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
    }

    #[test]
    fn logits_examples() {
        let a = t(&[&[1.0, 0.0]]);
        let b = t(&[&[0.0, 0.0]]);
        assert_eq!(scalar(&logits_matching_loss(&a, &b).unwrap()).unwrap(), 0.5);
        assert_eq!(scalar(&logits_matching_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert!(logits_matching_loss(&a, &t(&[&[0.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn feature_is_mean_only() {
        let syn = t(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let real = t(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(scalar(&feature_matching_loss(&syn, &real).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn gan_examples() {
        let zero = t(&[&[0.0], &[0.0]]);
        let (lg, _) = gan_losses(&zero, &zero).unwrap();
        assert!((scalar(&lg).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let (_, ld) = gan_losses(&t(&[&[60.0]]), &t(&[&[-60.0]])).unwrap();
        assert!(scalar(&ld).unwrap() < 1e-20);
        let nan = t(&[&[f64::NAN]]);
        assert!(matches!(gan_losses(&nan, &nan), Err(Error::Numeric { .. })));
    }

    #[test]
    fn total_examples() {
        let lg = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let lm = Tensor::new(2.0f64, &Device::Cpu).unwrap();
        assert!((scalar(&total_loss(&lg, &lm, 0.01).unwrap()).unwrap() - 1.02).abs() < 1e-15);
        assert_eq!(scalar(&total_loss(&lg, &lm, 0.0).unwrap()).unwrap(), 1.0);
        let zero = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&total_loss(&zero, &lm, 1.0).unwrap()).unwrap(), 2.0);
        assert!(total_loss(&lg, &lm, -1.0).is_err());
    }

    #[test]
    fn strategy_names() {
        for s in [MatchStrategy::Logits, MatchStrategy::Feature, MatchStrategy::Gradient, MatchStrategy::None] {
            assert_eq!(s.as_str().parse::<MatchStrategy>().unwrap(), s);
        }
        assert!("trajectory".parse::<MatchStrategy>().is_err());
    }
}
