//! Training losses over a batch of SASV scores.
//!
//! Binary cross-entropy treats only `target` trials as positive. The soft
//! a-DCF replaces the hard accept/reject decision at threshold τ with a
//! logistic of steepness α, so it is differentiable in the scores and in τ.

use thiserror::Error;

use crate::dataio::Label;
use crate::graph::logistic as sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("invalid operating point: {0}")]
    InvalidOperatingPoint(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("unknown a-DCF preset {0:?}")]
    UnknownPreset(String),
}

/// Costs and class priors of an a-DCF operating condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcfOperatingPoint {
    pub c_miss: f64,
    pub c_fa_non: f64,
    pub c_fa_spf: f64,
    pub pi_tar: f64,
    pub pi_non: f64,
    pub pi_spf: f64,
}

impl Default for AdcfOperatingPoint {
    fn default() -> Self {
        Self::ADCF_DEFAULT
    }
}

impl AdcfOperatingPoint {
    /// The `adcf-default` preset. Configuration, not ground truth.
    pub const ADCF_DEFAULT: Self = Self {
        c_miss: 1.0,
        c_fa_non: 10.0,
        c_fa_spf: 10.0,
        pi_tar: 0.9405,
        pi_non: 0.0095,
        pi_spf: 0.05,
    };

    pub fn preset(name: &str) -> Result<Self, ObjectiveError> {
        match name {
            "adcf-default" => Ok(Self::ADCF_DEFAULT),
            _ => Err(ObjectiveError::UnknownPreset(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidOperatingPoint(m));
        let costs = [self.c_miss, self.c_fa_non, self.c_fa_spf];
        let priors = [self.pi_tar, self.pi_non, self.pi_spf];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return bad(format!("costs must be finite and nonnegative: {costs:?}"));
        }
        if costs.iter().all(|&c| c == 0.0) {
            return bad("at least one cost must be positive".into());
        }
        if priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("priors must lie in [0, 1]: {priors:?}"));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {sum}, not 1"));
        }
        Ok(())
    }

    /// Weight of each class's error rate in the cost: `(miss, fa_non, fa_spf)`.
    pub fn weights(&self) -> (f64, f64, f64) {
        (
            self.c_miss * self.pi_tar,
            self.c_fa_non * self.pi_non,
            self.c_fa_spf * self.pi_spf,
        )
    }

    /// Cost of accepting every trial or rejecting every trial, whichever is
    /// smaller. Used to normalise a-DCF values.
    pub fn trivial_cost(&self) -> f64 {
        let (m, n, s) = self.weights();
        m.min(n + s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of BCE; the soft a-DCF gets `1 − lambda_bce`.
    pub lambda_bce: f64,
    /// Steepness of the logistic decision in the soft a-DCF.
    pub alpha: f64,
    pub operating_point: AdcfOperatingPoint,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 0.5,
            alpha: 10.0,
            operating_point: AdcfOperatingPoint::ADCF_DEFAULT,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.lambda_bce) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "lambda_bce {} outside [0, 1]",
                self.lambda_bce
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        self.operating_point.validate()
    }
}

/// Loss value plus its gradient with respect to each score and to τ.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_scores: Vec<f64>,
    pub d_tau: f64,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check(scores: &[f64], labels: &[Label]) -> Result<(), ObjectiveError> {
    if scores.len() != labels.len() {
        return Err(ObjectiveError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(())
}

/// Mean binary cross-entropy of `σ(s)` against `label == target`.
pub fn bce(scores: &[f64], labels: &[Label]) -> Result<LossOutput, ObjectiveError> {
    check(scores, labels)?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    for (&s, l) in scores.iter().zip(labels) {
        let y = if l.is_positive() { 1.0 } else { 0.0 };
        // −log σ(s) = softplus(−s), −log σ(−s) = softplus(s).
        loss += if l.is_positive() { softplus(-s) } else { softplus(s) };
        d_scores.push((sigmoid(s) - y) / n);
    }
    Ok(LossOutput {
        loss: loss / n,
        d_scores,
        d_tau: 0.0,
    })
}

/// Differentiable a-DCF at threshold `tau`. Classes absent from the batch
/// contribute a zero rate.
pub fn soft_adcf(scores: &[f64], labels: &[Label], tau: f64, cfg: &LossConfig) -> Result<LossOutput, ObjectiveError> {
    check(scores, labels)?;
    let alpha = cfg.alpha;
    let (w_miss, w_non, w_spf) = cfg.operating_point.weights();
    let count = |c: Label| labels.iter().filter(|&&l| l == c).count();
    let (n_tar, n_non, n_spf) = (count(Label::Target), count(Label::Nontarget), count(Label::Spoof));

    let mut loss = 0.0;
    let mut d_tau = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        // Per-trial weight and the sign of the logistic argument.
        let (w, n, sign) = match l {
            Label::Target => (w_miss, n_tar, -1.0),
            Label::Nontarget => (w_non, n_non, 1.0),
            Label::Spoof => (w_spf, n_spf, 1.0),
        };
        let k = w / n as f64;
        let p = sigmoid(alpha * sign * (s - tau));
        loss += k * p;
        let g = k * alpha * p * (1.0 - p);
        d_scores.push(sign * g);
        d_tau -= sign * g;
    }
    Ok(LossOutput { loss, d_scores, d_tau })
}

/// `lambda_bce · bce + (1 − lambda_bce) · soft_adcf`.
pub fn combined_loss(scores: &[f64], labels: &[Label], tau: f64, cfg: &LossConfig) -> Result<LossOutput, ObjectiveError> {
    let lambda = cfg.lambda_bce;
    if lambda == 1.0 {
        return bce(scores, labels);
    }
    if lambda == 0.0 {
        return soft_adcf(scores, labels, tau, cfg);
    }
    let b = bce(scores, labels)?;
    let a = soft_adcf(scores, labels, tau, cfg)?;
    Ok(LossOutput {
        loss: lambda * b.loss + (1.0 - lambda) * a.loss,
        d_scores: b
            .d_scores
            .iter()
            .zip(&a.d_scores)
            .map(|(gb, ga)| lambda * gb + (1.0 - lambda) * ga)
            .collect(),
        d_tau: lambda * b.d_tau + (1.0 - lambda) * a.d_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn bce_examples() {
        let out = bce(&[0.0], &[Target]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);

        let out = bce(&[30.0], &[Target]).unwrap();
        assert!(out.loss > 0.0 && out.loss < 1e-12);

        let out = bce(&[0.0, 0.0], &[Target, Nontarget]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.d_scores, vec![-0.25, 0.25]);
    }

    #[test]
    fn bce_spoof_is_negative() {
        let a = bce(&[1.3], &[Spoof]).unwrap();
        let b = bce(&[1.3], &[Nontarget]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batches_are_errors() {
        let cfg = LossConfig::default();
        assert_eq!(bce(&[], &[]), Err(ObjectiveError::EmptyBatch));
        assert_eq!(soft_adcf(&[], &[], 0.0, &cfg), Err(ObjectiveError::EmptyBatch));
        assert!(matches!(bce(&[1.0], &[]), Err(ObjectiveError::LengthMismatch { .. })));
    }

    #[test]
    fn soft_adcf_saturates_when_separated() {
        let cfg = LossConfig::default();
        let out = soft_adcf(&[5.0, 6.0, -5.0, -6.0], &[Target, Target, Nontarget, Spoof], 0.0, &cfg).unwrap();
        assert!(out.loss < 1e-6, "{}", out.loss);
    }

    #[test]
    fn soft_adcf_at_tau_is_half_total_weight() {
        let cfg = LossConfig::default();
        let out = soft_adcf(&[0.7, 0.7, 0.7], &[Target, Nontarget, Spoof], 0.7, &cfg).unwrap();
        let op = cfg.operating_point;
        let expected = 0.5 * (op.c_miss * op.pi_tar + op.c_fa_non * op.pi_non + op.c_fa_spf * op.pi_spf);
        assert!((out.loss - expected).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_contribute_nothing() {
        let cfg = LossConfig::default();
        let out = soft_adcf(&[0.0], &[Target], 0.0, &cfg).unwrap();
        assert!((out.loss - 0.5 * 0.9405).abs() < 1e-15);
    }

    #[test]
    fn combined_endpoints() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let l = [Target, Nontarget, Spoof, Target];
        let mut cfg = LossConfig { lambda_bce: 1.0, ..Default::default() };
        assert_eq!(combined_loss(&s, &l, 0.2, &cfg).unwrap(), bce(&s, &l).unwrap());
        cfg.lambda_bce = 0.0;
        assert_eq!(combined_loss(&s, &l, 0.2, &cfg).unwrap(), soft_adcf(&s, &l, 0.2, &cfg).unwrap());
        cfg.lambda_bce = 0.5;
        let mixed = combined_loss(&s, &l, 0.2, &cfg).unwrap();
        let expected = 0.5 * bce(&s, &l).unwrap().loss + 0.5 * soft_adcf(&s, &l, 0.2, &cfg).unwrap().loss;
        assert!((mixed.loss - expected).abs() < 1e-15);
    }

    #[test]
    fn operating_point_validation() {
        AdcfOperatingPoint::ADCF_DEFAULT.validate().unwrap();
        let mut op = AdcfOperatingPoint::ADCF_DEFAULT;
        op.pi_tar = 0.5;
        assert!(op.validate().is_err());
        let zero = AdcfOperatingPoint {
            c_miss: 0.0,
            c_fa_non: 0.0,
            c_fa_spf: 0.0,
            ..AdcfOperatingPoint::ADCF_DEFAULT
        };
        assert!(zero.validate().is_err());
        assert!(matches!(
            AdcfOperatingPoint::preset("nope"),
            Err(ObjectiveError::UnknownPreset(_))
        ));
        assert!((AdcfOperatingPoint::ADCF_DEFAULT.trivial_cost() - 0.595).abs() < 1e-12);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_bce: 1.5, ..Default::default() }.validate().is_err());
        LossConfig::default().validate().unwrap();
    }
}
