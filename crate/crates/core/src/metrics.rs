//! Exact detection metrics: a-DCF at a threshold, minimum a-DCF over a full
//! threshold sweep, equal error rates and DET staircases.
//!
//! Decisions are "accept ⇔ s > τ". Candidate thresholds are the midpoints
//! between consecutive distinct scores plus one point below the minimum and
//! one above the maximum, which covers every distinct decision pattern.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataio::{Label, ScoreSet};
use crate::objective::AdcfOperatingPoint;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no scores")]
    Empty,
    #[error("{0} score list is empty")]
    EmptyClass(&'static str),
    #[error("non-finite score")]
    NonFinite,
}

/// Scores split by trial class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassScores {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
    pub spoof: Vec<f64>,
}

impl ClassScores {
    pub fn from_labeled(scores: &[f64], labels: &[Label]) -> Self {
        let mut out = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            out.class_mut(l).push(s);
        }
        out
    }

    pub fn class(&self, l: Label) -> &[f64] {
        match l {
            Label::Target => &self.target,
            Label::Nontarget => &self.nontarget,
            Label::Spoof => &self.spoof,
        }
    }

    pub fn class_mut(&mut self, l: Label) -> &mut Vec<f64> {
        match l {
            Label::Target => &mut self.target,
            Label::Nontarget => &mut self.nontarget,
            Label::Spoof => &mut self.spoof,
        }
    }

    pub fn len(&self) -> usize {
        self.target.len() + self.nontarget.len() + self.spoof.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn counts(&self) -> [usize; 3] {
        [self.target.len(), self.nontarget.len(), self.spoof.len()]
    }

    fn check(&self) -> Result<(), MetricsError> {
        if self.is_empty() {
            return Err(MetricsError::Empty);
        }
        if Label::ALL
            .iter()
            .any(|&l| self.class(l).iter().any(|s| !s.is_finite()))
        {
            return Err(MetricsError::NonFinite);
        }
        Ok(())
    }
}

impl From<&ScoreSet> for ClassScores {
    fn from(set: &ScoreSet) -> Self {
        Self::from_labeled(&set.scores(), &set.labels())
    }
}

/// Error rates at one threshold. A class with no trials has rate 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub tau: f64,
    pub p_miss: f64,
    pub p_fa_non: f64,
    pub p_fa_spf: f64,
}

fn rate(errors: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        errors as f64 / total as f64
    }
}

fn cost(op: &AdcfOperatingPoint, r: &ErrorRates) -> f64 {
    let (w_miss, w_non, w_spf) = op.weights();
    w_miss * r.p_miss + w_non * r.p_fa_non + w_spf * r.p_fa_spf
}

pub fn error_rates(scores: &ClassScores, tau: f64) -> ErrorRates {
    let misses = scores.target.iter().filter(|&&s| s <= tau).count();
    let fa_non = scores.nontarget.iter().filter(|&&s| s > tau).count();
    let fa_spf = scores.spoof.iter().filter(|&&s| s > tau).count();
    let [n_tar, n_non, n_spf] = scores.counts();
    ErrorRates {
        tau,
        p_miss: rate(misses, n_tar),
        p_fa_non: rate(fa_non, n_non),
        p_fa_spf: rate(fa_spf, n_spf),
    }
}

/// Hard a-DCF at threshold `tau`.
pub fn adcf_at_threshold(scores: &ClassScores, tau: f64, op: &AdcfOperatingPoint) -> Result<f64, MetricsError> {
    scores.check()?;
    Ok(cost(op, &error_rates(scores, tau)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub rates: ErrorRates,
    pub adcf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub min_adcf: f64,
    pub argmin_tau: f64,
    pub min_adcf_normalized: f64,
    pub curve: Vec<CurvePoint>,
}

/// Error rates at every candidate threshold, in increasing τ.
fn staircase(scores: &ClassScores) -> Vec<ErrorRates> {
    let mut all: Vec<(f64, Label)> = Label::ALL
        .iter()
        .flat_map(|&l| scores.class(l).iter().map(move |&s| (s, l)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let [n_tar, n_non, n_spf] = scores.counts();
    // Below every score: all trials accepted.
    let (mut misses, mut fa_non, mut fa_spf) = (0usize, n_non, n_spf);
    let at = |tau: f64, misses: usize, fa_non: usize, fa_spf: usize| ErrorRates {
        tau,
        p_miss: rate(misses, n_tar),
        p_fa_non: rate(fa_non, n_non),
        p_fa_spf: rate(fa_spf, n_spf),
    };

    let mut out = Vec::new();
    out.push(at(all[0].0 - 1.0, misses, fa_non, fa_spf));
    let mut i = 0;
    while i < all.len() {
        let value = all[i].0;
        // Moving τ past `value` rejects every trial scoring exactly `value`.
        while i < all.len() && all[i].0 == value {
            match all[i].1 {
                Label::Target => misses += 1,
                Label::Nontarget => fa_non -= 1,
                Label::Spoof => fa_spf -= 1,
            }
            i += 1;
        }
        let tau = match all.get(i) {
            Some(&(next, _)) => value + (next - value) / 2.0,
            None => value + 1.0,
        };
        out.push(at(tau, misses, fa_non, fa_spf));
    }
    out
}

/// Minimum a-DCF over all candidate thresholds. Ties go to the smallest τ.
/// The normalised value divides by [`AdcfOperatingPoint::trivial_cost`].
pub fn min_adcf(scores: &ClassScores, op: &AdcfOperatingPoint) -> Result<SweepResult, MetricsError> {
    scores.check()?;
    let curve: Vec<CurvePoint> = staircase(scores)
        .into_iter()
        .map(|rates| CurvePoint {
            adcf: cost(op, &rates),
            rates,
        })
        .collect();
    let best = curve
        .iter()
        .fold(None::<&CurvePoint>, |best, p| match best {
            Some(b) if b.adcf <= p.adcf => Some(b),
            _ => Some(p),
        })
        .expect("curve has at least two points");
    let norm = op.trivial_cost();
    let min_adcf_normalized = if norm > 0.0 { best.adcf / norm } else { 0.0 };
    Ok(SweepResult {
        min_adcf: best.adcf,
        argmin_tau: best.rates.tau,
        min_adcf_normalized,
        curve,
    })
}

/// DET staircase: one row per candidate threshold (distinct scores + 1).
pub fn det_points(scores: &ClassScores) -> Result<Vec<ErrorRates>, MetricsError> {
    scores.check()?;
    Ok(staircase(scores))
}

pub fn format_det_tsv(points: &[ErrorRates]) -> String {
    let mut out = String::from("p_miss\tp_fa_non\tp_fa_spf\ttau\n");
    for p in points {
        let _ = writeln!(out, "{:.6}\t{:.6}\t{:.6}\t{:.6}", p.p_miss, p.p_fa_non, p.p_fa_spf, p.tau);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate of `pos` against `neg`, linearly interpolated between
/// the two sweep points where the miss rate overtakes the false-alarm rate.
pub fn eer(pos: &[f64], neg: &[f64]) -> Result<Eer, MetricsError> {
    if pos.is_empty() {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if neg.is_empty() {
        return Err(MetricsError::EmptyClass("negative"));
    }
    let two_class = ClassScores {
        target: pos.to_vec(),
        nontarget: neg.to_vec(),
        spoof: Vec::new(),
    };
    two_class.check()?;
    let points = staircase(&two_class);
    // The first point has P_miss = 0, P_fa = 1 and the last P_miss = 1, P_fa = 0.
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa_non)
        .expect("last point has p_miss >= p_fa");
    let cur = points[k];
    let prev = points[k - 1];
    let d_prev = prev.p_fa_non - prev.p_miss;
    let d_cur = cur.p_fa_non - cur.p_miss;
    let t = d_prev / (d_prev - d_cur);
    Ok(Eer {
        eer: prev.p_miss + t * (cur.p_miss - prev.p_miss),
        threshold: prev.tau + t * (cur.tau - prev.tau),
    })
}

/// The three standard SASV equal error rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SasvEers {
    /// Target vs nontarget.
    pub sv: Option<Eer>,
    /// Target vs spoof.
    pub spf: Option<Eer>,
    /// Target vs nontarget ∪ spoof.
    pub sasv: Option<Eer>,
}

/// EER variants; each is `None` when one of its classes is empty.
pub fn sasv_eers(scores: &ClassScores) -> SasvEers {
    let pooled: Vec<f64> = scores.nontarget.iter().chain(&scores.spoof).copied().collect();
    SasvEers {
        sv: eer(&scores.target, &scores.nontarget).ok(),
        spf: eer(&scores.target, &scores.spoof).ok(),
        sasv: eer(&scores.target, &pooled).ok(),
    }
}
