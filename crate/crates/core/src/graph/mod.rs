//! The trainable SASV network.
//!
//! Per trial:
//!
//! ```text
//! s_asv  = cos(w ⊙ e_enr, w ⊙ e_tst)            reweighted cosine
//! s_cm   = MLP([e_tst_asv ; e_tst_cm])          leaky-ReLU hidden layers
//! a, c   = affine calibrations of s_asv, s_cm
//! s_sasv = −log[(1−ρ)·e^(−a) + ρ·e^(−c)]         soft-min fusion
//! ```
//!
//! [`forward`] records a [`ForwardTrace`]; [`backward`] turns it into
//! gradients for every tensor in [`ModelParams`] except `tau_soft`, which only
//! the loss sees.

mod params;

use thiserror::Error;

use crate::dataio::DataError;

pub use params::{logistic, Affine, Layout, MlpView, ModelParams, NetShape, Param, ParamGradients, RhoMode, RHO_EPS};

/// Negative slope of the hidden-layer rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("reweighted {0} embedding has zero norm")]
    Degenerate(&'static str),
    #[error("fusion weight {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("every network dimension must be positive: {0:?}")]
    EmptyShape(NetShape),
    #[error("unexpected tensor {0:?} in checkpoint")]
    UnexpectedTensor(String),
    #[error("trace was produced for a different parameter shape")]
    TraceMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Embeddings for one trial, already upcast to f64.
#[derive(Debug, Clone, Copy)]
pub struct TrialTensors<'a> {
    pub enr_asv: &'a [f64],
    pub tst_asv: &'a [f64],
    pub tst_cm: &'a [f64],
}

/// Weighted cosine similarity `cos(w ⊙ e_enr, w ⊙ e_tst)`.
pub fn asv_score(e_enr: &[f64], e_tst: &[f64], w_asv: &[f64]) -> Result<f64, GraphError> {
    Ok(cosine_parts(e_enr, e_tst, w_asv)?.score)
}

struct Cosine {
    e1: Vec<f64>,
    e2: Vec<f64>,
    n1: f64,
    n2: f64,
    score: f64,
}

fn cosine_parts(e_enr: &[f64], e_tst: &[f64], w: &[f64]) -> Result<Cosine, GraphError> {
    for (what, v) in [("enrolment embedding", e_enr), ("test embedding", e_tst)] {
        if v.len() != w.len() {
            return Err(GraphError::DimensionMismatch {
                what,
                expected: w.len(),
                found: v.len(),
            });
        }
    }
    let e1: Vec<f64> = w.iter().zip(e_enr).map(|(w, x)| w * x).collect();
    let e2: Vec<f64> = w.iter().zip(e_tst).map(|(w, x)| w * x).collect();
    let n1 = norm(&e1);
    let n2 = norm(&e2);
    if n1 == 0.0 {
        return Err(GraphError::Degenerate("enrolment"));
    }
    if n2 == 0.0 {
        return Err(GraphError::Degenerate("test"));
    }
    let score = (dot(&e1, &e2) / (n1 * n2)).clamp(-1.0, 1.0);
    Ok(Cosine { e1, e2, n1, n2, score })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    // Scaled to stay finite for large components.
    let max = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    max * a.iter().map(|v| (v / max) * (v / max)).sum::<f64>().sqrt()
}

pub fn calibrate(s: f64, w0: f64, w1: f64) -> f64 {
    w0 + w1 * s
}

impl Affine {
    pub const IDENTITY: Affine = Affine { w0: 0.0, w1: 1.0 };

    pub fn apply(&self, s: f64) -> f64 {
        calibrate(s, self.w0, self.w1)
    }
}

fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Hidden pre/post activations of one MLP pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpActivations {
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub out: f64,
}

impl MlpView<'_> {
    pub fn forward(&self, x: &[f64]) -> Result<MlpActivations, GraphError> {
        if x.len() != self.in_dim {
            return Err(GraphError::DimensionMismatch {
                what: "MLP input",
                expected: self.in_dim,
                found: x.len(),
            });
        }
        let z1: Vec<f64> = self
            .w1
            .chunks_exact(self.in_dim)
            .zip(self.b1)
            .map(|(row, b)| b + dot(row, x))
            .collect();
        let a1: Vec<f64> = z1.iter().map(|&z| leaky(z)).collect();
        let z2: Vec<f64> = self
            .w2
            .chunks_exact(self.h1)
            .zip(self.b2)
            .map(|(row, b)| b + dot(row, &a1))
            .collect();
        let a2: Vec<f64> = z2.iter().map(|&z| leaky(z)).collect();
        let out = self.b3 + dot(self.w3, &a2);
        Ok(MlpActivations { z1, a1, z2, a2, out })
    }
}

/// Countermeasure score of the MLP over `[e_tst_asv ; e_tst_cm]`.
pub fn cm_score(e_tst_asv: &[f64], e_tst_cm: &[f64], mlp: &MlpView<'_>) -> Result<f64, GraphError> {
    let x = concat(e_tst_asv, e_tst_cm);
    Ok(mlp.forward(&x)?.out)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + b.len());
    x.extend_from_slice(a);
    x.extend_from_slice(b);
    x
}

/// Fused score together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fusion {
    pub value: f64,
    /// ∂s/∂a = (1−ρ)e^(−a)/Z, the soft-min weight of the ASV score.
    pub weight_asv: f64,
    /// ∂s/∂c = ρe^(−c)/Z.
    pub weight_cm: f64,
    /// ∂s/∂ρ = (e^(−a) − e^(−c))/Z.
    pub d_rho: f64,
}

/// Soft-min fusion `−log[(1−ρ)e^(−a) + ρe^(−c)]`.
pub fn fuse(s_asv_cal: f64, s_cm_cal: f64, rho: f64) -> f64 {
    fuse_parts(s_asv_cal, s_cm_cal, rho).value
}

/// Evaluates the fusion shifted by the smaller score so that no exponent is
/// positive. ρ = 0 and ρ = 1 return the corresponding input exactly.
pub fn fuse_parts(a: f64, c: f64, rho: f64) -> Fusion {
    if rho <= 0.0 {
        return Fusion {
            value: a,
            weight_asv: 1.0,
            weight_cm: 0.0,
            d_rho: -(a - c).exp_m1(),
        };
    }
    if rho >= 1.0 {
        return Fusion {
            value: c,
            weight_asv: 0.0,
            weight_cm: 1.0,
            d_rho: (c - a).exp_m1(),
        };
    }
    let m = a.min(c);
    let ea = (m - a).exp();
    let ec = (m - c).exp();
    // Z = (1−ρ)ea + ρec, with the term at the minimum equal to its weight.
    let log_z = if a <= c {
        (rho * (m - c).exp_m1()).ln_1p()
    } else {
        ((1.0 - rho) * (m - a).exp_m1()).ln_1p()
    };
    let z = log_z.exp();
    Fusion {
        value: m - log_z,
        weight_asv: (1.0 - rho) * ea / z,
        weight_cm: rho * ec / z,
        d_rho: (ea - ec) / z,
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub enr_asv: Vec<f64>,
    pub tst_asv: Vec<f64>,
    /// Reweighted embeddings `w ⊙ e_enr`, `w ⊙ e_tst`.
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub n1: f64,
    pub n2: f64,
    pub s_asv: f64,
    pub s_asv_cal: f64,
    pub e_fused: Vec<f64>,
    pub mlp: MlpActivations,
    pub s_cm: f64,
    pub s_cm_cal: f64,
    pub rho: f64,
    pub fusion: Fusion,
    pub s_sasv: f64,
}

pub fn forward(trial: TrialTensors<'_>, params: &ModelParams) -> Result<ForwardTrace, GraphError> {
    let shape = params.shape();
    if trial.tst_cm.len() != shape.d_cm {
        return Err(GraphError::DimensionMismatch {
            what: "CM embedding",
            expected: shape.d_cm,
            found: trial.tst_cm.len(),
        });
    }
    let cos = cosine_parts(trial.enr_asv, trial.tst_asv, params.w_asv())?;
    let s_asv_cal = params.asv_cal().apply(cos.score);

    let e_fused = concat(trial.tst_asv, trial.tst_cm);
    let mlp = params.mlp().forward(&e_fused)?;
    let s_cm = mlp.out;
    let s_cm_cal = params.cm_cal().apply(s_cm);

    let rho = params.rho();
    let fusion = fuse_parts(s_asv_cal, s_cm_cal, rho);
    Ok(ForwardTrace {
        enr_asv: trial.enr_asv.to_vec(),
        tst_asv: trial.tst_asv.to_vec(),
        e1: cos.e1,
        e2: cos.e2,
        n1: cos.n1,
        n2: cos.n2,
        s_asv: cos.score,
        s_asv_cal,
        e_fused,
        mlp,
        s_cm,
        s_cm_cal,
        rho,
        s_sasv: fusion.value,
        fusion,
    })
}

/// Gradients of `dl_ds · s_sasv` with respect to every network parameter.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, dl_ds: f64) -> Result<ParamGradients, GraphError> {
    let mut grads = ParamGradients::zeros_like(params);
    backward_into(trace, params, dl_ds, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    trace: &ForwardTrace,
    params: &ModelParams,
    dl_ds: f64,
    grads: &mut ParamGradients,
) -> Result<(), GraphError> {
    let shape = params.shape();
    if trace.e1.len() != shape.d_asv
        || trace.e_fused.len() != shape.fused_dim()
        || trace.mlp.z1.len() != shape.h1
        || trace.mlp.z2.len() != shape.h2
        || grads.layout() != params.layout()
    {
        return Err(GraphError::TraceMismatch);
    }
    let g_a = dl_ds * trace.fusion.weight_asv;
    let g_c = dl_ds * trace.fusion.weight_cm;

    if params.is_trainable(Param::RhoRaw) {
        grads.slice_mut(Param::RhoRaw)[0] += dl_ds * trace.fusion.d_rho * params.rho_derivative();
    }

    // ASV branch.
    if g_a != 0.0 {
        let cal = params.asv_cal();
        let g = grads.slice_mut(Param::AsvCal);
        g[0] += g_a;
        g[1] += g_a * trace.s_asv;
        let g_cos = g_a * cal.w1;
        let inv = 1.0 / (trace.n1 * trace.n2);
        let k1 = trace.s_asv / (trace.n1 * trace.n1);
        let k2 = trace.s_asv / (trace.n2 * trace.n2);
        let g_w = grads.slice_mut(Param::WAsv);
        #[allow(clippy::needless_range_loop)]
        for i in 0..shape.d_asv {
            let d_e1 = trace.e2[i] * inv - k1 * trace.e1[i];
            let d_e2 = trace.e1[i] * inv - k2 * trace.e2[i];
            g_w[i] += g_cos * (d_e1 * trace.enr_asv[i] + d_e2 * trace.tst_asv[i]);
        }
    }

    // CM branch.
    if g_c != 0.0 {
        let cal = params.cm_cal();
        let g = grads.slice_mut(Param::CmCal);
        g[0] += g_c;
        g[1] += g_c * trace.s_cm;
        let g_out = g_c * cal.w1;
        mlp_backward(&params.mlp(), &trace.mlp, &trace.e_fused, g_out, grads);
    }
    Ok(())
}

fn mlp_backward(mlp: &MlpView<'_>, act: &MlpActivations, x: &[f64], g_out: f64, grads: &mut ParamGradients) {
    grads.slice_mut(Param::MlpB3)[0] += g_out;
    for (g, a) in grads.slice_mut(Param::MlpW3).iter_mut().zip(&act.a2) {
        *g += g_out * a;
    }
    let g_z2: Vec<f64> = mlp
        .w3
        .iter()
        .zip(&act.z2)
        .map(|(w, &z)| g_out * w * leaky_grad(z))
        .collect();

    for (g, gz) in grads.slice_mut(Param::MlpB2).iter_mut().zip(&g_z2) {
        *g += gz;
    }
    let mut g_a1 = vec![0.0; mlp.h1];
    for ((g_row, w_row), &gz) in grads
        .slice_mut(Param::MlpW2)
        .chunks_exact_mut(mlp.h1)
        .zip(mlp.w2.chunks_exact(mlp.h1))
        .zip(&g_z2)
    {
        for j in 0..mlp.h1 {
            g_row[j] += gz * act.a1[j];
            g_a1[j] += w_row[j] * gz;
        }
    }
    let g_z1: Vec<f64> = g_a1
        .iter()
        .zip(&act.z1)
        .map(|(g, &z)| g * leaky_grad(z))
        .collect();

    for (g, gz) in grads.slice_mut(Param::MlpB1).iter_mut().zip(&g_z1) {
        *g += gz;
    }
    for (g_row, &gz) in grads.slice_mut(Param::MlpW1).chunks_exact_mut(mlp.in_dim).zip(&g_z1) {
        if gz == 0.0 {
            continue;
        }
        for (g, xi) in g_row.iter_mut().zip(x) {
            *g += gz * xi;
        }
    }
}
