//! Trainable parameter storage.
//!
//! Every trainable tensor lives in one flat `f64` buffer, addressed through a
//! [`Layout`]. Gradients and optimizer moments share the layout, so update
//! rules are plain loops over slices.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::GraphError;
use crate::dataio::{Checkpoint, DataError, Tensor};

/// Clamp applied to a trainable fusion weight.
pub const RHO_EPS: f64 = 1e-7;

/// Network dimensions: embedding sizes and the two hidden widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub d_asv: usize,
    pub d_cm: usize,
    pub h1: usize,
    pub h2: usize,
}

impl NetShape {
    pub const DEFAULT_H1: usize = 384;
    pub const DEFAULT_H2: usize = 160;

    pub fn new(d_asv: usize, d_cm: usize) -> Self {
        Self {
            d_asv,
            d_cm,
            h1: Self::DEFAULT_H1,
            h2: Self::DEFAULT_H2,
        }
    }

    pub fn with_hidden(mut self, h1: usize, h2: usize) -> Self {
        self.h1 = h1;
        self.h2 = h2;
        self
    }

    pub fn fused_dim(&self) -> usize {
        self.d_asv + self.d_cm
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    WAsv,
    AsvCal,
    CmCal,
    MlpW1,
    MlpB1,
    MlpW2,
    MlpB2,
    MlpW3,
    MlpB3,
    RhoRaw,
    TauSoft,
}

impl Param {
    pub const ALL: [Param; 11] = [
        Param::WAsv,
        Param::AsvCal,
        Param::CmCal,
        Param::MlpW1,
        Param::MlpB1,
        Param::MlpW2,
        Param::MlpB2,
        Param::MlpW3,
        Param::MlpB3,
        Param::RhoRaw,
        Param::TauSoft,
    ];

    /// Tensor name used in checkpoints.
    pub fn name(self) -> &'static str {
        match self {
            Param::WAsv => "w_asv",
            Param::AsvCal => "asv_cal",
            Param::CmCal => "cm_cal",
            Param::MlpW1 => "mlp.w1",
            Param::MlpB1 => "mlp.b1",
            Param::MlpW2 => "mlp.w2",
            Param::MlpB2 => "mlp.b2",
            Param::MlpW3 => "mlp.w3",
            Param::MlpB3 => "mlp.b3",
            Param::RhoRaw => "rho_raw",
            Param::TauSoft => "tau_soft",
        }
    }

    /// True for tensors that belong to the countermeasure branch.
    pub fn is_cm_branch(self) -> bool {
        matches!(
            self,
            Param::CmCal | Param::MlpW1 | Param::MlpB1 | Param::MlpW2 | Param::MlpB2 | Param::MlpW3 | Param::MlpB3
        )
    }

    fn index(self) -> usize {
        Param::ALL.iter().position(|&p| p == self).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    shape: NetShape,
    offsets: [usize; 12],
}

impl Layout {
    pub fn new(shape: NetShape) -> Self {
        let mut offsets = [0usize; 12];
        for (i, p) in Param::ALL.iter().enumerate() {
            offsets[i + 1] = offsets[i] + tensor_shape(&shape, *p).iter().product::<usize>();
        }
        Self { shape, offsets }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn range(&self, p: Param) -> Range<usize> {
        let i = p.index();
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len(&self) -> usize {
        self.offsets[11]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor_shape(&self, p: Param) -> Vec<usize> {
        tensor_shape(&self.shape, p)
    }
}

fn tensor_shape(s: &NetShape, p: Param) -> Vec<usize> {
    match p {
        Param::WAsv => vec![s.d_asv],
        Param::AsvCal | Param::CmCal => vec![2],
        Param::MlpW1 => vec![s.h1, s.fused_dim()],
        Param::MlpB1 => vec![s.h1],
        Param::MlpW2 => vec![s.h2, s.h1],
        Param::MlpB2 => vec![s.h2],
        Param::MlpW3 => vec![1, s.h2],
        Param::MlpB3 | Param::RhoRaw | Param::TauSoft => vec![1],
    }
}

/// How the fusion weight ρ̃ is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoMode {
    /// Fixed ρ̃ in [0, 1]; `rho_raw` is ignored and never updated.
    Frozen(f64),
    /// ρ̃ = logistic(`rho_raw`), clamped to [`RHO_EPS`], 1 − `RHO_EPS`].
    Trainable,
}

impl Default for RhoMode {
    fn default() -> Self {
        RhoMode::Frozen(0.5)
    }
}

impl RhoMode {
    pub fn validate(self) -> Result<Self, GraphError> {
        match self {
            RhoMode::Frozen(v) if !(0.0..=1.0).contains(&v) => Err(GraphError::InvalidRho(v)),
            m => Ok(m),
        }
    }
}

/// Overflow-free logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine score calibration `w0 + w1·s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub w0: f64,
    pub w1: f64,
}

/// Borrowed view of the countermeasure MLP weights (row-major, `out × in`).
#[derive(Debug, Clone, Copy)]
pub struct MlpView<'a> {
    pub in_dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub w3: &'a [f64],
    pub b3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    rho_mode: RhoMode,
    values: Vec<f64>,
}

impl ModelParams {
    /// Starting point: unit reweighting, identity calibrations, Glorot-uniform
    /// MLP weights with zero biases, τ = 0 and `rho_raw` = 0.
    pub fn init(shape: NetShape, rho_mode: RhoMode, seed: u64) -> Result<Self, GraphError> {
        let rho_mode = rho_mode.validate()?;
        if shape.d_asv == 0 || shape.d_cm == 0 || shape.h1 == 0 || shape.h2 == 0 {
            return Err(GraphError::EmptyShape(shape));
        }
        let layout = Layout::new(shape);
        let mut p = Self {
            layout,
            rho_mode,
            values: vec![0.0; layout.len()],
        };
        p.slice_mut(Param::WAsv).fill(1.0);
        p.slice_mut(Param::AsvCal)[1] = 1.0;
        p.slice_mut(Param::CmCal)[1] = 1.0;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, fan_in, fan_out) in [
            (Param::MlpW1, shape.fused_dim(), shape.h1),
            (Param::MlpW2, shape.h1, shape.h2),
            (Param::MlpW3, shape.h2, 1),
        ] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for v in p.slice_mut(w) {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(p)
    }

    /// Wraps a raw buffer laid out by `Layout::new(shape)`.
    pub fn from_values(shape: NetShape, rho_mode: RhoMode, values: Vec<f64>) -> Result<Self, GraphError> {
        let layout = Layout::new(shape);
        if values.len() != layout.len() {
            return Err(GraphError::DimensionMismatch {
                what: "parameter buffer",
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            layout,
            rho_mode: rho_mode.validate()?,
            values,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn shape(&self) -> NetShape {
        self.layout.shape
    }

    pub fn rho_mode(&self) -> RhoMode {
        self.rho_mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, p: Param) -> &[f64] {
        &self.values[self.layout.range(p)]
    }

    pub fn slice_mut(&mut self, p: Param) -> &mut [f64] {
        let r = self.layout.range(p);
        &mut self.values[r]
    }

    pub fn w_asv(&self) -> &[f64] {
        self.slice(Param::WAsv)
    }

    pub fn asv_cal(&self) -> Affine {
        let s = self.slice(Param::AsvCal);
        Affine { w0: s[0], w1: s[1] }
    }

    pub fn cm_cal(&self) -> Affine {
        let s = self.slice(Param::CmCal);
        Affine { w0: s[0], w1: s[1] }
    }

    pub fn set_asv_cal(&mut self, cal: Affine) {
        self.slice_mut(Param::AsvCal).copy_from_slice(&[cal.w0, cal.w1]);
    }

    pub fn set_cm_cal(&mut self, cal: Affine) {
        self.slice_mut(Param::CmCal).copy_from_slice(&[cal.w0, cal.w1]);
    }

    pub fn mlp(&self) -> MlpView<'_> {
        let s = self.layout.shape;
        MlpView {
            in_dim: s.fused_dim(),
            h1: s.h1,
            h2: s.h2,
            w1: self.slice(Param::MlpW1),
            b1: self.slice(Param::MlpB1),
            w2: self.slice(Param::MlpW2),
            b2: self.slice(Param::MlpB2),
            w3: self.slice(Param::MlpW3),
            b3: self.slice(Param::MlpB3)[0],
        }
    }

    pub fn rho_raw(&self) -> f64 {
        self.slice(Param::RhoRaw)[0]
    }

    /// Effective fusion weight ρ̃.
    pub fn rho(&self) -> f64 {
        match self.rho_mode {
            RhoMode::Frozen(v) => v,
            RhoMode::Trainable => logistic(self.rho_raw()).clamp(RHO_EPS, 1.0 - RHO_EPS),
        }
    }

    /// dρ̃/d`rho_raw`; zero when frozen or when the clamp is active.
    pub fn rho_derivative(&self) -> f64 {
        match self.rho_mode {
            RhoMode::Frozen(_) => 0.0,
            RhoMode::Trainable => {
                let r = logistic(self.rho_raw());
                if (RHO_EPS..=1.0 - RHO_EPS).contains(&r) {
                    r * (1.0 - r)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tau_soft(&self) -> f64 {
        self.slice(Param::TauSoft)[0]
    }

    /// Whether the optimizer may update `p`.
    pub fn is_trainable(&self, p: Param) -> bool {
        !(p == Param::RhoRaw && matches!(self.rho_mode, RhoMode::Frozen(_)))
    }

    pub fn first_non_finite(&self) -> Option<(Param, usize)> {
        Param::ALL.iter().find_map(|&p| {
            self.slice(p)
                .iter()
                .position(|v| !v.is_finite())
                .map(|i| (p, i))
        })
    }

    /// Copy with every value rounded through f32, i.e. exactly what a
    /// checkpoint round trip yields.
    pub fn quantized(&self) -> Self {
        let mut q = self.clone();
        for v in &mut q.values {
            *v = f64::from(*v as f32);
        }
        q
    }

    pub fn check_embedding_dims(&self, d_asv: usize, d_cm: usize) -> Result<(), GraphError> {
        let s = self.layout.shape;
        if s.d_asv != d_asv {
            return Err(GraphError::DimensionMismatch {
                what: "ASV embedding dim",
                expected: s.d_asv,
                found: d_asv,
            });
        }
        if s.d_cm != d_cm {
            return Err(GraphError::DimensionMismatch {
                what: "CM embedding dim",
                expected: s.d_cm,
                found: d_cm,
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = self.layout.shape;
        let mut ckpt = Checkpoint::new();
        let meta = &mut ckpt.metadata;
        meta.insert("d_asv".into(), s.d_asv.to_string());
        meta.insert("d_cm".into(), s.d_cm.to_string());
        meta.insert("h1".into(), s.h1.to_string());
        meta.insert("h2".into(), s.h2.to_string());
        meta.insert("activation".into(), "leaky_relu:0.01".into());
        meta.insert("tau_mode".into(), "trainable".into());
        match self.rho_mode {
            RhoMode::Frozen(v) => {
                meta.insert("rho_mode".into(), "frozen".into());
                meta.insert("rho_value".into(), v.to_string());
            }
            RhoMode::Trainable => {
                meta.insert("rho_mode".into(), "trainable".into());
            }
        }
        for p in Param::ALL {
            let data = self.slice(p).iter().map(|&v| v as f32).collect();
            let tensor = Tensor::new(p.name(), self.layout.tensor_shape(p), data).expect("layout shapes are consistent");
            ckpt.add_tensor(p.name(), tensor).expect("names are unique");
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, GraphError> {
        let shape = NetShape {
            d_asv: ckpt.meta_usize("d_asv")?,
            d_cm: ckpt.meta_usize("d_cm")?,
            h1: ckpt.meta_usize("h1")?,
            h2: ckpt.meta_usize("h2")?,
        };
        let bad = |key: &str, value: &str| {
            GraphError::Data(DataError::BadMetadata {
                key: key.to_string(),
                value: value.to_string(),
            })
        };
        let rho_mode = match ckpt.meta("rho_mode")? {
            "trainable" => RhoMode::Trainable,
            "frozen" => {
                let raw = ckpt.meta("rho_value")?;
                let v: f64 = raw.parse().map_err(|_| bad("rho_value", raw))?;
                RhoMode::Frozen(v)
            }
            other => return Err(bad("rho_mode", other)),
        };
        let layout = Layout::new(shape);
        let mut values = Vec::with_capacity(layout.len());
        for p in Param::ALL {
            let t = ckpt.tensor(p.name())?;
            let expected = layout.tensor_shape(p);
            if t.shape != expected {
                return Err(DataError::ShapeMismatch {
                    tensor: p.name().to_string(),
                    expected,
                    found: t.shape.clone(),
                }
                .into());
            }
            values.extend(t.data.iter().map(|&v| f64::from(v)));
        }
        if let Some((name, _)) = ckpt.tensors().find(|(n, _)| !Param::ALL.iter().any(|p| p.name() == *n)) {
            return Err(GraphError::UnexpectedTensor(name.to_string()));
        }
        Self::from_values(shape, rho_mode, values)
    }
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self::zeros(params.layout)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, p: Param) -> &[f64] {
        &self.values[self.layout.range(p)]
    }

    pub fn slice_mut(&mut self, p: Param) -> &mut [f64] {
        let r = self.layout.range(p);
        &mut self.values[r]
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn clear(&mut self) {
        self.values.fill(0.0);
    }
}
