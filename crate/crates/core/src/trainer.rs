//! Mini-batch training of the fused back-end.
//!
//! Everything that consumes randomness is seeded from [`TrainConfig::seed`]
//! and gradients are reduced over fixed-size chunks in a fixed order, so a
//! run is bit-reproducible whatever the size of the thread pool.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::{Checkpoint, EmbeddingStore, Label, TrialRecord};
use crate::graph::{
    backward_into, forward, ForwardTrace, GraphError, ModelParams, NetShape, Param, ParamGradients, RhoMode,
    TrialTensors,
};
use crate::metrics::{min_adcf, sasv_eers, ClassScores, MetricsError};
use crate::objective::{combined_loss, LossConfig, ObjectiveError};

/// Trials per gradient-accumulation chunk. Part of the numerical definition
/// of a run: changing it changes summation order.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("id {id:?} missing from the {store} embedding store")]
    MissingEmbedding { id: String, store: &'static str },
    #[error("no {0} trials")]
    NoTrials(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("parameter {param}[{index}] became non-finite at epoch {epoch}")]
    NonFiniteParams {
        epoch: usize,
        param: &'static str,
        index: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Which epoch's parameters end up in the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectOn {
    /// Lowest dev min a-DCF; the earliest epoch wins ties.
    MinAdcf,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub rho_mode: RhoMode,
    pub loss: LossConfig,
    pub h1: usize,
    pub h2: usize,
    pub select_on: SelectOn,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 192,
            lr: 0.005,
            optimizer: Optimizer::ADAM,
            rho_mode: RhoMode::default(),
            loss: LossConfig::default(),
            h1: NetShape::DEFAULT_H1,
            h2: NetShape::DEFAULT_H2,
            select_on: SelectOn::MinAdcf,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr {} must be finite and nonnegative", self.lr)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "Adam needs beta1, beta2 in [0, 1) and eps > 0 (got {beta1}, {beta2}, {eps})"
                )));
            }
        }
        self.rho_mode.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn shape(&self, d_asv: usize, d_cm: usize) -> NetShape {
        NetShape::new(d_asv, d_cm).with_hidden(self.h1, self.h2)
    }
}

/// Trials with every id resolved to a row of f64 embeddings.
#[derive(Debug, Clone)]
pub struct TrialSet {
    asv: Vec<Vec<f64>>,
    cm: Vec<Vec<f64>>,
    /// `(enrol ASV row, test ASV row, test CM row)`.
    rows: Vec<(usize, usize, usize)>,
    labels: Vec<Label>,
    d_asv: usize,
    d_cm: usize,
}

impl TrialSet {
    pub fn new(trials: &[TrialRecord], asv: &EmbeddingStore, cm: &EmbeddingStore) -> Result<Self, TrainError> {
        let find = |store: &EmbeddingStore, id: &str, name: &'static str| {
            store.index_of(id).ok_or_else(|| TrainError::MissingEmbedding {
                id: id.to_string(),
                store: name,
            })
        };
        let mut rows = Vec::with_capacity(trials.len());
        for t in trials {
            rows.push((
                find(asv, &t.enrol_id, "ASV")?,
                find(asv, &t.test_id, "ASV")?,
                find(cm, &t.test_id, "CM")?,
            ));
        }
        Ok(Self {
            asv: asv.to_f64_rows(),
            cm: cm.to_f64_rows(),
            rows,
            labels: trials.iter().map(|t| t.label).collect(),
            d_asv: asv.dim(),
            d_cm: cm.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// `(d_asv, d_cm)` of the backing stores.
    pub fn dims(&self) -> (usize, usize) {
        (self.d_asv, self.d_cm)
    }

    pub fn tensors(&self, i: usize) -> TrialTensors<'_> {
        let (e, t, c) = self.rows[i];
        TrialTensors {
            enr_asv: &self.asv[e],
            tst_asv: &self.asv[t],
            tst_cm: &self.cm[c],
        }
    }
}

/// Fused scores for every trial, in order.
pub fn score_trials(params: &ModelParams, trials: &TrialSet) -> Result<Vec<f64>, GraphError> {
    (0..trials.len())
        .into_par_iter()
        .map(|i| forward(trials.tensors(i), params).map(|t| t.s_sasv))
        .collect()
}

/// Per-trial fused score together with the two calibrated branch scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchScores {
    pub s_sasv: f64,
    pub s_asv_cal: f64,
    pub s_cm_cal: f64,
}

pub fn score_branches(params: &ModelParams, trials: &TrialSet) -> Result<Vec<BranchScores>, GraphError> {
    (0..trials.len())
        .into_par_iter()
        .map(|i| {
            forward(trials.tensors(i), params).map(|t| BranchScores {
                s_sasv: t.s_sasv,
                s_asv_cal: t.s_asv_cal,
                s_cm_cal: t.s_cm_cal,
            })
        })
        .collect()
}

/// Shuffled partition of `0..n` into batches of `batch_size`, the last
/// possibly short. The permutation depends only on `(seed, epoch)`: each
/// epoch draws from its own ChaCha stream, so epoch `k` can be regenerated
/// without replaying earlier ones. Epochs count from 1; stream 0 belongs to
/// parameter initialisation.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Loss and gradient of one batch.
pub fn batch_gradient(
    params: &ModelParams,
    trials: &TrialSet,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, ParamGradients), TrainError> {
    let traces: Vec<ForwardTrace> = batch
        .par_iter()
        .map(|&i| forward(trials.tensors(i), params))
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = traces.iter().map(|t| t.s_sasv).collect();
    let labels: Vec<Label> = batch.iter().map(|&i| trials.labels[i]).collect();
    let out = combined_loss(&scores, &labels, params.tau_soft(), loss_cfg)?;

    let partials: Vec<ParamGradients> = traces
        .par_chunks(GRAD_CHUNK)
        .zip(out.d_scores.par_chunks(GRAD_CHUNK))
        .map(|(tr, ds)| {
            let mut g = ParamGradients::zeros_like(params);
            for (t, &d) in tr.iter().zip(ds) {
                backward_into(t, params, d, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_, GraphError>>()?;
    let mut grads = ParamGradients::zeros_like(params);
    for g in &partials {
        grads.add_assign(g);
    }
    grads.slice_mut(Param::TauSoft)[0] += out.d_tau;
    Ok((out.loss, grads))
}

/// Optimizer state over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Which entries of the flat buffer the optimizer may touch.
    mask: Vec<bool>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, lr: f64, params: &ModelParams) -> Self {
        let n = params.values().len();
        let mut mask = vec![false; n];
        for p in Param::ALL {
            if params.is_trainable(p) {
                mask[params.layout().range(p)].fill(true);
            }
        }
        Self {
            optimizer,
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            mask,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGradients) {
        self.step += 1;
        let g = grads.values();
        let theta = params.values_mut();
        match self.optimizer {
            Optimizer::Sgd => {
                for i in (0..theta.len()).filter(|&i| self.mask[i]) {
                    theta[i] -= self.lr * g[i];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for i in (0..theta.len()).filter(|&i| self.mask[i]) {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    theta[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Training objective over every trial of `trials` at once.
pub fn dataset_loss(params: &ModelParams, trials: &TrialSet, loss_cfg: &LossConfig) -> Result<f64, TrainError> {
    let scores = score_trials(params, trials)?;
    Ok(combined_loss(&scores, trials.labels(), params.tau_soft(), loss_cfg)?.loss)
}

/// Dev-set summary of one set of parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevMetrics {
    pub min_adcf: f64,
    pub min_adcf_normalized: f64,
    pub argmin_tau: f64,
    pub sasv_eer: Option<f64>,
}

pub fn evaluate(params: &ModelParams, dev: &TrialSet, loss_cfg: &LossConfig) -> Result<DevMetrics, TrainError> {
    let scores = score_trials(params, dev)?;
    let classes = ClassScores::from_labeled(&scores, dev.labels());
    let sweep = min_adcf(&classes, &loss_cfg.operating_point)?;
    Ok(DevMetrics {
        min_adcf: sweep.min_adcf,
        min_adcf_normalized: sweep.min_adcf_normalized,
        argmin_tau: sweep.argmin_tau,
        sasv_eer: sasv_eers(&classes).sasv.map(|e| e.eer),
    })
}

/// One row of the training log, written after the epoch's last update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss over the whole training set with the end-of-epoch parameters.
    pub train_loss: f64,
    /// Trial-weighted mean of the batch losses seen during the epoch.
    pub mean_batch_loss: f64,
    pub dev: DevMetrics,
    pub rho: f64,
    pub tau_soft: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 means the initial parameters,
    /// which only happens when no epoch was run.
    pub selected_epoch: usize,
}

impl TrainReport {
    pub fn selected(&self) -> Option<&EpochLog> {
        self.selected_epoch.checked_sub(1).map(|i| &self.epochs[i])
    }

    /// Tab-separated log with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tmean_batch_loss\tdev_min_adcf\tdev_min_adcf_norm\tdev_sasv_eer\trho\ttau_soft\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}",
                e.epoch,
                e.train_loss,
                e.mean_batch_loss,
                e.dev.min_adcf,
                e.dev.min_adcf_normalized,
                opt(e.dev.sasv_eer),
                e.rho,
                e.tau_soft,
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected parameters, already rounded through f32 so they equal what
    /// the checkpoint reloads to.
    pub params: ModelParams,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.params.to_checkpoint();
        ckpt.metadata
            .insert("selected_epoch".into(), self.report.selected_epoch.to_string());
        ckpt
    }
}

/// Trains from scratch. `on_epoch` sees each log row as it is produced.
pub fn fit(
    cfg: &TrainConfig,
    train: &TrialSet,
    dev: &TrialSet,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::NoTrials("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::NoTrials("dev"));
    }
    let (d_asv, d_cm) = train.dims();
    let mut params = ModelParams::init(cfg.shape(d_asv, d_cm), cfg.rho_mode, cfg.seed)?;
    params.check_embedding_dims(dev.dims().0, dev.dims().1)?;

    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, &params);
    let mut best = params.quantized();
    let mut epochs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut selected = 0;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for (b, batch) in make_batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let (loss, grads) = batch_gradient(&params, train, batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut params, &grads);
            if let Some((p, index)) = params.first_non_finite() {
                return Err(TrainError::NonFiniteParams {
                    epoch,
                    param: p.name(),
                    index,
                });
            }
        }
        // Evaluate what would be saved, so logged numbers match a reload.
        let q = params.quantized();
        let row = EpochLog {
            epoch,
            train_loss: dataset_loss(&q, train, &cfg.loss)?,
            mean_batch_loss: loss_sum / train.len() as f64,
            dev: evaluate(&q, dev, &cfg.loss)?,
            rho: q.rho(),
            tau_soft: q.tau_soft(),
        };
        on_epoch(&row);
        let better = match (cfg.select_on, selected) {
            (_, 0) | (SelectOn::FinalEpoch, _) => true,
            (SelectOn::MinAdcf, s) => row.dev.min_adcf < epochs[s - 1].dev.min_adcf,
        };
        if better {
            selected = epoch;
            best = q;
        }
        epochs.push(row);
    }

    Ok(TrainOutcome {
        params: best,
        report: TrainReport {
            epochs,
            selected_epoch: selected,
        },
    })
}
