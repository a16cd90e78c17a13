//! Deterministic synthetic SASV corpora.
//!
//! Speakers are isotropic unit vectors. An utterance's ASV embedding is the
//! unit-normalised sum of its speaker vector and Gaussian noise of expected
//! norm `asv_noise`. Spoofed utterances imitate a real speaker, so their ASV
//! embeddings follow the same distribution as that speaker's bona fide ones;
//! only the CM embedding separates them: bona fide CM vectors scatter around a
//! base point with per-component deviation `cm_noise`, spoofed ones around the
//! base point moved `spoof_shift` along a fixed unit direction.
//!
//! Speakers are split into disjoint train and dev sets. Each speaker's first
//! bona fide utterance is its enrolment.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataio::{write_embeddings, write_trials, DataError, EmbeddingStore, Label, TrialRecord};

pub const ASV_FILE: &str = "asv.semb";
pub const CM_FILE: &str = "cm.semb";
pub const TRAIN_FILE: &str = "train.trl";
pub const DEV_FILE: &str = "dev.trl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?} (expected easy, hard or no-spoof-signal)")]
    UnknownPreset(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub d_asv: usize,
    pub d_cm: usize,
    /// Expected norm of the within-speaker ASV perturbation.
    pub asv_noise: f64,
    /// Per-component standard deviation of CM embeddings around their centre.
    pub cm_noise: f64,
    /// Distance between bona fide and spoof CM centres.
    pub spoof_shift: f64,
    /// Fraction of trials labelled spoof; the rest split evenly between
    /// target and nontarget. 1/3 gives the balanced 1:1:1 protocol.
    pub spoof_fraction: f64,
    /// Fraction of speakers held out for the dev split.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 50,
            utts_per_speaker: 10,
            d_asv: 192,
            d_cm: 160,
            asv_noise: 0.05,
            cm_noise: 0.2,
            spoof_shift: 4.0,
            spoof_fraction: 1.0 / 3.0,
            dev_fraction: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Easy,
    Hard,
    NoSpoofSignal,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Easy, Preset::Hard, Preset::NoSpoofSignal];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::Hard => "hard",
            Preset::NoSpoofSignal => "no-spoof-signal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SynthError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| SynthError::UnknownPreset(name.to_string()))
    }
}

/// Fixed parameter sets. All share the defaults except:
///
/// | preset            | asv_noise | spoof_shift |
/// |-------------------|-----------|-------------|
/// | `easy`            | 0.05      | 4.0         |
/// | `hard`            | 0.4       | 0.8         |
/// | `no-spoof-signal` | 0.05      | 0.0         |
pub fn preset(p: Preset) -> SynthConfig {
    let base = SynthConfig::default();
    match p {
        Preset::Easy => base,
        Preset::Hard => SynthConfig {
            asv_noise: 0.4,
            spoof_shift: 0.8,
            ..base
        },
        Preset::NoSpoofSignal => SynthConfig {
            spoof_shift: 0.0,
            ..base
        },
    }
}

pub fn preset_by_name(name: &str) -> Result<SynthConfig, SynthError> {
    Preset::from_name(name).map(preset)
}

impl SynthConfig {
    pub fn n_dev_speakers(&self) -> usize {
        (self.dev_fraction * self.n_speakers as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.d_asv < 2 || self.d_cm < 2 {
            return bad(format!("dims must be >= 2 (d_asv={}, d_cm={})", self.d_asv, self.d_cm));
        }
        if self.utts_per_speaker < 2 {
            return bad("utts_per_speaker must be >= 2 (one enrolment plus tests)".into());
        }
        for (name, v) in [
            ("asv_noise", self.asv_noise),
            ("cm_noise", self.cm_noise),
            ("spoof_shift", self.spoof_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [("spoof_fraction", self.spoof_fraction), ("dev_fraction", self.dev_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let dev = self.n_dev_speakers();
        if dev < 2 || self.n_speakers < dev + 2 {
            return bad(format!(
                "need at least 2 train and 2 dev speakers; {} speakers with dev_fraction {} gives {} dev",
                self.n_speakers, self.dev_fraction, dev
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub asv: EmbeddingStore,
    pub cm: EmbeddingStore,
    pub train: Vec<TrialRecord>,
    pub dev: Vec<TrialRecord>,
}

impl SyntheticCorpus {
    /// Writes `asv.semb`, `cm.semb`, `train.trl` and `dev.trl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        write_embeddings(&self.asv, dir.join(ASV_FILE))?;
        write_embeddings(&self.cm, dir.join(CM_FILE))?;
        write_trials(&self.train, dir.join(TRAIN_FILE))?;
        write_trials(&self.dev, dir.join(DEV_FILE))
    }
}

pub fn bona_fide_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:04}-bf{utt:03}")
}

pub fn spoof_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:04}-sp{utt:03}")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let utts = cfg.utts_per_speaker;

    let speakers: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| unit(&gaussian(&mut rng, cfg.d_asv, 1.0)))
        .collect();
    let cm_base = unit(&gaussian(&mut rng, cfg.d_cm, 1.0));
    let spoof_dir = unit(&gaussian(&mut rng, cfg.d_cm, 1.0));

    let asv_noise_scale = cfg.asv_noise / (cfg.d_asv as f64).sqrt();
    let mut asv = EmbeddingStore::new(cfg.d_asv)?;
    let mut cm = EmbeddingStore::new(cfg.d_cm)?;
    for (s, spk) in speakers.iter().enumerate() {
        for (spoofed, make_id) in [(false, bona_fide_id as fn(usize, usize) -> String), (true, spoof_id)] {
            for u in 0..utts {
                let id = make_id(s, u);
                let noise = gaussian(&mut rng, cfg.d_asv, asv_noise_scale);
                let e: Vec<f64> = spk.iter().zip(&noise).map(|(a, b)| a + b).collect();
                asv.insert(id.clone(), to_f32(&unit(&e)))?;

                let shift = if spoofed { cfg.spoof_shift } else { 0.0 };
                let noise = gaussian(&mut rng, cfg.d_cm, cfg.cm_noise);
                let c: Vec<f64> = (0..cfg.d_cm)
                    .map(|i| cm_base[i] + shift * spoof_dir[i] + noise[i])
                    .collect();
                cm.insert(id, to_f32(&c))?;
            }
        }
    }

    let n_dev = cfg.n_dev_speakers();
    let n_train = cfg.n_speakers - n_dev;
    let train_speakers: Vec<usize> = (0..n_train).collect();
    let dev_speakers: Vec<usize> = (n_train..cfg.n_speakers).collect();
    let train = make_trials(&mut rng, &train_speakers, cfg)?;
    let dev = make_trials(&mut rng, &dev_speakers, cfg)?;
    Ok(SyntheticCorpus { asv, cm, train, dev })
}

/// Unique trials for one speaker split, shuffled.
fn make_trials(rng: &mut ChaCha8Rng, speakers: &[usize], cfg: &SynthConfig) -> Result<Vec<TrialRecord>, SynthError> {
    let n_spk = speakers.len();
    let tests = cfg.utts_per_speaker - 1;
    let total = 3 * n_spk * tests;
    let n_spoof = (cfg.spoof_fraction * total as f64).round() as usize;
    let n_target = (total - n_spoof) / 2;
    let n_non = total - n_spoof - n_target;

    let target_pool = n_spk * tests;
    let non_pool = n_spk * (n_spk - 1) * tests;
    let spoof_pool = n_spk * cfg.utts_per_speaker;

    let mut trials = Vec::with_capacity(total);
    for k in sample(rng, target_pool, n_target) {
        let spk = speakers[k / tests];
        trials.push(TrialRecord::new(
            bona_fide_id(spk, 0),
            bona_fide_id(spk, 1 + k % tests),
            Label::Target,
        )?);
    }
    for k in sample(rng, non_pool, n_non) {
        let (claimant, rest) = (k / ((n_spk - 1) * tests), k % ((n_spk - 1) * tests));
        let other = rest / tests;
        // Skip the claimant itself among the other speakers.
        let other = if other >= claimant { other + 1 } else { other };
        trials.push(TrialRecord::new(
            bona_fide_id(speakers[claimant], 0),
            bona_fide_id(speakers[other], 1 + rest % tests),
            Label::Nontarget,
        )?);
    }
    for k in sample(rng, spoof_pool, n_spoof) {
        let spk = speakers[k / cfg.utts_per_speaker];
        trials.push(TrialRecord::new(
            bona_fide_id(spk, 0),
            spoof_id(spk, k % cfg.utts_per_speaker),
            Label::Spoof,
        )?);
    }
    trials.shuffle(rng);
    Ok(trials)
}

/// `amount` distinct indices below `pool` in sorted order, capped at `pool`.
fn sample(rng: &mut ChaCha8Rng, pool: usize, amount: usize) -> Vec<usize> {
    let mut picked = index::sample(rng, pool, amount.min(pool)).into_vec();
    picked.sort_unstable();
    picked
}
