//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasv_core::dataio::{
    format_scores, format_trials, parse_scores, parse_trials, Checkpoint, EmbeddingStore, Label, ScoreSet,
    Tensor, TrialRecord,
};
use sasv_core::graph::{forward, fuse, fuse_parts, ModelParams, NetShape, Param, RhoMode};
use sasv_core::metrics::{ClassScores, Eer};
use sasv_core::objective::{AdcfOperatingPoint, LossConfig};
use sasv_core::trainer::{batch_gradient, TrialSet};

// ---------------------------------------------------------------------------
// Gradient cases

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Minimum distance of every hidden pre-activation from the rectifier kink;
/// closer than this the central difference straddles it.
pub const KINK_MARGIN: f64 = 1e-3;

pub struct Case {
    pub params: ModelParams,
    pub trials: TrialSet,
    pub batch: Vec<usize>,
    pub loss: LossConfig,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32 * scale as f32).collect()
}

pub fn random_case(seed: u64, rho_mode: RhoMode) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape::new(4, 4).with_hidden(5, 3);
    let n_utts = 6;
    let mut asv = EmbeddingStore::new(4).unwrap();
    let mut cm = EmbeddingStore::new(4).unwrap();
    for u in 0..n_utts {
        asv.insert(format!("u{u}"), uniform_vec(&mut rng, 4, 1.0)).unwrap();
        cm.insert(format!("u{u}"), uniform_vec(&mut rng, 4, 1.5)).unwrap();
    }
    let mut trials = Vec::new();
    for (i, label) in Label::ALL.iter().cycle().take(9).enumerate() {
        let e = i % n_utts;
        let t = (i + 1 + i / n_utts) % n_utts;
        trials.push(TrialRecord::new(format!("u{e}"), format!("u{t}"), *label).unwrap());
    }
    let trials = TrialSet::new(&trials, &asv, &cm).unwrap();

    let params = loop {
        let mut params = ModelParams::init(shape, rho_mode, rng.random()).unwrap();
        for v in params.values_mut() {
            *v += rng.random::<f64>() - 0.5;
        }
        // Keep the calibration slopes away from zero so both branches matter.
        params.slice_mut(Param::AsvCal)[1] = 1.0 + rng.random::<f64>();
        params.slice_mut(Param::CmCal)[1] = 0.5 + rng.random::<f64>();
        params.slice_mut(Param::RhoRaw)[0] = rng.random::<f64>() * 2.0 - 1.0;
        if clear_of_kinks(&params, &trials) {
            break params;
        }
    };

    let loss = LossConfig {
        lambda_bce: rng.random::<f64>(),
        alpha: 1.0 + 9.0 * rng.random::<f64>(),
        ..LossConfig::default()
    };
    Case {
        params,
        trials,
        batch: (0..9).collect(),
        loss,
    }
}

fn clear_of_kinks(params: &ModelParams, trials: &TrialSet) -> bool {
    (0..trials.len()).all(|i| {
        let t = forward(trials.tensors(i), params).unwrap();
        t.mlp.z1.iter().chain(&t.mlp.z2).all(|z| z.abs() > KINK_MARGIN)
    })
}

/// Largest relative error over all coordinates, with the denominator
/// floored at 1e-6 so that vanishing gradients are compared absolutely.
pub fn max_relative_error(case: &Case) -> (f64, String) {
    let (_, analytic) = batch_gradient(&case.params, &case.trials, &case.batch, &case.loss).unwrap();
    let loss_at = |p: &ModelParams| batch_gradient(p, &case.trials, &case.batch, &case.loss).unwrap().0;
    let mut worst = (0.0, String::new());
    for p in Param::ALL {
        let range = case.params.layout().range(p);
        for (k, i) in range.enumerate() {
            let mut plus = case.params.clone();
            plus.values_mut()[i] += FD_STEP;
            let mut minus = case.params.clone();
            minus.values_mut()[i] -= FD_STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            let numeric = if case.params.is_trainable(p) { numeric } else { 0.0 };
            let a = analytic.values()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{}[{k}]: analytic {a:e}, numeric {numeric:e}", p.name()));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Fusion

pub const FUSION_TOL: f64 = 1e-12;

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Checks the fusion on a 50 x 50 x 11 grid over a, c in [-10, 10] and
/// ρ in {0, 0.1, ..., 1}. Returns the number of points checked.
pub fn check_fusion_grid() -> Result<usize, String> {
    let grid = linspace(-10.0, 10.0, 50);
    let rhos: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let mut n = 0;
    for &a in &grid {
        for &c in &grid {
            for &rho in &rhos {
                check_fusion_point(a, c, rho)?;
                n += 1;
            }
        }
    }
    Ok(n)
}

pub fn check_fusion_point(a: f64, c: f64, rho: f64) -> Result<(), String> {
    let at = || format!("a={a} c={c} rho={rho}");
    let s = fuse(a, c, rho);
    if rho == 0.0 && s != a {
        return Err(format!("{}: rho=0 gave {s}", at()));
    }
    if rho == 1.0 && s != c {
        return Err(format!("{}: rho=1 gave {s}", at()));
    }
    // Direct evaluation; exact enough for |a|, |c| <= 10.
    let direct = -((1.0 - rho) * (-a).exp() + rho * (-c).exp()).ln();
    if (s - direct).abs() > FUSION_TOL {
        return Err(format!("{}: {s} vs direct {direct}", at()));
    }
    let (lo, hi) = (a.min(c), a.max(c));
    if s < lo - FUSION_TOL || s > hi + FUSION_TOL {
        return Err(format!("{}: {s} outside [{lo}, {hi}]", at()));
    }
    let swapped = fuse(c, a, 1.0 - rho);
    if (s - swapped).abs() > FUSION_TOL {
        return Err(format!("{}: swap gave {swapped}, expected {s}", at()));
    }
    if a == c && (s - a).abs() > FUSION_TOL {
        return Err(format!("{}: equal inputs fused to {s}", at()));
    }
    let parts = fuse_parts(a, c, rho);
    if (parts.weight_asv + parts.weight_cm - 1.0).abs() > FUSION_TOL {
        return Err(format!("{}: weights sum to {}", at(), parts.weight_asv + parts.weight_cm));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metric oracles

pub const METRIC_TOL: f64 = 1e-12;

/// Random class scores. Half of the instances snap scores to a coarse grid
/// so that ties within and across classes are common. The spoof class is
/// occasionally empty.
pub fn random_class_scores(rng: &mut ChaCha8Rng) -> ClassScores {
    let snap = rng.random_bool(0.5);
    let sizes = [
        rng.random_range(1..=50),
        rng.random_range(1..=50),
        if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=50) },
    ];
    let means = [1.0, -0.5, 0.0];
    let mut classes = sizes.iter().zip(means).map(|(&n, mean)| {
        (0..n)
            .map(|_| {
                let s: f64 = mean + 6.0 * (rng.random::<f64>() - 0.5);
                if snap {
                    (s * 2.0).round() / 2.0
                } else {
                    s
                }
            })
            .collect::<Vec<f64>>()
    });
    let target = classes.next().unwrap();
    let nontarget = classes.next().unwrap();
    let spoof = classes.next().unwrap();
    ClassScores {
        target,
        nontarget,
        spoof,
    }
}

fn frac(errors: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        errors as f64 / total as f64
    }
}

/// a-DCF at τ by direct counting: a trial is accepted iff its score exceeds τ.
pub fn brute_adcf(scores: &ClassScores, tau: f64, op: &AdcfOperatingPoint) -> f64 {
    let miss = scores.target.iter().filter(|&&s| s <= tau).count();
    let fa_non = scores.nontarget.iter().filter(|&&s| s > tau).count();
    let fa_spf = scores.spoof.iter().filter(|&&s| s > tau).count();
    op.c_miss * op.pi_tar * frac(miss, scores.target.len())
        + op.c_fa_non * op.pi_non * frac(fa_non, scores.nontarget.len())
        + op.c_fa_spf * op.pi_spf * frac(fa_spf, scores.spoof.len())
}

fn all_scores(scores: &ClassScores) -> Vec<f64> {
    let mut all: Vec<f64> = scores
        .target
        .iter()
        .chain(&scores.nontarget)
        .chain(&scores.spoof)
        .copied()
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Candidate thresholds: below every score, then each distinct score.
/// Between two consecutive candidates the decisions do not change.
fn brute_candidates(scores: &ClassScores) -> Vec<f64> {
    let all = all_scores(scores);
    std::iter::once(all[0] - 1.0).chain(all).collect()
}

/// (min a-DCF, smallest minimising candidate).
pub fn brute_min_adcf(scores: &ClassScores, op: &AdcfOperatingPoint) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN);
    for tau in brute_candidates(scores) {
        let c = brute_adcf(scores, tau, op);
        if c < best.0 {
            best = (c, tau);
        }
    }
    best
}

/// Compares `min_adcf` with the brute-force sweep, including the argmin.
pub fn check_min_adcf(scores: &ClassScores, op: &AdcfOperatingPoint) -> Result<(), String> {
    let got = sasv_core::metrics::min_adcf(scores, op).map_err(|e| e.to_string())?;
    let (want, tau_b) = brute_min_adcf(scores, op);
    if (got.min_adcf - want).abs() > METRIC_TOL {
        return Err(format!("min a-DCF {} vs brute force {want}", got.min_adcf));
    }
    let at_argmin = brute_adcf(scores, got.argmin_tau, op);
    if (at_argmin - want).abs() > METRIC_TOL {
        return Err(format!("cost at argmin τ {} is {at_argmin}, min is {want}", got.argmin_tau));
    }
    // Same decisions as the smallest minimising candidate.
    let all = all_scores(scores);
    if all.iter().any(|&s| (s > tau_b) != (s > got.argmin_tau)) {
        return Err(format!("argmin τ {} is not the smallest minimiser {tau_b}", got.argmin_tau));
    }
    Ok(())
}

/// EER by direct counting at every candidate threshold, interpolated
/// between the last point with P_miss < P_fa and the first with P_miss >= P_fa.
pub fn brute_eer(pos: &[f64], neg: &[f64]) -> f64 {
    let two = ClassScores {
        target: pos.to_vec(),
        nontarget: neg.to_vec(),
        spoof: vec![],
    };
    let rates: Vec<(f64, f64)> = brute_candidates(&two)
        .into_iter()
        .map(|tau| {
            (
                frac(pos.iter().filter(|&&s| s <= tau).count(), pos.len()),
                frac(neg.iter().filter(|&&s| s > tau).count(), neg.len()),
            )
        })
        .collect();
    let k = rates.iter().position(|&(m, f)| m >= f).unwrap();
    let (m0, f0) = rates[k - 1];
    let (m1, f1) = rates[k];
    let t = (f0 - m0) / ((f0 - m0) - (f1 - m1));
    m0 + t * (m1 - m0)
}

pub fn check_eer(pos: &[f64], neg: &[f64]) -> Result<(), String> {
    let Eer { eer, .. } = sasv_core::metrics::eer(pos, neg).map_err(|e| e.to_string())?;
    let want = brute_eer(pos, neg);
    if (eer - want).abs() > METRIC_TOL {
        return Err(format!("EER {eer} vs brute force {want}"));
    }
    Ok(())
}

/// One random instance: min a-DCF plus the SV and SPF EERs.
pub fn check_metric_instance(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = random_class_scores(&mut rng);
    let op = AdcfOperatingPoint::default();
    check_min_adcf(&scores, &op)?;
    check_eer(&scores.target, &scores.nontarget)?;
    if !scores.spoof.is_empty() {
        check_eer(&scores.target, &scores.spoof)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Soft a-DCF against the hard one

/// Random labelled scores with every score at least `margin` away from `tau`.
pub fn scores_away_from(rng: &mut ChaCha8Rng, tau: f64, margin: f64) -> (Vec<f64>, Vec<Label>) {
    let n = rng.random_range(30..120);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while scores.len() < n {
        let s = tau + 8.0 * (rng.random::<f64>() - 0.5);
        if (s - tau).abs() < margin {
            continue;
        }
        scores.push(s);
        labels.push(Label::ALL[scores.len() % 3]);
    }
    (scores, labels)
}

/// |soft a-DCF − hard a-DCF| at steepness `alpha` for one random set.
pub fn soft_hard_gap(seed: u64, alpha: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.random::<f64>() * 2.0 - 1.0;
    let (scores, labels) = scores_away_from(&mut rng, tau, 0.02);
    let cfg = LossConfig {
        alpha,
        ..LossConfig::default()
    };
    let soft = sasv_core::objective::soft_adcf(&scores, &labels, tau, &cfg).unwrap().loss;
    let hard = brute_adcf(&ClassScores::from_labeled(&scores, &labels), tau, &cfg.operating_point);
    (soft - hard).abs()
}

// ---------------------------------------------------------------------------
// File formats

/// Id without whitespace and without a leading '#', sometimes non-ASCII.
pub fn random_trial_id(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'Z', '0', '9', '_', '-', '.', '#', 'é', 'ß', '中', '🎤', '/'];
    let len = rng.random_range(1..12);
    loop {
        let id: String = (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect();
        if !id.starts_with('#') {
            return id;
        }
    }
}

/// Any non-empty string; embedding ids may contain whitespace.
pub fn random_store_id(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', ' ', '\t', '0', 'é', '中', '🎤', '\n', '#', '"'];
    let len = rng.random_range(1..20);
    (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => -0.0,
        2 => f32::MIN_POSITIVE / 4.0,
        3 => f32::MAX,
        4 => f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff),
        _ => (rng.random::<f64>() * 20.0 - 10.0) as f32,
    }
}

pub fn random_store(rng: &mut ChaCha8Rng) -> EmbeddingStore {
    let dim = rng.random_range(1..40);
    let mut store = EmbeddingStore::new(dim).unwrap();
    for _ in 0..rng.random_range(0..15) {
        let id = random_store_id(rng);
        let v = (0..dim).map(|_| random_f32(rng)).collect();
        // Duplicate ids are refused; skip them.
        let _ = store.insert(id, v);
    }
    store
}

pub fn random_trials(rng: &mut ChaCha8Rng) -> Vec<TrialRecord> {
    (0..rng.random_range(0..30))
        .map(|_| {
            let label = Label::ALL[rng.random_range(0..3)];
            TrialRecord::new(random_trial_id(rng), random_trial_id(rng), label).unwrap()
        })
        .collect()
}

pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for k in 0..rng.random_range(0..5) {
        ckpt.metadata.insert(format!("key{k}-{}", random_store_id(rng)), random_store_id(rng));
    }
    for k in 0..rng.random_range(0..6) {
        let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| random_f32(rng)).collect();
        ckpt.add_tensor(format!("t{k}.{}", random_trial_id(rng)), Tensor::new("t", shape, data).unwrap())
            .unwrap();
    }
    ckpt
}

/// Round-trips one random store, trial list, score list and checkpoint.
pub fn check_format_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let store = random_store(&mut rng);
    let bytes = store.to_bytes();
    let back = EmbeddingStore::from_bytes(&bytes).map_err(|e| format!("SEMB: {e}"))?;
    if back != store || back.to_bytes() != bytes {
        return Err("SEMB round trip changed the store".into());
    }

    let trials = random_trials(&mut rng);
    let text = format_trials(&trials);
    let back = parse_trials(&text).map_err(|e| format!("trials: {e}"))?;
    if back != trials {
        return Err(format!("trial round trip changed {text:?}"));
    }

    let scores: Vec<f64> = trials.iter().map(|_| rng.random::<f64>() * 200.0 - 100.0).collect();
    let set = ScoreSet::from_scores(&trials, &scores).unwrap();
    let text = format_scores(&set);
    let entries = parse_scores(&text).map_err(|e| format!("scores: {e}"))?;
    let rejoined = ScoreSet::from_scores(&trials, &entries.iter().map(|e| e.score).collect::<Vec<_>>()).unwrap();
    if format_scores(&rejoined) != text {
        return Err("score text changed after reparsing".into());
    }
    for ((e, t), s) in entries.iter().zip(&trials).zip(&scores) {
        if e.enrol_id != t.enrol_id || e.test_id != t.test_id || (e.score - s).abs() > 5.0e-7 {
            return Err(format!("score entry {e:?} does not match {t:?} / {s}"));
        }
    }

    let ckpt = random_checkpoint(&mut rng);
    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| format!("SMDL: {e}"))?;
    if back.to_bytes().map_err(|e| e.to_string())? != bytes || back != ckpt {
        return Err("SMDL round trip changed the checkpoint".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Command line

pub fn sasv<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_sasv"))
        .args(args)
        .output()
        .expect("spawn sasv")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs a command and fails with its stderr if it exits non-zero.
pub fn sasv_ok<I, S>(args: I) -> Result<String, String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = sasv(args);
    if out.status.success() {
        Ok(stdout(&out))
    } else {
        Err(format!("exit {:?}: {}", out.status.code(), stderr(&out)))
    }
}

/// Value of a `key\tvalue` line printed by `sasv`.
pub fn field(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('\t').map(str::to_string))
}

pub struct Pipeline {
    pub dir: PathBuf,
    pub train_stdout: String,
    pub eval_stdout: String,
}

impl Pipeline {
    pub fn model(&self) -> PathBuf {
        self.dir.join("run").join("model.smdl")
    }
    pub fn scores(&self) -> PathBuf {
        self.dir.join("dev.scores")
    }
    pub fn min_adcf_norm(&self) -> f64 {
        field(&self.eval_stdout, "min_adcf_norm").unwrap().parse().unwrap()
    }
}

/// synth, train, score the dev trials, eval.
pub fn run_pipeline(dir: &Path, preset: &str, seed: u64, epochs: usize) -> Result<Pipeline, String> {
    let d = |name: &str| dir.join(name);
    sasv_ok([
        "synth".to_string(),
        "--preset".into(),
        preset.into(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        d("data").display().to_string(),
    ])?;
    let data = |f: &str| d("data").join(f).display().to_string();
    let train_stdout = sasv_ok([
        "train".to_string(),
        "--asv".into(),
        data("asv.semb"),
        "--cm".into(),
        data("cm.semb"),
        "--train-trials".into(),
        data("train.trl"),
        "--dev-trials".into(),
        data("dev.trl"),
        "--epochs".into(),
        epochs.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        d("run").display().to_string(),
    ])?;
    let scores = d("dev.scores").display().to_string();
    sasv_ok([
        "score".to_string(),
        "--model".into(),
        d("run").join("model.smdl").display().to_string(),
        "--asv".into(),
        data("asv.semb"),
        "--cm".into(),
        data("cm.semb"),
        "--trials".into(),
        data("dev.trl"),
        "--out".into(),
        scores.clone(),
    ])?;
    let eval_stdout = sasv_ok(["eval".to_string(), "--scores".into(), scores, "--trials".into(), data("dev.trl")])?;
    Ok(Pipeline {
        dir: dir.to_path_buf(),
        train_stdout,
        eval_stdout,
    })
}
