use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, round_to_f32};
use crate::model::{softmax_unchecked, PrototypeBank};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::concepts::ConceptSets;
use super::head::duplicate_prototype;
use super::loss::{logit_gradient, ChannelPair, Membership};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Minibatch drawn uniformly from S1 ∪ S2 ∪ S_r.
    #[default]
    Uniform,
    /// Minibatch cycles S1, S2, S_r in turn.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitHyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Std-dev of the Gaussian noise added to features each step.
    pub noise_sigma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub accuracy_target: f64,
    pub loss_target: f64,
    /// Consecutive evaluations meeting a stopping rule needed to stop.
    pub patience: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    pub sampling: Sampling,
    /// Uniform jitter added to the duplicated kernel before training.
    pub jitter: f64,
}

impl Default for SplitHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 10,
            noise_sigma: 0.05,
            epsilon: 1e-8,
            alpha: 2.0,
            kappa: 0.1,
            accuracy_target: 0.999,
            loss_target: 0.02,
            patience: 10,
            eval_every: 10,
            max_steps: 5000,
            sampling: Sampling::Uniform,
            jitter: 0.0,
        }
    }
}

impl SplitHyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("noise_sigma", self.noise_sigma),
            ("epsilon", self.epsilon),
            ("alpha", self.alpha),
            ("kappa", self.kappa),
            ("accuracy_target", self.accuracy_target),
            ("loss_target", self.loss_target),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 || self.max_steps == 0
        {
            return Err(Error::InvalidConfig(
                "batch_size, patience, eval_every and max_steps must be >= 1".into(),
            ));
        }
        if self.kappa >= std::f64::consts::LN_2 {
            return Err(Error::InvalidConfig(format!(
                "kappa {} must be below ln 2",
                self.kappa
            )));
        }
        if self.jitter < 0.0 {
            return Err(Error::InvalidConfig("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest activation the deactivation hinge leaves untouched.
    pub fn deactivation_bound(&self) -> f64 {
        1.0 - (-self.kappa).exp()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Pending,
    Running,
    Converged,
    BudgetExhausted,
    Failed,
}

impl SessionStatus {
    fn rank(self) -> u8 {
        match self {
            SessionStatus::Pending => 0,
            SessionStatus::Running => 1,
            _ => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

/// Accuracy of the current kernels on each labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptAccuracy {
    pub s1: f64,
    pub s2: f64,
    pub sr: f64,
    /// Which of (S1, S2, S_r) were empty and scored 1.0 by convention.
    pub vacuous: [bool; 3],
}

impl ConceptAccuracy {
    pub fn all_at_least(&self, target: f64) -> bool {
        self.s1 >= target && self.s2 >= target && self.sr >= target
    }

    pub fn as_triple(&self) -> (f64, f64, f64) {
        (self.s1, self.s2, self.sr)
    }
}

/// S1/S2: fraction whose top channel (over every channel) is the original /
/// the duplicate. S_r: fraction with both channels at or below the
/// deactivation bound `1 - exp(-kappa)`.
pub fn per_concept_accuracy(
    sets: &ConceptSets,
    bank: &PrototypeBank,
    pair: ChannelPair,
    kappa: f64,
) -> ConceptAccuracy {
    let bound = 1.0 - (-kappa).exp();
    let activations = |p: &crate::model::PatchRecord| {
        let logits: Vec<f64> = bank.kernels().iter_rows().map(|k| dot(&p.feature, k)).collect();
        softmax_unchecked(&logits)
    };
    let frac = |set: &[crate::model::PatchRecord], ok: &dyn Fn(&[f64]) -> bool| {
        if set.is_empty() {
            return (1.0, true);
        }
        let hits = set.iter().filter(|p| ok(&activations(p))).count();
        (hits as f64 / set.len() as f64, false)
    };
    let (s1, v1) = frac(&sets.s1, &|p| argmax(p) == Some(pair.original));
    let (s2, v2) = frac(&sets.s2, &|p| argmax(p) == Some(pair.duplicate));
    let (sr, vr) = frac(&sets.sr, &|p| {
        p[pair.original] <= bound && p[pair.duplicate] <= bound
    });
    ConceptAccuracy {
        s1,
        s2,
        sr,
        vacuous: [v1, v2, vr],
    }
}

/// Mean clean (noise-free) loss over every labeled patch.
pub fn full_set_loss(
    sets: &ConceptSets,
    bank: &PrototypeBank,
    pair: ChannelPair,
    hyper: &SplitHyperparams,
) -> f64 {
    let n = sets.len();
    if n == 0 {
        return 0.0;
    }
    sets.labeled()
        .map(|(m, p)| {
            let logits: Vec<f64> = bank.kernels().iter_rows().map(|k| dot(&p.feature, k)).collect();
            super::split_loss(m, &softmax_unchecked(&logits), pair, hyper)
        })
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: usize,
    pub smoothed_loss: f64,
    pub full_loss: f64,
    pub accuracy: ConceptAccuracy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Minibatch loss of every step.
    pub losses: Vec<f64>,
    pub evaluations: Vec<Evaluation>,
}

/// Progress notification emitted after every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub loss: f64,
    pub accuracy: (f64, f64, f64),
}

/// One split in flight. The working bank already holds the duplicated
/// channel; only the two rows of `pair` ever change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSession {
    pub pair: ChannelPair,
    pub sets: ConceptSets,
    pub hyper: SplitHyperparams,
    bank: PrototypeBank,
    optimizer: AdamState,
    status: SessionStatus,
    pub history: History,
}

impl SplitSession {
    /// Validates the concept sets and duplicates prototype `e` of `base`.
    pub fn new(
        base: &PrototypeBank,
        e: usize,
        sets: ConceptSets,
        hyper: SplitHyperparams,
        min_concept: usize,
    ) -> Result<Self> {
        hyper.validate()?;
        sets.validate(min_concept)?;
        base.check_prototype(e)?;
        for p in sets.labeled().map(|(_, p)| p) {
            if p.feature.len() != base.feature_width() {
                return Err(Error::ShapeMismatch {
                    context: "concept patch feature width",
                    expected: base.feature_width(),
                    found: p.feature.len(),
                });
            }
        }
        let bank = duplicate_prototype(base, e)?;
        let c = bank.feature_width();
        Ok(Self {
            pair: ChannelPair {
                original: e,
                duplicate: base.num_prototypes(),
            },
            sets,
            hyper,
            bank,
            optimizer: AdamState::new(2 * c),
            status: SessionStatus::Pending,
            history: History::default(),
        })
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn kernel_original(&self) -> &[f64] {
        self.bank.kernel(self.pair.original)
    }

    pub fn kernel_duplicate(&self) -> &[f64] {
        self.bank.kernel(self.pair.duplicate)
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    fn advance(&mut self, next: SessionStatus) {
        assert!(
            next.rank() > self.status.rank(),
            "session status cannot go from {:?} to {:?}",
            self.status,
            next
        );
        self.status = next;
    }

    pub fn accuracy(&self) -> ConceptAccuracy {
        per_concept_accuracy(&self.sets, &self.bank, self.pair, self.hyper.kappa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub pair: ChannelPair,
    pub kernel_original: Vec<f64>,
    pub kernel_duplicate: Vec<f64>,
    /// Bank with the trained kernels and the copied (not yet re-initialized)
    /// head row.
    pub bank: PrototypeBank,
    pub accuracy: ConceptAccuracy,
    pub steps: usize,
    pub converged: bool,
}

/// Optimizes the two kernels of `session` until convergence or budget
/// exhaustion. Deterministic for a given `seed`.
pub fn run_split(session: &mut SplitSession, seed: u64) -> Result<SplitResult> {
    run_split_with_progress(session, seed, |_| {})
}

pub fn run_split_with_progress(
    session: &mut SplitSession,
    seed: u64,
    mut on_progress: impl FnMut(Progress),
) -> Result<SplitResult> {
    if session.status != SessionStatus::Pending {
        return Err(Error::SessionState(session.pair.original));
    }
    session.advance(SessionStatus::Running);
    match train(session, seed, &mut on_progress) {
        Ok(converged) => {
            session.advance(if converged {
                SessionStatus::Converged
            } else {
                SessionStatus::BudgetExhausted
            });
            let pair = session.pair;
            // kernels leave the session at storage precision
            let mut bank = session.bank.clone();
            round_to_f32(bank.kernel_mut(pair.original));
            round_to_f32(bank.kernel_mut(pair.duplicate));
            Ok(SplitResult {
                pair,
                kernel_original: bank.kernel(pair.original).to_vec(),
                kernel_duplicate: bank.kernel(pair.duplicate).to_vec(),
                accuracy: per_concept_accuracy(&session.sets, &bank, pair, session.hyper.kappa),
                bank,
                steps: session.history.losses.len(),
                converged,
            })
        }
        Err(e) => {
            session.advance(SessionStatus::Failed);
            Err(e)
        }
    }
}

fn train(
    session: &mut SplitSession,
    seed: u64,
    on_progress: &mut impl FnMut(Progress),
) -> Result<bool> {
    let hyper = session.hyper.clone();
    let pair = session.pair;
    let c = session.bank.feature_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, hyper.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;

    if hyper.jitter > 0.0 {
        for w in session.bank.kernel_mut(pair.duplicate) {
            *w += rng.random_range(-hyper.jitter..=hyper.jitter);
        }
    }

    let labeled: Vec<(Membership, Vec<f64>)> = session
        .sets
        .labeled()
        .map(|(m, p)| (m, p.feature.clone()))
        .collect();
    let strata: [Vec<usize>; 3] = [Membership::S1, Membership::S2, Membership::Reference]
        .map(|m| (0..labeled.len()).filter(|&i| labeled[i].0 == m).collect());

    let mut params = vec![0.0; 2 * c];
    let mut grads = vec![0.0; 2 * c];
    let mut noisy = vec![0.0; c];
    let mut logits = vec![0.0; session.bank.num_prototypes()];
    let mut below_target = 0usize;
    let mut accurate_run = 0usize;
    let window = 10usize;

    for step in 1..=hyper.max_steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for b in 0..hyper.batch_size {
            let idx = match hyper.sampling {
                Sampling::Uniform => rng.random_range(0..labeled.len()),
                Sampling::Stratified => {
                    let non_empty: Vec<&Vec<usize>> =
                        strata.iter().filter(|s| !s.is_empty()).collect();
                    let stratum = non_empty[b % non_empty.len()];
                    stratum[rng.random_range(0..stratum.len())]
                }
            };
            let (membership, feature) = &labeled[idx];
            for (n, &f) in noisy.iter_mut().zip(feature) {
                *n = f + noise.sample(&mut rng);
            }
            for (z, k) in logits.iter_mut().zip(session.bank.kernels().iter_rows()) {
                *z = dot(&noisy, k);
            }
            let p = softmax_unchecked(&logits);
            let (dz_e, dz_n, l) = logit_gradient(&p, pair, *membership, &hyper);
            loss += l;
            for (i, &f) in noisy.iter().enumerate() {
                grads[i] += dz_e * f;
                grads[c + i] += dz_n * f;
            }
        }
        let scale = 1.0 / hyper.batch_size as f64;
        loss *= scale;
        grads.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                prototype: pair.original,
            });
        }
        session.history.losses.push(loss);

        params[..c].copy_from_slice(session.bank.kernel(pair.original));
        params[c..].copy_from_slice(session.bank.kernel(pair.duplicate));
        adam_step(&mut params, &grads, &mut session.optimizer, &hyper.adam());
        session.bank.kernel_mut(pair.original).copy_from_slice(&params[..c]);
        session.bank.kernel_mut(pair.duplicate).copy_from_slice(&params[c..]);

        if step % hyper.eval_every == 0 {
            let losses = &session.history.losses;
            let recent = &losses[losses.len().saturating_sub(window)..];
            let smoothed_loss = recent.iter().sum::<f64>() / recent.len() as f64;
            let accuracy = session.accuracy();
            let full_loss = full_set_loss(&session.sets, &session.bank, pair, &hyper);
            session.history.evaluations.push(Evaluation {
                step,
                smoothed_loss,
                full_loss,
                accuracy,
            });
            on_progress(Progress {
                step,
                loss: smoothed_loss,
                accuracy: accuracy.as_triple(),
            });
            // both stopping rules must hold for `patience` evaluations in a row
            accurate_run = if accuracy.all_at_least(hyper.accuracy_target) { accurate_run + 1 } else { 0 };
            below_target = if smoothed_loss < hyper.loss_target { below_target + 1 } else { 0 };
            if accurate_run >= hyper.patience || below_target >= hyper.patience {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{Location, PatchRecord};

    fn patch(id: &str, feature: Vec<f64>) -> PatchRecord {
        PatchRecord::new(feature, id, Location { h: 0, w: 0 })
    }

    /// Prototype 0 covers two orthogonal concepts; prototype 1 is unrelated.
    fn toy() -> (PrototypeBank, ConceptSets) {
        let bank = PrototypeBank::new(
            Matrix::from_rows(&[vec![2.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            vec!["c".into()],
        )
        .unwrap();
        let sets = ConceptSets {
            s1: (0..4).map(|i| patch(&format!("a{i}"), vec![2.0, 0.1 * i as f64, 0.0])).collect(),
            s2: (0..4).map(|i| patch(&format!("b{i}"), vec![0.1 * i as f64, 2.0, 0.0])).collect(),
            sr: (0..4).map(|i| patch(&format!("r{i}"), vec![0.0, 0.1 * i as f64, 2.0])).collect(),
        };
        (bank, sets)
    }

    fn fast() -> SplitHyperparams {
        SplitHyperparams {
            learning_rate: 1e-2,
            ..SplitHyperparams::default()
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(SplitHyperparams::default().validate().is_ok());
        let bad = SplitHyperparams { kappa: 0.7, ..SplitHyperparams::default() };
        assert!(bad.validate().is_err());
        let bad = SplitHyperparams { batch_size: 0, ..SplitHyperparams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_sets_rejected() {
        let (bank, _) = toy();
        let p = patch("x", vec![1.0, 0.0, 0.0]);
        let sets = ConceptSets { s1: vec![p.clone()], s2: vec![p], sr: vec![] };
        assert!(SplitSession::new(&bank, 0, sets, fast(), 1).is_err());
    }

    #[test]
    fn toy_split_converges() {
        let (bank, sets) = toy();
        let mut session = SplitSession::new(&bank, 0, sets, fast(), 2).unwrap();
        let result = run_split(&mut session, 3).unwrap();
        assert!(result.converged);
        assert_eq!(session.status(), SessionStatus::Converged);
        assert!(result.accuracy.all_at_least(0.999));
        assert_eq!(result.pair.duplicate, 2);
        assert_eq!(result.bank.kernel(1), bank.kernel(1));
    }

    #[test]
    fn rerun_is_bit_identical() {
        let (bank, sets) = toy();
        let run = || {
            let mut s = SplitSession::new(&bank, 0, sets.clone(), fast(), 2).unwrap();
            run_split(&mut s, 11).unwrap();
            s.history.losses
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn second_run_rejected() {
        let (bank, sets) = toy();
        let mut s = SplitSession::new(&bank, 0, sets, fast(), 2).unwrap();
        run_split(&mut s, 1).unwrap();
        assert!(matches!(run_split(&mut s, 1), Err(Error::SessionState(0))));
    }

    #[test]
    fn budget_exhaustion_reported() {
        let (bank, sets) = toy();
        let hyper = SplitHyperparams { max_steps: 5, ..SplitHyperparams::default() };
        let mut s = SplitSession::new(&bank, 0, sets, hyper, 2).unwrap();
        let r = run_split(&mut s, 1).unwrap();
        assert!(!r.converged);
        assert_eq!(r.steps, 5);
        assert_eq!(s.status(), SessionStatus::BudgetExhausted);
    }

    #[test]
    fn reference_patch_at_half_counts_incorrect() {
        // p_e = 0.5 on the S_r patch exceeds 1 - e^{-0.1}
        let bank = PrototypeBank::new(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            vec!["c".into()],
        )
        .unwrap();
        let sets = ConceptSets { s1: vec![], s2: vec![], sr: vec![patch("r", vec![0.0])] };
        let pair = ChannelPair { original: 0, duplicate: 1 };
        let acc = per_concept_accuracy(&sets, &bank, pair, 0.1);
        assert_eq!(acc.sr, 0.0);
        assert_eq!(acc.vacuous, [true, true, false]);
        assert_eq!((acc.s1, acc.s2), (1.0, 1.0));
    }
}
