//! Temperature calibration of each modality and the sample-wise fusion of
//! the visual and text heads.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::{argmax, softmax};

/// A classifier that exposes pre-softmax logits.
pub trait LogitModel: Send + Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, z: &[f64]) -> Result<Vec<f64>>;
}

impl<M: LogitModel + ?Sized> LogitModel for Arc<M> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        (**self).logits(z)
    }
}

impl<M: LogitModel + ?Sized> LogitModel for &M {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        (**self).logits(z)
    }
}

fn scaled_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    softmax(&scaled)
}

fn max_prob(p: &[f64]) -> f64 {
    p.iter().cloned().fold(0.0, f64::max)
}

/// Mean over samples of the largest softmax probability at temperature `tau`.
pub fn confidence(logits: &[Vec<f64>], tau: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Degenerate("confidence of an empty logit set".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {tau}")));
    }
    let total: f64 = logits.iter().map(|l| max_prob(&scaled_softmax(l, tau))).sum();
    Ok(total / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub tau_min: f64,
    pub tau_max: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            tau_min: 0.01,
            tau_max: 100.0,
            tol: 1e-3,
            max_iter: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clamp {
    /// Target above the confidence reachable at τ_min.
    Low,
    /// Target below the confidence reachable at τ_max.
    High,
}

/// Outcome of a temperature search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub temperature: f64,
    /// Accuracy the confidence was matched to; `None` when uncalibrated.
    pub target: Option<f64>,
    /// |conf(τ) − target| at the returned temperature.
    pub gap: f64,
    pub iterations: usize,
    pub clamped: Option<Clamp>,
    pub samples: usize,
}

impl Calibration {
    pub fn identity(samples: usize) -> Self {
        Calibration {
            temperature: 1.0,
            target: None,
            gap: 0.0,
            iterations: 0,
            clamped: None,
            samples,
        }
    }
}

/// Bisection on τ ∈ [τ_min, τ_max] for conf(τ) = `accuracy`. Confidence falls
/// as τ grows, so the bracket shrinks toward the crossing. Stops once both the
/// confidence gap and the bracket width are within `tol`.
pub fn calibrate(logits: &[Vec<f64>], accuracy: f64, settings: &CalibrationSettings) -> Result<Calibration> {
    let CalibrationSettings {
        tau_min,
        tau_max,
        tol,
        max_iter,
    } = *settings;
    if !(tau_min > 0.0 && tau_max > tau_min) {
        return Err(Error::InvalidParameter(format!(
            "temperature range [{tau_min}, {tau_max}] is invalid"
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    if !accuracy.is_finite() {
        return Err(Error::NonFinite("calibration target".into()));
    }
    let samples = logits.len();
    let done = |temperature: f64, gap: f64, iterations: usize, clamped| Calibration {
        temperature,
        target: Some(accuracy),
        gap,
        iterations,
        clamped,
        samples,
    };

    let conf_lo = confidence(logits, tau_min)?;
    if accuracy >= conf_lo {
        let gap = accuracy - conf_lo;
        let clamp = (gap > tol).then_some(Clamp::Low);
        if clamp.is_some() {
            log::warn!("calibration target {accuracy:.4} unreachable, clamping to tau_min");
        }
        return Ok(done(tau_min, gap, 0, clamp));
    }
    let conf_hi = confidence(logits, tau_max)?;
    if accuracy <= conf_hi {
        let gap = conf_hi - accuracy;
        let clamp = (gap > tol).then_some(Clamp::High);
        if clamp.is_some() {
            log::warn!("calibration target {accuracy:.4} unreachable, clamping to tau_max");
        }
        return Ok(done(tau_max, gap, 0, clamp));
    }

    let (mut lo, mut hi) = (tau_min, tau_max);
    for iter in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        let conf = confidence(logits, mid)?;
        let gap = (conf - accuracy).abs();
        // the crossing lies inside [lo, hi], so a narrow bracket also pins τ
        if gap <= tol && hi - lo <= tol {
            return Ok(done(mid, gap, iter, None));
        }
        if conf > accuracy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let gap = (confidence(logits, mid)? - accuracy).abs();
    Ok(done(mid, gap, max_iter, None))
}

/// A logit model with a fitted temperature.
#[derive(Debug, Clone)]
pub struct CalibratedClassifier<M> {
    pub model: M,
    pub calibration: Calibration,
}

impl<M: LogitModel> CalibratedClassifier<M> {
    /// τ = 1, for runs with calibration disabled.
    pub fn uncalibrated(model: M) -> Self {
        CalibratedClassifier {
            model,
            calibration: Calibration::identity(0),
        }
    }

    /// Fits τ so that the mean confidence on `data` matches the model's
    /// accuracy on the same data.
    pub fn fit(model: M, data: &EmbeddingDataset, settings: &CalibrationSettings) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Degenerate("calibration set is empty".into()));
        }
        let mut logits = Vec::with_capacity(data.len());
        let mut correct = 0usize;
        for i in 0..data.len() {
            let row: Vec<f64> = data.row(i).iter().map(|&v| v as f64).collect();
            let l = model.logits(&row)?;
            if argmax(&l) == data.label(i) {
                correct += 1;
            }
            logits.push(l);
        }
        let accuracy = correct as f64 / data.len() as f64;
        let calibration = calibrate(&logits, accuracy, settings)?;
        Ok(CalibratedClassifier { model, calibration })
    }

    pub fn temperature(&self) -> f64 {
        self.calibration.temperature
    }

    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(scaled_softmax(&self.model.logits(z)?, self.temperature()))
    }
}

/// η = sigmoid(log(max p_V / max p_T)) = max p_V / (max p_V + max p_T).
pub fn mixing_weight(p_visual: &[f64], p_text: &[f64]) -> f64 {
    let v = max_prob(p_visual);
    let t = max_prob(p_text);
    v / (v + t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub probs: Vec<f64>,
    pub eta: f64,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

/// η(z)·f_V(z) + (1 − η(z))·f_T(z) over two calibrated heads.
#[derive(Debug, Clone)]
pub struct FusionModel<V, T> {
    pub visual: CalibratedClassifier<V>,
    pub text: CalibratedClassifier<T>,
}

impl<V: LogitModel, T: LogitModel> FusionModel<V, T> {
    pub fn new(visual: CalibratedClassifier<V>, text: CalibratedClassifier<T>) -> Result<Self> {
        if visual.model.num_classes() != text.model.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "visual head has {} classes, text head {}",
                visual.model.num_classes(),
                text.model.num_classes()
            )));
        }
        Ok(FusionModel { visual, text })
    }

    pub fn fuse_predict(&self, z: &[f64]) -> Result<FusedPrediction> {
        let visual = self.visual.predict(z)?;
        let text = self.text.predict(z)?;
        Ok(fuse(visual, text))
    }
}

/// Convex combination of two probability vectors with the adaptive η.
pub fn fuse(visual: Vec<f64>, text: Vec<f64>) -> FusedPrediction {
    let eta = mixing_weight(&visual, &text);
    let probs = visual
        .iter()
        .zip(&text)
        .map(|(v, t)| eta * v + (1.0 - eta) * t)
        .collect();
    FusedPrediction {
        probs,
        eta,
        visual,
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confidence_examples() {
        let uniform = vec![vec![0.3, 0.3, 0.3]; 4];
        for tau in [0.1, 1.0, 10.0] {
            assert!((confidence(&uniform, tau).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = vec![vec![2.0, 0.0]; 3];
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((confidence(&l, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((confidence(&l, 1e9).unwrap() - 0.5).abs() < 1e-8);
        assert!(confidence(&[], 1.0).is_err());
    }

    #[test]
    fn analytic_calibration() {
        let l = vec![vec![2.0, 0.0]; 5];
        let settings = CalibrationSettings { tol: 1e-9, ..Default::default() };
        let cal = calibrate(&l, 0.75, &settings).unwrap();
        assert!((cal.temperature - 2.0 / 3f64.ln()).abs() < 1e-6);
        assert!(cal.clamped.is_none());

        let cal = calibrate(&l, 0.75, &CalibrationSettings::default()).unwrap();
        assert!(cal.gap <= 1e-3);

        let target = confidence(&l, 1.0).unwrap();
        let cal = calibrate(&l, target, &settings).unwrap();
        assert!((cal.temperature - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unattainable_targets_clamp() {
        let l = vec![vec![0.01, 0.0]; 3];
        let cal = calibrate(&l, 0.999, &CalibrationSettings::default()).unwrap();
        assert_eq!(cal.clamped, Some(Clamp::Low));
        assert_eq!(cal.temperature, 0.01);

        let l = vec![vec![500.0, 0.0]; 3];
        let cal = calibrate(&l, 0.5, &CalibrationSettings::default()).unwrap();
        assert_eq!(cal.clamped, Some(Clamp::High));
        assert_eq!(cal.temperature, 100.0);
    }

    #[test]
    fn mixing_weight_examples() {
        assert_eq!(mixing_weight(&[0.7, 0.3], &[0.3, 0.7]), 0.5);
        assert!((mixing_weight(&[0.9, 0.1], &[0.6, 0.4]) - 0.6).abs() < 1e-15);
        let eta = mixing_weight(&[0.99, 0.005, 0.005], &[0.34, 0.33, 0.33]);
        assert!((eta - 0.99 / 1.33).abs() < 1e-15);
        assert!((eta - 0.7444).abs() < 1e-4);
        // sigmoid form agrees
        let (v, t) = (0.9f64, 0.6f64);
        let sig = 1.0 / (1.0 + (-(v / t).ln()).exp());
        assert!((sig - mixing_weight(&[v, 1.0 - v], &[t, 1.0 - t])).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let f = fuse(vec![0.9, 0.1], vec![0.6, 0.4]);
        assert!((f.eta - 0.6).abs() < 1e-15);
        assert!((f.probs[0] - 0.78).abs() < 1e-15);
        assert!((f.probs[1] - 0.22).abs() < 1e-15);
        let p = vec![0.2, 0.5, 0.3];
        assert_eq!(fuse(p.clone(), p.clone()).probs, p);
    }

    /// Brute force over a 3-class grid: a one-hot text head wins the fused
    /// argmax whenever the visual head is not itself one-hot and prefers the
    /// same class.
    #[test]
    fn one_hot_text_dominates_on_grid() {
        let steps = 20;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let v = vec![i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                if max_prob(&v) >= 1.0 {
                    continue;
                }
                for hot in 0..3 {
                    let mut t = vec![0.0; 3];
                    t[hot] = 1.0;
                    let fused = fuse(v.clone(), t);
                    if argmax(&v) == hot {
                        assert_eq!(argmax(&fused.probs), hot);
                    }
                    assert!(fused.eta > 0.0 && fused.eta < 1.0);
                }
            }
        }
    }

    fn arb_probs(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn confidence_decreases_in_temperature(
            logits in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..10),
            t1 in 0.05f64..20.0, factor in 1.01f64..5.0,
        ) {
            let a = confidence(&logits, t1).unwrap();
            let b = confidence(&logits, t1 * factor).unwrap();
            prop_assert!(b <= a + 1e-15);
        }

        #[test]
        fn fused_output_on_segment((pv, pt) in (arb_probs(4), arb_probs(4))) {
            let f = fuse(pv.clone(), pt.clone());
            prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.eta > 0.0 && f.eta < 1.0);
            for ((x, v), t) in f.probs.iter().zip(&pv).zip(&pt) {
                prop_assert!((x - (f.eta * v + (1.0 - f.eta) * t)).abs() < 1e-15);
                prop_assert!(*x >= v.min(*t) - 1e-15 && *x <= v.max(*t) + 1e-15);
            }
        }

        #[test]
        fn eta_is_permutation_invariant((pv, pt) in (arb_probs(3), arb_probs(3)), rot in 0usize..3) {
            let mut rv = pv.clone();
            let mut rt = pt.clone();
            rv.rotate_left(rot);
            rt.rotate_left(rot);
            prop_assert_eq!(mixing_weight(&pv, &pt), mixing_weight(&rv, &rt));
        }
    }
}
