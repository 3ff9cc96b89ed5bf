//! Test-time adaptation: the three-term objective, the flexible cycle,
//! pseudo-label filtering and the online and delayed loops.

mod engine;
mod online;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSubset;
use crate::tensor::{argmax, ops, Var};

pub use engine::{should_continue, AdaptationRecord, Adapter, CycleState, LossValues, StepOutcome};
pub use online::{run_delayed, run_online, FixedLabels, MailboxLabels, MapperLabels, NoLabels, OracleLabels, OnlineMetrics, PseudoSource};

/// How many cycles a sample gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// Stop as soon as the continuation test fails, at most `tau` steps.
    #[default]
    Flexible,
    /// Always `tau` steps.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub tau: usize,
    /// Views per sample.
    pub m_views: usize,
    pub momentum_stats: f64,
    /// Delayed-update window; 0 adapts before predicting.
    pub s: usize,
    pub theta: f64,
    pub k: usize,
    pub use_select: bool,
    pub use_ensemble: bool,
    pub reset_per_run: bool,
    pub cycle: CycleMode,
    pub param_subset: ParamSubset,
    /// Layers whose statistics are aligned; `None` aligns every layer.
    pub align_layers: Option<Vec<usize>>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            lr: 1e-3,
            tau: 8,
            m_views: 2,
            momentum_stats: 0.1,
            s: 0,
            theta: 0.3,
            k: 10,
            use_select: false,
            use_ensemble: false,
            reset_per_run: true,
            cycle: CycleMode::Flexible,
            param_subset: ParamSubset::All,
            align_layers: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be finite and non-negative, got {v}")))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("beta", self.beta)?;
        nonneg("lr", self.lr)?;
        if self.tau < 1 {
            return Err(Error::config("tau", "must be at least 1"));
        }
        if self.m_views < 2 {
            return Err(Error::config("m_views", "must be at least 2"));
        }
        if !(self.momentum_stats > 0.0 && self.momentum_stats <= 1.0) {
            return Err(Error::config("momentum_stats", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", "must lie in [0, 1]"));
        }
        if self.k < 1 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if let Some(l) = &self.align_layers {
            if l.is_empty() {
                return Err(Error::config("align_layers", "must not be empty"));
            }
        }
        Ok(())
    }

    /// `k` capped at the number of classes.
    pub fn effective_k(&self, num_classes: usize) -> usize {
        self.k.min(num_classes)
    }
}

/// `-sum_m ln p_m[pseudo]` over the views.
pub fn cls_loss<'t>(predictions: &[Var<'t>], pseudo: usize) -> Result<Var<'t>> {
    let mut terms = predictions.iter().map(|&p| ops::cross_entropy(p, pseudo));
    let first = terms.next().ok_or_else(|| Error::Contract("no view predictions".into()))??;
    terms.try_fold(first, |acc, t| ops::add(acc, t?))
}

/// `sum_m |p_m - mean_j p_j|_1` over the views.
pub fn cons_loss<'t>(predictions: &[Var<'t>]) -> Result<Var<'t>> {
    let (&first, rest) = predictions.split_first().ok_or_else(|| Error::Contract("no view predictions".into()))?;
    let total = rest.iter().try_fold(first, |acc, &p| ops::add(acc, p))?;
    let mean = ops::scale(total, 1.0 / predictions.len() as f64);
    let mut terms = predictions.iter().map(|&p| ops::l1_distance(p, mean));
    let first = terms.next().unwrap()?;
    terms.try_fold(first, |acc, t| ops::add(acc, t?))
}

/// `alpha * cls + beta * cons + align`; a missing `cls` contributes nothing.
pub fn total_loss<'t>(cls: Option<Var<'t>>, cons: Var<'t>, align: Var<'t>, alpha: f64, beta: f64) -> Result<Var<'t>> {
    let mut total = ops::add(ops::scale(cons, beta), align)?;
    if let Some(c) = cls {
        total = ops::add(ops::scale(c, alpha), total)?;
    }
    Ok(total)
}

/// Class indices ordered by probability; ties rank the lower index first.
fn ranking(prediction: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..prediction.len()).collect();
    idx.sort_by(|&a, &b| prediction[b].total_cmp(&prediction[a]).then(a.cmp(&b)));
    idx
}

/// Whether `pseudo` is among the `k` most probable classes.
pub fn select_filter(pseudo: usize, prediction: &[f64], k: usize) -> bool {
    ranking(prediction).iter().take(k).any(|&c| c == pseudo)
}

/// Falls back to the pseudo label when the video model is unsure but still
/// ranks it within the top `k`.
pub fn ensemble_predict(prediction: &[f64], pseudo: Option<usize>, theta: f64, k: usize) -> usize {
    let top = argmax(prediction);
    match pseudo {
        Some(p) if p < prediction.len() && prediction[top] < theta && select_filter(p, prediction, k) => p,
        _ => top,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn cls_examples() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let v = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!((cls_loss(&[u, v], 1).unwrap().item() - 2.0 * 2f64.ln()).abs() < 1e-9);
        let one = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(cls_loss(&[one, one], 1).unwrap().item().abs() < 1e-9);
        assert_eq!(cls_loss(&[u], 0).unwrap().item(), ops::cross_entropy(u, 0).unwrap().item());
        assert!(matches!(cls_loss(&[u], 2), Err(Error::Index(_))));
    }

    #[test]
    fn cons_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(cons_loss(&[a, b]).unwrap().item(), 2.0);
        assert_eq!(cons_loss(&[a, a]).unwrap().item(), 0.0);
        let c = tape.constant(Tensor::vector(vec![0.2, 0.8]));
        let x = cons_loss(&[a, b, c]).unwrap().item();
        let y = cons_loss(&[c, a, b]).unwrap().item();
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let t = total_loss(Some(s(1.0)), s(2.0), s(3.0), 0.1, 0.1).unwrap().item();
        assert!((t - 3.3).abs() < 1e-12);
        assert_eq!(total_loss(None, s(0.0), s(0.0), 0.1, 0.1).unwrap().item(), 0.0);
        assert_eq!(total_loss(Some(s(5.0)), s(2.0), s(3.0), 0.0, 0.0).unwrap().item(), 3.0);
    }

    #[test]
    fn select_examples() {
        let p = [0.1, 0.5, 0.2, 0.2];
        assert!(select_filter(1, &p, 1));
        assert!(select_filter(2, &p, 2));
        assert!(!select_filter(3, &p, 2));
        let mut twelve: Vec<f64> = (0..12).map(|i| (12 - i) as f64).collect();
        let s: f64 = twelve.iter().sum();
        twelve.iter_mut().for_each(|x| *x /= s);
        assert!(!select_filter(10, &twelve, 10));
        assert!(select_filter(9, &twelve, 10));
        assert!((0..12).all(|c| select_filter(c, &twelve, 12)));
    }

    #[test]
    fn ensemble_examples() {
        let mut low = vec![0.25, 0.2, 0.2, 0.2, 0.15];
        assert_eq!(ensemble_predict(&low, Some(3), 0.3, 10), 3);
        assert_eq!(ensemble_predict(&low, None, 0.3, 10), 0);
        assert_eq!(ensemble_predict(&low, Some(4), 0.3, 2), 0);
        low[0] = 0.9;
        assert_eq!(ensemble_predict(&low, Some(3), 0.3, 10), 0);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for bad in [
            AdaptConfig { tau: 0, ..Default::default() },
            AdaptConfig { m_views: 1, ..Default::default() },
            AdaptConfig { theta: 1.5, ..Default::default() },
            AdaptConfig { k: 0, ..Default::default() },
            AdaptConfig { lr: f64::NAN, ..Default::default() },
            AdaptConfig { momentum_stats: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
        assert_eq!(AdaptConfig::default().effective_k(8), 8);
        let c: AdaptConfig = serde_json::from_str("{\"tau\": 4}").unwrap();
        assert_eq!((c.tau, c.alpha), (4, 0.1));
        assert!(serde_json::from_str::<AdaptConfig>("{\"tua\": 4}").is_err());
    }
}
