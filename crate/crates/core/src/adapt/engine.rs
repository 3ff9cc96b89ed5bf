use serde::{Deserialize, Serialize};

use super::{cls_loss, cons_loss, total_loss, AdaptConfig, CycleMode};
use crate::error::{Error, Result};
use crate::model::{Model, VideoClip, ViewSet};
use crate::stats::{align_loss, layer_id, LayerStats, TestStatsTracker, TrainStats};
use crate::tensor::{NodeId, Tape};

/// Loss values of one step, measured before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub cons: f64,
    pub align: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.cons.is_finite() && self.align.is_finite() && self.total.is_finite()
    }
}

/// What the continuation test compares against after `t` completed steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleState {
    pub t: usize,
    pub prev_cons: Option<f64>,
    pub prev_align: Option<f64>,
}

/// Continue iff `t < tau` and at least one of: consistency strictly
/// decreased, alignment strictly decreased, two views disagree.
pub fn should_continue(state: &CycleState, cur_cons: f64, cur_align: f64, view_argmaxes: &[usize], tau: usize) -> bool {
    if state.t >= tau {
        return false;
    }
    let cons_down = state.prev_cons.is_some_and(|p| cur_cons < p);
    let align_down = state.prev_align.is_some_and(|p| cur_align < p);
    // Some pair differs iff some adjacent pair differs.
    let disagree = view_argmaxes.windows(2).any(|w| w[0] != w[1]);
    cons_down || align_down || disagree
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub sample_id: String,
    pub steps_used: usize,
    pub loss_trace: Vec<LossValues>,
    pub pseudo_used: bool,
    pub pseudo_label: Option<usize>,
    pub pred_before: usize,
    pub pred_after: usize,
    /// Reported prediction; differs from `pred_after` under ensembling or
    /// delayed updates.
    pub final_prediction: usize,
    pub ground_truth: Option<usize>,
    /// A non-finite loss or gradient stopped adaptation of this sample.
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub losses: LossValues,
    /// False when the step was skipped because a value was non-finite.
    pub applied: bool,
}

struct Evaluation {
    tape: Tape,
    param_ids: Vec<NodeId>,
    total: NodeId,
    losses: LossValues,
    argmaxes: Vec<usize>,
    batch: Vec<LayerStats>,
}

/// A model under adaptation together with its statistics state.
#[derive(Debug, Clone)]
pub struct Adapter {
    model: Model,
    source: Model,
    train_stats: TrainStats,
    tracker: TestStatsTracker,
    config: AdaptConfig,
}

impl Adapter {
    /// `train_stats` must cover every aligned layer.
    pub fn new(model: Model, train_stats: &TrainStats, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.align_layers.clone().unwrap_or_else(|| (0..model.num_layers()).collect());
        let stats = layers
            .iter()
            .map(|&l| {
                train_stats
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("training statistics lack {}", layer_id(l))))
            })
            .collect::<Result<Vec<_>>>()?;
        let train_stats = TrainStats { layers: layers.clone(), stats };
        train_stats.validate_against(&model)?;
        let tracker = TestStatsTracker::new(layers, config.momentum_stats)?;
        Ok(Self { source: model.clone(), model, train_stats, tracker, config })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn tracker(&self) -> &TestStatsTracker {
        &self.tracker
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn train_stats(&self) -> &TrainStats {
        &self.train_stats
    }

    /// Restores the source weights and forgets test statistics.
    pub fn reset(&mut self) {
        self.model = self.source.clone();
        self.tracker = TestStatsTracker::new(self.tracker.layers().to_vec(), self.config.momentum_stats)
            .expect("momentum was validated");
    }

    fn evaluate(&self, views: &ViewSet, pseudo: Option<usize>) -> Result<Evaluation> {
        if views.views.is_empty() {
            return Err(Error::Contract("empty view set".into()));
        }
        let tape = Tape::new();
        let (param_ids, total, losses, argmaxes, batch) = {
            let params = self.model.bind(&tape);
            let mut preds = Vec::with_capacity(views.len());
            let mut acts = Vec::with_capacity(views.len());
            for v in &views.views {
                let f = self.model.forward_bound(&tape, &params, v)?;
                preds.push(f.prediction);
                acts.push(f.activations);
            }
            let batch_vars = self.tracker.batch_stats_on_tape(&acts)?;
            let blended = self.tracker.blend_on_tape(&tape, &batch_vars)?;
            let align = align_loss(&tape, &blended, self.tracker.layers(), &self.train_stats)?;
            let cons = cons_loss(&preds)?;
            let cls = pseudo.map(|p| cls_loss(&preds, p)).transpose()?;
            let total = total_loss(cls, cons, align, self.config.alpha, self.config.beta)?;
            let losses = LossValues {
                cls: cls.map_or(0.0, |c| c.item()),
                cons: cons.item(),
                align: align.item(),
                total: total.item(),
            };
            let argmaxes = preds.iter().map(|p| p.value().argmax()).collect();
            let batch = batch_vars
                .iter()
                .map(|(m, v)| LayerStats { mean: m.value().data().to_vec(), var: v.value().data().to_vec() })
                .collect();
            (params.ids(), total.id(), losses, argmaxes, batch)
        };
        Ok(Evaluation { tape, param_ids, total, losses, argmaxes, batch })
    }

    /// Backward pass, statistics commit and descent step. Returns false and
    /// leaves all state untouched if anything is non-finite.
    fn apply(&mut self, eval: Evaluation) -> Result<bool> {
        if !eval.losses.is_finite() {
            return Ok(false);
        }
        let grads = eval.tape.backward(eval.total)?;
        if !grads.all_finite() {
            return Ok(false);
        }
        self.tracker.commit(eval.batch)?;
        self.model.apply_gradients(&grads, &eval.param_ids, self.config.lr, self.config.param_subset);
        Ok(true)
    }

    /// One gradient step on `views`. Losses are those before the update.
    pub fn adapt_step(&mut self, views: &ViewSet, pseudo: Option<usize>) -> Result<StepOutcome> {
        let eval = self.evaluate(views, pseudo)?;
        let losses = eval.losses;
        let applied = self.apply(eval)?;
        Ok(StepOutcome { losses, applied })
    }

    /// Repeated steps on one sample's views.
    ///
    /// After `t` steps the losses of the next forward pass are compared with
    /// those of the previous step; the first step's own pre-update losses
    /// serve as the reference for `t = 1`. A forward pass whose test fails
    /// is discarded without touching the statistics.
    pub fn adapt_sample(&mut self, clip: &VideoClip, views: &ViewSet, pseudo: Option<usize>) -> Result<AdaptationRecord> {
        let pred_before = self.model.predict(clip)?;
        let tau = self.config.tau;
        let mut trace = Vec::with_capacity(tau);
        let mut aborted = false;
        let mut eval = self.evaluate(views, pseudo)?;
        loop {
            let losses = eval.losses;
            if !self.apply(eval)? {
                aborted = true;
                log::warn!("non-finite loss on sample {}; step skipped", clip.sample_id);
                break;
            }
            trace.push(losses);
            let t = trace.len();
            if t >= tau {
                break;
            }
            let next = self.evaluate(views, pseudo)?;
            let go = match self.config.cycle {
                CycleMode::Fixed => true,
                CycleMode::Flexible => {
                    let state = CycleState { t, prev_cons: Some(losses.cons), prev_align: Some(losses.align) };
                    should_continue(&state, next.losses.cons, next.losses.align, &next.argmaxes, tau)
                }
            };
            if !go {
                break;
            }
            eval = next;
        }
        let pred_after = self.model.predict(clip)?;
        Ok(AdaptationRecord {
            sample_id: clip.sample_id.clone(),
            steps_used: trace.len(),
            loss_trace: trace,
            pseudo_used: pseudo.is_some(),
            pseudo_label: pseudo,
            pred_before,
            pred_after,
            final_prediction: pred_after,
            ground_truth: clip.ground_truth,
            aborted,
        })
    }
}
