//! Alternating training loop: a gradient step on the encoders with the
//! priorities held fixed, then a priority step with the encoders held fixed.
//!
//! The batch for iteration `t + 1` is drawn at the end of iteration `t`, right
//! after the parameter step, so its priorities are computed with the freshly
//! updated encoders and consumed unchanged by the next parameter step.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BatchConfig, GroupCatalog, IouFilter, Modality, NegativeSource, TripletBatch};
use crate::encoders::{EncoderDims, EncoderParams, ExpressionDropout, InitMode, LinearContext};
use crate::error::{MsrlError, Result};
use crate::metrics::{group_accuracy, EvalSet, MetricsSnapshot};
use crate::objective::{msrl_objective_with, DropoutPlan, Variant};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::relevance::{relevance_matrices, AlphaPolicy, BatchFeatures, RelevanceConfig, RelevanceMatrixSet, RelevanceMode};
use crate::rng::{stream_rng, Stream};
use crate::scheduler::{select_below, update_gamma, update_lambda, update_priorities, PrioritySet, ScheduleConstants, ScheduleState};

/// Objective values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// `M`.
    pub anchors: usize,
    /// `M'`.
    pub negatives: usize,
    pub split_ratio: f64,
    pub schedule: ScheduleConstants,
    pub relevance_mode: RelevanceMode,
    pub alpha: AlphaPolicy,
    pub iou_filter: IouFilter,
    pub init: InitMode,
    /// Expression dropout ratio; 0 disables it.
    pub dropout: f64,
    pub snapshot_period: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            variant: Variant::Msrl,
            iterations: 3000,
            lr: LrSchedule { initial: 4e-3, warmup: 1500, halving_period: 750 },
            seed: 1,
            anchors: 10,
            negatives: 60,
            split_ratio: 0.5,
            schedule: ScheduleConstants { update_period: 20, ..ScheduleConstants::default() },
            relevance_mode: RelevanceMode::Cosine01,
            alpha: AlphaPolicy::PerPair,
            iou_filter: IouFilter::Overlap,
            init: InitMode::ScaledUniform,
            dropout: 0.0,
            snapshot_period: 100,
        }
    }
}

impl TrainerConfig {
    /// Constants of the original large-scale setup.
    pub fn full_scale() -> Self {
        TrainerConfig {
            iterations: 30_000,
            lr: LrSchedule::default(),
            schedule: ScheduleConstants::default(),
            init: InitMode::PaperLiteral,
            dropout: 0.5,
            ..TrainerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch_config().validate()?;
        self.schedule.validate()?;
        self.lr.validate()?;
        if self.snapshot_period == 0 {
            return Err(MsrlError::validation("snapshot_period must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MsrlError::validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            anchors: self.anchors,
            negatives: self.negatives,
            split_ratio: self.split_ratio,
            iou_filter: self.iou_filter,
            source: match self.variant {
                Variant::PerImageBaseline => NegativeSource::SameImage,
                _ => NegativeSource::Group,
            },
        }
    }

    pub fn relevance_config(&self) -> RelevanceConfig {
        RelevanceConfig { mode: self.relevance_mode, alpha: self.alpha, iou_filter: self.iou_filter }
    }
}

/// The random streams consumed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRngs {
    pub batch: ChaCha8Rng,
    pub selection: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            batch: stream_rng(seed, Stream::Batch),
            selection: stream_rng(seed, Stream::Selection),
            dropout: stream_rng(seed, Stream::Dropout),
        }
    }
}

/// A batch with the priorities its parameter step will use.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingBatch {
    pub batch: TripletBatch,
    pub priorities: PrioritySet,
    /// Iteration counter value when the priorities were computed.
    pub computed_at: usize,
}

/// Running sums between two snapshots.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowStats {
    pub batches: u64,
    pub sum_r_all: f64,
    pub n_r_all: u64,
    pub sum_r_selected: f64,
    pub n_r_selected: u64,
    pub selected_per_group: Vec<u64>,
    pub loss_sum: f64,
    pub loss_steps: u64,
}

impl WindowStats {
    pub fn new(n_groups: usize) -> Self {
        WindowStats { selected_per_group: vec![0; n_groups], ..Default::default() }
    }

    pub fn add_batch(&mut self, relevance: &RelevanceMatrixSet, priorities: &PrioritySet) {
        self.batches += 1;
        for g in 0..relevance.n_groups() {
            for (i, j, r) in relevance.unmasked(g) {
                self.sum_r_all += r;
                self.n_r_all += 1;
                if priorities.get(g, i, j) {
                    self.sum_r_selected += r;
                    self.n_r_selected += 1;
                    self.selected_per_group[g] += 1;
                }
            }
        }
    }

    pub fn add_loss(&mut self, energy: f64) {
        self.loss_sum += energy;
        self.loss_steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed parameter steps.
    pub iteration: usize,
    pub params: EncoderParams,
    pub adam: Adam,
    pub schedule: ScheduleState,
    pub pending: PendingBatch,
    pub rngs: TrainRngs,
    pub window: WindowStats,
    pub metrics: Vec<MetricsSnapshot>,
}

/// What one iteration did, for instrumentation.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub iteration: usize,
    pub batch: &'a TripletBatch,
    pub priorities_used: &'a PrioritySet,
    pub priorities_computed_at: usize,
    pub energy: f64,
    pub next_batch: &'a TripletBatch,
    pub next_relevance: &'a RelevanceMatrixSet,
    pub next_priorities: &'a PrioritySet,
    /// Schedule the next priorities were computed with.
    pub selection_schedule: ScheduleState,
    pub params: &'a EncoderParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub metrics: Vec<MetricsSnapshot>,
    pub schedule: ScheduleState,
}

/// Binary priorities of one batch under the given method.
pub fn select_priorities<R: Rng + ?Sized>(
    variant: Variant,
    relevance: &RelevanceMatrixSet,
    state: &ScheduleState,
    rng: &mut R,
) -> PrioritySet {
    let tau_gamma = state.constants().tau * state.gamma();
    match variant {
        Variant::Msrl => update_priorities(relevance, state),
        Variant::MsrlWg => select_below(relevance, |m| state.lambda(m)),
        Variant::MsrlAg => select_below(relevance, |_| tau_gamma),
        Variant::PerImageBaseline | Variant::GroupRandom => PrioritySet::all_unmasked(relevance),
        Variant::RandselWg => {
            let counts = update_priorities(relevance, state).counts();
            let selected = (0..relevance.n_groups())
                .map(|g| {
                    let entries: Vec<(usize, usize)> = relevance.unmasked(g).map(|(i, j, _)| (i, j)).collect();
                    let mut u = Array2::from_elem(relevance.shape(), false);
                    for k in index::sample(rng, entries.len(), counts[g]) {
                        u[entries[k]] = true;
                    }
                    u
                })
                .collect();
            PrioritySet::new(selected, relevance).expect("random subset of unmasked entries")
        }
        Variant::RandselAg => {
            let total: usize = update_priorities(relevance, state).counts().iter().sum();
            let mut room: Vec<usize> = (0..relevance.n_groups()).map(|g| relevance.unmasked(g).count()).collect();
            let mut quota = vec![0usize; room.len()];
            for _ in 0..total {
                let open: Vec<usize> = (0..room.len()).filter(|&g| room[g] > 0).collect();
                let g = open[rng.random_range(0..open.len())];
                room[g] -= 1;
                quota[g] += 1;
            }
            let selected = (0..relevance.n_groups())
                .map(|g| {
                    let mut entries: Vec<(usize, usize, f64)> = relevance.unmasked(g).collect();
                    entries.sort_by(|a, b| a.2.total_cmp(&b.2));
                    let mut u = Array2::from_elem(relevance.shape(), false);
                    for &(i, j, _) in entries.iter().take(quota[g]) {
                        u[[i, j]] = true;
                    }
                    u
                })
                .collect();
            PrioritySet::new(selected, relevance).expect("ranked subset of unmasked entries")
        }
    }
}

fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

pub struct Trainer<'a> {
    catalog: &'a GroupCatalog,
    eval: &'a EvalSet,
    config: TrainerConfig,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Initializes parameters, the first batch and its priorities, and
    /// records the iteration-0 snapshot.
    pub fn new(catalog: &'a GroupCatalog, eval: &'a EvalSet, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let dims = catalog.dims();
        let enc_dims = EncoderDims { embed: dims.embed, channels: dims.channels };
        let params = EncoderParams::init(enc_dims, config.init, &mut stream_rng(config.seed, Stream::Init));
        let schedule = ScheduleState::new(config.schedule)?;
        let mut rngs = TrainRngs::new(config.seed);
        let mut window = WindowStats::new(catalog.n_groups());
        let (batch, relevance, priorities) = prepare(catalog, &config, &params, &schedule, &mut rngs)?;
        window.add_batch(&relevance, &priorities);
        let pending = PendingBatch { batch, priorities, computed_at: 0 };
        let state = TrainState { iteration: 0, adam: Adam::new(&params, AdamConfig::default()), params, schedule, pending, rngs, window, metrics: Vec::new() };
        let mut trainer = Trainer { catalog, eval, config, state };
        let initial = trainer.evaluate_pending(false)?;
        trainer.state.window.add_loss(initial);
        trainer.emit_snapshot()?;
        Ok(trainer)
    }

    pub fn resume(catalog: &'a GroupCatalog, eval: &'a EvalSet, config: TrainerConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let dims = catalog.dims();
        if state.params.dims() != (EncoderDims { embed: dims.embed, channels: dims.channels }) {
            return Err(MsrlError::validation("checkpoint parameters do not match the dataset dimensions"));
        }
        if state.pending.priorities.n_groups() != catalog.n_groups() {
            return Err(MsrlError::validation("checkpoint group count does not match the dataset"));
        }
        Ok(Trainer { catalog, eval, config, state })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn dropout_plan(&mut self) -> Option<DropoutPlan> {
        let p = self.config.dropout;
        if p == 0.0 {
            return None;
        }
        let rng = &mut self.state.rngs.dropout;
        let batch = &self.state.pending.batch;
        let mut masks = |r: crate::domain::PairRef| {
            let shape = self.catalog.pair(r).expression.word_embeddings.dim();
            ExpressionDropout { embeddings: dropout_mask(shape, p, rng), hidden: dropout_mask(shape, p, rng) }
        };
        let anchors = batch.anchors.iter().map(|&a| masks(a)).collect();
        let columns = (0..batch.n_negatives())
            .map(|j| match batch.column(j) {
                (neg, Modality::Textual) => Some(masks(neg.pair)),
                _ => None,
            })
            .collect();
        Some(DropoutPlan { anchors, columns })
    }

    /// Objective of the pending batch; with `step`, also applies the update.
    fn evaluate_pending(&mut self, step: bool) -> Result<f64> {
        let plan = if step { self.dropout_plan() } else { None };
        let s = &mut self.state;
        let value = msrl_objective_with(
            &LinearContext,
            self.catalog,
            &s.pending.batch,
            &s.params,
            &s.pending.priorities,
            &s.schedule,
            self.config.variant,
            plan.as_ref(),
        )?;
        if !value.energy.is_finite() || value.energy > DIVERGENCE_LIMIT {
            return Err(MsrlError::Diverged { iteration: s.iteration, loss: value.energy });
        }
        if step {
            s.adam.step(&mut s.params, &value.grads, self.config.lr.rate(s.iteration))?;
        }
        Ok(value.energy)
    }

    /// One full iteration.
    pub fn step(&mut self, observer: &mut dyn FnMut(&StepRecord<'_>)) -> Result<()> {
        let energy = self.evaluate_pending(true)?;
        self.state.window.add_loss(energy);
        let t = self.state.iteration;
        let selection_schedule = self.state.schedule;
        let (batch, relevance, priorities) =
            prepare(self.catalog, &self.config, &self.state.params, &selection_schedule, &mut self.state.rngs)?;
        self.state.window.add_batch(&relevance, &priorities);
        if selection_schedule.is_update_step(t + 1) {
            let lambda = update_lambda(&selection_schedule, &relevance, self.config.anchors, self.config.negatives);
            self.state.schedule = update_gamma(&lambda);
        }
        let used = std::mem::replace(&mut self.state.pending, PendingBatch { batch, priorities, computed_at: t + 1 });
        self.state.iteration = t + 1;
        observer(&StepRecord {
            iteration: t,
            batch: &used.batch,
            priorities_used: &used.priorities,
            priorities_computed_at: used.computed_at,
            energy,
            next_batch: &self.state.pending.batch,
            next_relevance: &relevance,
            next_priorities: &self.state.pending.priorities,
            selection_schedule,
            params: &self.state.params,
        });
        if (t + 1).is_multiple_of(self.config.snapshot_period) || t + 1 == self.config.iterations {
            self.emit_snapshot()?;
        }
        Ok(())
    }

    /// Runs until `iterations` parameter steps have been taken in total.
    pub fn run_until(&mut self, iterations: usize, observer: &mut dyn FnMut(&StepRecord<'_>)) -> Result<()> {
        while self.state.iteration < iterations {
            self.step(observer)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations, &mut |_| {})
    }

    fn emit_snapshot(&mut self) -> Result<()> {
        let snap = snapshot(&self.state, self.eval)?;
        self.state.metrics.push(snap);
        self.state.window = WindowStats::new(self.catalog.n_groups());
        Ok(())
    }

    pub fn output(&self) -> TrainOutput {
        TrainOutput { params: self.state.params.clone(), metrics: self.state.metrics.clone(), schedule: self.state.schedule }
    }
}

/// Draws the next batch, scores its relevance and selects its priorities.
fn prepare(
    catalog: &GroupCatalog,
    config: &TrainerConfig,
    params: &EncoderParams,
    schedule: &ScheduleState,
    rngs: &mut TrainRngs,
) -> Result<(TripletBatch, RelevanceMatrixSet, PrioritySet)> {
    let batch = crate::domain::construct_batch(catalog, &mut rngs.batch, &config.batch_config())?;
    let features = BatchFeatures::encode(catalog, &batch, params)?;
    let relevance = relevance_matrices(catalog, &batch, &features, &config.relevance_config())?;
    let priorities = select_priorities(config.variant, &relevance, schedule, &mut rngs.selection);
    Ok((batch, relevance, priorities))
}

/// Summarizes the current window and evaluates the parameters.
pub fn snapshot(state: &TrainState, eval: &EvalSet) -> Result<MetricsSnapshot> {
    let w = &state.window;
    let batches = w.batches.max(1) as f64;
    let acc = group_accuracy(&state.params, eval)?;
    let selected_per_group: Vec<f64> = w.selected_per_group.iter().map(|&c| c as f64 / batches).collect();
    Ok(MetricsSnapshot {
        iteration: state.iteration,
        loss: if w.loss_steps > 0 { w.loss_sum / w.loss_steps as f64 } else { 0.0 },
        mean_r_all: (w.n_r_all > 0).then(|| w.sum_r_all / w.n_r_all as f64),
        mean_r_selected: (w.n_r_selected > 0).then(|| w.sum_r_selected / w.n_r_selected as f64),
        selected_total: w.selected_per_group.iter().sum::<u64>() as f64 / batches,
        lambda1: state.schedule.lambda1(),
        lambda2: state.schedule.lambda2(),
        gamma: state.schedule.gamma(),
        val_acc: acc.overall,
        selected_per_group,
        acc_per_group: acc.per_group,
    })
}

/// Trains for `config.iterations` steps.
pub fn train(catalog: &GroupCatalog, eval: &EvalSet, config: TrainerConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(catalog, eval, config)?;
    trainer.run()?;
    Ok(trainer.output())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_config_is_valid_and_round_trips() {
        let cfg = TrainerConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!((cfg.anchors, cfg.negatives), (10, 60));
        assert_eq!(cfg.schedule.update_period, 1000);
        let back: TrainerConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
