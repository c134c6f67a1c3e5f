//! Source pre-training, the adaptation loop and evaluation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::bis::{assemble_halves, group_and_sort, BinSpec, Domain};
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Result, UfalError};
use crate::layout::{plan_layout, LayoutMode};
use crate::loss::{
    assignments, build_ufm, distance_term, prediction_term, smoothed_cross_entropy, ubf, AssignmentSource,
    ClassMeans, DEFAULT_LABEL_SMOOTHING, DEFAULT_PHI,
};
use crate::model::{ModelBundle, DEFAULT_MC_PASSES, DEFAULT_MC_RATE};
use crate::numeric::{argmax, stream_rng};
use crate::pseudo_store::{PseudoLabelStore, DEFAULT_REFRESH_PERIOD, DEFAULT_RESAMPLE_PERIOD};

const STREAM_SOURCE_SHUFFLE: u64 = 10;
const STREAM_BIS: u64 = 11;
const STREAM_LAYOUT: u64 = 12;
const STREAM_MC: u64 = 13;
const STREAM_ASSIGN: u64 = 14;
const STREAM_SUBSET: u64 = 15;

/// Which parts of the adaptation objective are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    /// Distance-based alignment term of the uncertain feature loss.
    pub ufl: bool,
    /// Uncertainty-based filtering of target samples.
    pub ubf: bool,
    pub assignment: AssignmentSource,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            ufl: true,
            ubf: true,
            assignment: AssignmentSource::Resampled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_replicas: usize,
    pub n_mc: usize,
    pub mc_rate: f64,
    pub refresh_period: usize,
    pub resample_period: usize,
    pub phi: f64,
    pub bin_spec: BinSpec,
    pub learning_rate: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub source_epochs: usize,
    pub adapt_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub layout_mode: LayoutMode,
    pub components: Components,
    /// Weight of the target loss relative to the source loss.
    pub target_weight: f64,
    /// After the first full sweep, periodic refreshes recompute only this many
    /// randomly chosen target samples. `None` refreshes everything.
    pub refresh_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            n_replicas: 4,
            n_mc: DEFAULT_MC_PASSES,
            mc_rate: DEFAULT_MC_RATE,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            resample_period: DEFAULT_RESAMPLE_PERIOD,
            phi: DEFAULT_PHI,
            bin_spec: BinSpec::default(),
            learning_rate: 0.01,
            momentum: 0.95,
            source_epochs: 30,
            adapt_steps: 500,
            seed: 0,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            layout_mode: LayoutMode::Sbl,
            components: Components::default(),
            target_weight: 1.0,
            refresh_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(UfalError::InvalidArgument(msg));
        if self.n_replicas == 0 || self.batch_size == 0 || self.batch_size % (2 * self.n_replicas) != 0 {
            return fail(format!(
                "batch size {} must be a positive multiple of 2 x {} replicas",
                self.batch_size, self.n_replicas
            ));
        }
        if self.refresh_period == 0 || self.resample_period == 0 || self.n_mc == 0 {
            return fail("periods and n_mc must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mc_rate) {
            return Err(UfalError::DropoutRate(self.mc_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("momentum and label smoothing must lie in [0, 1)".into());
        }
        if !(self.learning_rate > 0.0) || !(self.target_weight >= 0.0) {
            return fail("learning rate must be positive and target weight non-negative".into());
        }
        Ok(())
    }
}

/// SGD with Nesterov momentum.
#[derive(Debug, Clone)]
pub struct NesterovSgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl NesterovSgd {
    pub fn new(momentum: f64, n_params: usize) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let mu = self.momentum;
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
    }
}

pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(UfalError::Divergence { step, loss })
    }
}

fn apply_step(model: &mut ModelBundle, opt: &mut NesterovSgd, grads: &[f64], lr: f64) -> Result<()> {
    let mut params = model.params();
    opt.step(&mut params, grads, lr);
    model.set_params(&params)
}

/// Supervised training on the source domain with the smoothed cross-entropy.
/// Returns the mean loss of every epoch.
pub fn train_source(model: &mut ModelBundle, source: &LabeledDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if source.is_empty() {
        return Err(UfalError::EmptyDataset);
    }
    let batch = if source.len() >= config.batch_size {
        config.batch_size
    } else {
        source.len() - source.len() % config.n_replicas
    };
    if batch == 0 {
        return Err(UfalError::InvalidArgument(format!(
            "{} source samples cannot fill {} replicas",
            source.len(),
            config.n_replicas
        )));
    }
    let per_epoch = source.len() / batch;
    let total = per_epoch * config.source_epochs;
    let mut rng = stream_rng(config.seed, STREAM_SOURCE_SHUFFLE);
    let mut opt = NesterovSgd::new(config.momentum, model.num_params());
    let mut ids: Vec<usize> = (0..source.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.source_epochs);
    let mut step = 0;
    for _ in 0..config.source_epochs {
        ids.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in ids.chunks_exact(batch) {
            let x = source.inputs.select(ndarray::Axis(0), chunk);
            let pass = model.forward_train(x.view(), config.n_replicas)?;
            let mut d_logits = Array2::zeros(pass.logits.raw_dim());
            let mut loss = 0.0;
            for (r, &id) in chunk.iter().enumerate() {
                let logits = pass.logits.row(r).to_vec();
                let (l, g) = smoothed_cross_entropy(&logits, source.labels[id], config.label_smoothing)?;
                loss += l;
                for (d, gv) in d_logits.row_mut(r).iter_mut().zip(g) {
                    *d = gv / batch as f64;
                }
            }
            loss /= batch as f64;
            check_finite(step, loss)?;
            let d_features = Array2::zeros(pass.features.raw_dim());
            let grads = model.backward(&pass, d_features.view(), d_logits.view());
            apply_step(model, &mut opt, &grads, cosine_lr(config.learning_rate, step, total))?;
            epoch_loss += loss;
            step += 1;
        }
        epoch_losses.push(epoch_loss / per_epoch as f64);
    }
    Ok(epoch_losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub source_loss: f64,
    /// Mean over kept target samples; `None` when the term was inactive.
    pub distance_loss: Option<f64>,
    pub prediction_loss: Option<f64>,
    pub total_loss: f64,
    /// Fraction of the batch's target half removed by filtering.
    pub filtered_fraction: f64,
    /// Every target sample of the batch was filtered; only the source loss trained.
    pub source_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub step: usize,
    /// Fraction of the whole target set the filter would remove.
    pub filtered_fraction: f64,
    pub accuracy: Option<f64>,
    pub mean_class_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Step(StepRecord),
    Refresh(RefreshRecord),
    Final(RefreshRecord),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptationTrace {
    pub steps: Vec<StepRecord>,
    pub refreshes: Vec<RefreshRecord>,
    pub final_eval: Option<RefreshRecord>,
}

impl AdaptationTrace {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.refreshes.is_empty()
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        let mut events = Vec::with_capacity(self.steps.len() + self.refreshes.len() + 1);
        let mut refreshes = self.refreshes.iter().peekable();
        for step in &self.steps {
            while let Some(r) = refreshes.next_if(|r| r.step <= step.step) {
                events.push(TraceEvent::Refresh(r.clone()));
            }
            events.push(TraceEvent::Step(step.clone()));
        }
        events.extend(refreshes.cloned().map(TraceEvent::Refresh));
        events.extend(self.final_eval.clone().map(TraceEvent::Final));
        events
    }

    pub fn from_events(events: impl IntoIterator<Item = TraceEvent>) -> Self {
        let mut trace = Self::default();
        for event in events {
            match event {
                TraceEvent::Step(s) => trace.steps.push(s),
                TraceEvent::Refresh(r) => trace.refreshes.push(r),
                TraceEvent::Final(r) => trace.final_eval = Some(r),
            }
        }
        trace
    }

    /// Line-delimited JSON, one event per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for event in self.events() {
            serde_json::to_writer(&mut out, &event)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut events = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                events.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self::from_events(events))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MeanClassAccuracy,
}

/// Arg-max predictions with batch-norm layers in evaluation mode.
pub fn predict_labels(model: &ModelBundle, inputs: &Array2<f64>) -> Result<Vec<usize>> {
    let (_, logits) = model.forward_eval(inputs.view())?;
    Ok(logits
        .outer_iter()
        .map(|row| argmax(row.as_slice().expect("contiguous")))
        .collect())
}

pub fn evaluate(model: &ModelBundle, data: &LabeledDataset, metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Err(UfalError::EmptyDataset);
    }
    let predicted = predict_labels(model, &data.inputs)?;
    Ok(score(&predicted, &data.labels, data.n_classes(), metric))
}

/// Accuracy or mean per-class accuracy; classes without samples are left out
/// of the mean.
pub fn score(predicted: &[usize], labels: &[usize], n_classes: usize, metric: Metric) -> f64 {
    match metric {
        Metric::Accuracy => {
            let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
            correct as f64 / labels.len() as f64
        }
        Metric::MeanClassAccuracy => {
            let mut hits = vec![0usize; n_classes];
            let mut totals = vec![0usize; n_classes];
            for (&p, &l) in predicted.iter().zip(labels) {
                totals[l] += 1;
                if p == l {
                    hits[l] += 1;
                }
            }
            let present: Vec<usize> = (0..n_classes).filter(|&c| totals[c] > 0).collect();
            if present.len() < n_classes {
                log::info!("{} classes absent from evaluation data", n_classes - present.len());
            }
            present.iter().map(|&c| hits[c] as f64 / totals[c] as f64).sum::<f64>() / present.len() as f64
        }
    }
}

fn eval_record(model: &ModelBundle, step: usize, filtered: f64, eval: Option<&LabeledDataset>) -> Result<RefreshRecord> {
    let (accuracy, mean_class_accuracy) = match eval {
        Some(data) => (
            Some(evaluate(model, data, Metric::Accuracy)?),
            Some(evaluate(model, data, Metric::MeanClassAccuracy)?),
        ),
        None => (None, None),
    };
    Ok(RefreshRecord {
        step,
        filtered_fraction: filtered,
        accuracy,
        mean_class_accuracy,
    })
}

/// Adaptation loop: refresh pseudo-labels when due, rebuild the class means
/// on the resample cadence, draw a batch with binned instance sampling, lay it
/// out on the replicas, and take one optimizer step on the source loss plus
/// the target loss of the unfiltered target samples.
///
/// `eval` is only used for the periodic accuracy records in the trace.
pub fn adapt(
    model: &mut ModelBundle,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    config: &TrainConfig,
    eval: Option<&LabeledDataset>,
) -> Result<AdaptationTrace> {
    config.validate()?;
    let mut trace = AdaptationTrace::default();
    if config.adapt_steps == 0 {
        return Ok(trace);
    }
    if source.is_empty() || target.is_empty() {
        return Err(UfalError::EmptyDataset);
    }
    let n_classes = model.n_classes();
    let source_by_class = source.ids_by_class();
    let mut store = PseudoLabelStore::new(config.refresh_period, config.resample_period)?;
    let mut bis_rng = stream_rng(config.seed, STREAM_BIS);
    let mut layout_rng = stream_rng(config.seed, STREAM_LAYOUT);
    let mut mc_rng = stream_rng(config.seed, STREAM_MC);
    let mut assign_rng = stream_rng(config.seed, STREAM_ASSIGN);
    let mut subset_rng = stream_rng(config.seed, STREAM_SUBSET);
    let mut opt = NesterovSgd::new(config.momentum, model.num_params());

    let mut kappa: Vec<Vec<usize>> = Vec::new();
    let mut kept: Vec<bool> = Vec::new();
    let mut means: Option<ClassMeans> = None;

    for step in 0..config.adapt_steps {
        let refreshed = store.due_for_refresh(step);
        if refreshed {
            match config.refresh_subset {
                Some(n) if store.len() == target.len() => {
                    let ids = index::sample(&mut subset_rng, target.len(), n.min(target.len())).into_vec();
                    store.refresh_subset(model, target, &ids, config.n_mc, config.mc_rate, &mut mc_rng, step)?;
                }
                _ => store.refresh(model, target, config.n_mc, config.mc_rate, &mut mc_rng, step)?,
            }
            kappa = group_and_sort(&store, n_classes);
            let decisions: Vec<bool> = store
                .records
                .iter()
                .map(|r| ubf(&r.p_tilde, n_classes, config.phi).kept)
                .collect();
            let filtered = decisions.iter().filter(|k| !**k).count() as f64 / decisions.len() as f64;
            kept = if config.components.ubf {
                decisions
            } else {
                vec![true; store.len()]
            };
            trace.refreshes.push(eval_record(model, step, filtered, eval)?);
        }
        if config.components.ufl && (refreshed || store.due_for_resample(step)) {
            let assigned = assignments(config.components.assignment, &store, &kept, &mut assign_rng);
            let features: Vec<&[f64]> = store.records.iter().map(|r| r.feature.as_slice()).collect();
            means = match build_ufm(&features, &assigned, n_classes, means.as_ref()) {
                Ok(m) => Some(m),
                Err(UfalError::ColdMeans) => means,
                Err(e) => return Err(e),
            };
        }

        let (s_half, t_half) = assemble_halves(&kappa, &source_by_class, &config.bin_spec, config.batch_size, &mut bis_rng)?;
        let plan = plan_layout(&s_half, &t_half, config.n_replicas, config.layout_mode, &mut layout_rng)?;
        if log::log_enabled!(log::Level::Trace) {
            for (pos, slot) in plan.slots.iter().enumerate() {
                let confidence = match slot.domain {
                    Domain::Target => store.records[slot.id].confidence(),
                    Domain::Source => f64::NAN,
                };
                log::trace!("step {step} pos {pos} {:?} class {} id {} conf {confidence}", slot.domain, slot.class, slot.id);
            }
        }

        let dim = model.input_dim();
        let mut x = Array2::zeros((plan.len(), dim));
        for (mut row, slot) in x.outer_iter_mut().zip(&plan.slots) {
            match slot.domain {
                Domain::Source => row.assign(&source.inputs.row(slot.id)),
                Domain::Target => row.assign(&target.inputs.row(slot.id)),
            }
        }
        let pass = model.forward_train(x.view(), config.n_replicas)?;

        let n_source = s_half.len() as f64;
        let target_rows: Vec<usize> = plan
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == Domain::Target && kept[s.id])
            .map(|(r, _)| r)
            .collect();
        let n_kept = target_rows.len();
        let filtered_fraction = 1.0 - n_kept as f64 / t_half.len() as f64;

        let mut d_logits = Array2::zeros(pass.logits.raw_dim());
        let mut d_features = Array2::zeros(pass.features.raw_dim());
        let mut source_loss = 0.0;
        for (r, slot) in plan.slots.iter().enumerate() {
            if slot.domain != Domain::Source {
                continue;
            }
            let logits = pass.logits.row(r).to_vec();
            let (l, g) = smoothed_cross_entropy(&logits, slot.class, config.label_smoothing)?;
            source_loss += l / n_source;
            for (d, gv) in d_logits.row_mut(r).iter_mut().zip(g) {
                *d += gv / n_source;
            }
        }

        let mut distance_sum = 0.0;
        let mut distance_count = 0usize;
        let mut prediction_sum = 0.0;
        if n_kept > 0 {
            let w = config.target_weight / n_kept as f64;
            for &r in &target_rows {
                let slot = plan.slots[r];
                let record = &store.records[slot.id];
                let logits = pass.logits.row(r).to_vec();
                let (l, g) = prediction_term(&logits, record.p_hat)?;
                prediction_sum += l;
                for (d, gv) in d_logits.row_mut(r).iter_mut().zip(g) {
                    *d += w * gv;
                }
                if let Some(m) = means.as_ref().filter(|_| config.components.ufl) {
                    let feature = pass.features.row(r).to_vec();
                    if let Some((l, g)) = distance_term(&feature, &record.p_tilde, m) {
                        distance_sum += l;
                        distance_count += 1;
                        for (d, gv) in d_features.row_mut(r).iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
            }
        } else {
            log::debug!("step {step}: every target sample filtered, training on source loss only");
        }
        let prediction_loss = (n_kept > 0).then(|| prediction_sum / n_kept as f64);
        let distance_loss = (distance_count > 0).then(|| distance_sum / n_kept as f64);
        let total_loss = source_loss
            + config.target_weight * (prediction_loss.unwrap_or(0.0) + distance_loss.unwrap_or(0.0));
        check_finite(step, total_loss)?;

        let grads = model.backward(&pass, d_features.view(), d_logits.view());
        let lr = cosine_lr(config.learning_rate, step, config.adapt_steps);
        apply_step(model, &mut opt, &grads, lr)?;
        trace.steps.push(StepRecord {
            step,
            lr,
            source_loss,
            distance_loss,
            prediction_loss,
            total_loss,
            filtered_fraction,
            source_only: n_kept == 0,
        });
    }
    let final_filtered = trace.refreshes.last().map_or(0.0, |r| r.filtered_fraction);
    trace.final_eval = Some(eval_record(model, config.adapt_steps, final_filtered, eval)?);
    Ok(trace)
}
