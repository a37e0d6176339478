//! Supervised training with early stopping, the layer-wise subCNN growth
//! procedure, partial/complete fine-tuning, and the end-to-end driver.
//!
//! Everything is deterministic under a fixed seed: weight init, per-epoch
//! shuffling and dropout masks all draw from ChaCha streams derived from the
//! run seed, and gradients are accumulated in a fixed order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataio::DatasetSplit;
use crate::eval::{self, EvalError, EvalReport};
use crate::features::SampleSet;
use crate::layers::{maxpool_compute, maxpool_route, Activation, PoolCache};
use crate::model::{
    build_subcnn, transfer_prefix_weights, ArchitectureConfig, Layer, Model, ModelError,
};
use crate::optim::{bce_loss, output_error, OptimError, OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch_index}")]
    NanLoss { epoch: usize, batch_index: usize },
    #[error("layer-wise stage depth {depth}: {source}")]
    Stage {
        depth: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layer(#[from] crate::layers::LayerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many consecutive epochs without a validation
    /// macro-F improvement.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 32,
            patience: 5,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            dropout_rate: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f: f64,
}

/// Per-epoch metric trail of one training run. The wall clock is informative
/// only and never serialized, so artifacts stay byte-identical across reruns.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose validation macro-F was best (max over epochs).
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_macro_f\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_macro_f
            ));
        }
        s
    }

    pub fn to_json_summary(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn best_val_macro_f(&self) -> Option<f64> {
        self.best_epoch.map(|i| self.epochs[i].val_macro_f)
    }
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainScope {
    All,
    FinalLayerOnly,
}

/// Per-sample forward/backward bookkeeping.
struct Trace {
    inputs: Vec<Tensor>,
    pre_acts: Vec<Option<Tensor>>,
    pool_caches: Vec<Option<PoolCache>>,
    out_shapes: Vec<Vec<usize>>,
    masks_after: Vec<Option<Vec<f64>>>,
    output: f64,
}

/// Index of the first dense layer.
fn first_dense(model: &Model) -> usize {
    model
        .layers
        .iter()
        .position(|l| matches!(l, Layer::Dense(_)))
        .expect("every model ends in a dense layer")
}

/// Layer indices whose *output* gets a dropout mask: after each pooling
/// layer, plus before the dense section when the preceding layer is not a
/// pool.
fn dropout_sites(model: &Model) -> Vec<usize> {
    let mut sites: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Pool(_)))
        .map(|(i, _)| i)
        .collect();
    let fd = first_dense(model);
    if fd > 0 && !sites.contains(&(fd - 1)) {
        sites.push(fd - 1);
    }
    sites.sort_unstable();
    sites
}

/// Training-mode forward pass: caches every intermediate needed by backward
/// and applies inverted dropout at the given sites.
fn forward_train(
    model: &Model,
    sample: &Tensor,
    sites: &[usize],
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trace, TrainError> {
    let n = model.layers.len();
    let mut trace = Trace {
        inputs: Vec::with_capacity(n),
        pre_acts: vec![None; n],
        pool_caches: vec![None; n],
        out_shapes: vec![Vec::new(); n],
        masks_after: vec![None; n],
        output: 0.0,
    };
    let keep = 1.0 - dropout_rate;
    let mut act = sample.clone();
    let mut flattened = false;
    for (i, layer) in model.layers.iter().enumerate() {
        if matches!(layer, Layer::Dense(_)) && !flattened {
            let len = act.len();
            act = act.reshaped(vec![len]);
            flattened = true;
        }
        trace.inputs.push(act.clone());
        act = match layer {
            Layer::Conv(conv) => {
                let (pre, a) = conv.forward(&act)?;
                trace.pre_acts[i] = Some(pre);
                a
            }
            Layer::Pool(pool) => {
                let (a, cache) = maxpool_compute(&act, pool.pool_h, pool.pool_w)?;
                trace.pool_caches[i] = Some(cache);
                a
            }
            Layer::Dense(dense) => {
                let (pre, a) = dense.forward(&act)?;
                trace.pre_acts[i] = Some(pre);
                a
            }
        };
        trace.out_shapes[i] = act.shape().to_vec();
        if dropout_rate > 0.0 && sites.contains(&i) {
            let mask: Vec<f64> = (0..act.len())
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, m) in act.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            trace.masks_after[i] = Some(mask);
        }
    }
    debug_assert_eq!(act.len(), 1);
    trace.output = act.data()[0];
    Ok(trace)
}

/// Backward pass over a recorded trace; accumulates parameter gradients
/// (summed over the batch) into `grad_sums`, ordered like [`Model::params`].
fn backward_accumulate(
    model: &Model,
    trace: &Trace,
    label: u8,
    scope: TrainScope,
    grad_sums: &mut [Tensor],
) -> Result<(), TrainError> {
    let n = model.layers.len();
    // Output layer: seed with d(loss)/d(pre-activation) = p - y.
    let d_pre = Tensor::from_slice(&[output_error(trace.output, label)]);
    let out_dense = match &model.layers[n - 1] {
        Layer::Dense(d) => d,
        _ => unreachable!("models end in a dense layer"),
    };
    debug_assert_eq!(out_dense.activation, Activation::Sigmoid);
    let grads = out_dense.backward_from_preact(&trace.inputs[n - 1], &d_pre)?;

    let mut t = model.layers.iter().filter(|l| l.is_trainable()).count();
    t -= 1;
    let [wi, bi] = model.param_indices_of_trainable(t);
    add_assign(&mut grad_sums[wi], &grads.d_weights);
    add_assign(&mut grad_sums[bi], &grads.d_bias);

    if scope == TrainScope::FinalLayerOnly {
        return Ok(());
    }

    let mut d = grads.d_input;
    for i in (0..n - 1).rev() {
        // d currently matches layer i's output element count; restore shape.
        d = d.reshaped(trace.out_shapes[i].clone());
        if let Some(mask) = &trace.masks_after[i] {
            for (v, m) in d.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        match &model.layers[i] {
            Layer::Conv(conv) => {
                let g = conv.backward(
                    &trace.inputs[i],
                    trace.pre_acts[i].as_ref().expect("conv trace"),
                    &d,
                )?;
                t -= 1;
                let [wi, bi] = model.param_indices_of_trainable(t);
                add_assign(&mut grad_sums[wi], &g.d_weights);
                add_assign(&mut grad_sums[bi], &g.d_bias);
                d = g.d_input;
            }
            Layer::Pool(_) => {
                d = maxpool_route(trace.pool_caches[i].as_ref().expect("pool trace"), &d)?;
            }
            Layer::Dense(dense) => {
                let g = dense.backward(
                    &trace.inputs[i],
                    trace.pre_acts[i].as_ref().expect("dense trace"),
                    &d,
                )?;
                t -= 1;
                let [wi, bi] = model.param_indices_of_trainable(t);
                add_assign(&mut grad_sums[wi], &g.d_weights);
                add_assign(&mut grad_sums[bi], &g.d_bias);
                d = g.d_input;
            }
        }
    }
    Ok(())
}

fn add_assign(acc: &mut Tensor, g: &Tensor) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// One sample's loss and parameter-gradient contribution; exposed for the
/// gradient-check suites.
pub fn loss_and_gradients(
    model: &Model,
    sample: &Tensor,
    label: u8,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let sites = dropout_sites(model);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward_train(model, sample, &sites, 0.0, &mut rng)?;
    let loss = bce_loss(trace.output, label)?;
    let mut grads: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    backward_accumulate(model, &trace, label, TrainScope::All, &mut grads)?;
    Ok((loss, grads))
}

fn sample_tensors(set: &SampleSet) -> Vec<Tensor> {
    set.samples
        .iter()
        .map(|s| Tensor::new(vec![1, set.window_len, set.n_features], s.window.clone()))
        .collect()
}

/// Mean BCE loss and macro-F of the model over a set (pure forward).
fn evaluate_set(model: &Model, set: &SampleSet, inputs: &[Tensor]) -> Result<(f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(inputs.len());
    for (input, s) in inputs.iter().zip(&set.samples) {
        let p = model.forward_sample(input)?;
        loss += bce_loss(p, s.label)?;
        probs.push(p);
    }
    let preds = eval::classify(&probs);
    let labels: Vec<u8> = set.samples.iter().map(|s| s.label).collect();
    let macro_f = eval::macro_f(&preds, &labels)?;
    Ok((loss / inputs.len() as f64, macro_f))
}

fn train_scoped(
    mut model: Model,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainConfig,
    scope: TrainScope,
) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let started = std::time::Instant::now();
    let mut report = TrainReport::default();
    if cfg.max_epochs == 0 {
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        return Ok((model, report));
    }

    let train_inputs = sample_tensors(train_set);
    let val_inputs = sample_tensors(val_set);
    let sites = dropout_sites(&model);
    let n_trainable = model.layers.iter().filter(|l| l.is_trainable()).count();

    // Parameter indices the optimizer may touch.
    let tuned: Vec<usize> = match scope {
        TrainScope::All => (0..2 * n_trainable).collect(),
        TrainScope::FinalLayerOnly => {
            let [w, b] = model.param_indices_of_trainable(n_trainable - 1);
            vec![w, b]
        }
    };
    let tuned_shapes: Vec<Vec<usize>> = {
        let params = model.params();
        tuned.iter().map(|&i| params[i].shape().to_vec()).collect()
    };
    let mut optimizer = OptimizerState::new(cfg.optimizer, &tuned_shapes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_sums: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            for &idx in batch {
                let trace = forward_train(
                    &model,
                    &train_inputs[idx],
                    &sites,
                    cfg.dropout_rate,
                    &mut rng,
                )?;
                let loss = bce_loss(trace.output, train_set.samples[idx].label)?;
                if !loss.is_finite() {
                    return Err(TrainError::NanLoss { epoch, batch_index });
                }
                epoch_loss += loss;
                backward_accumulate(
                    &model,
                    &trace,
                    train_set.samples[idx].label,
                    scope,
                    &mut grad_sums,
                )?;
            }
            let tuned_grads: Vec<Tensor> =
                tuned.iter().map(|&i| grad_sums[i].clone()).collect();
            let mut tuned_params: Vec<&mut Tensor> = model
                .params_mut()
                .into_iter()
                .enumerate()
                .filter(|(i, _)| tuned.contains(i))
                .map(|(_, p)| p)
                .collect();
            optimizer.step(&mut tuned_params, &tuned_grads, batch.len())?;
        }

        let (val_loss, val_macro_f) = evaluate_set(&model, val_set, &val_inputs)?;
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_inputs.len() as f64,
            val_loss,
            val_macro_f,
        });

        let improved = best.as_ref().map(|(b, _, _)| val_macro_f > *b).unwrap_or(true);
        if improved {
            let snapshot = model.params().into_iter().cloned().collect();
            best = Some((val_macro_f, epoch, snapshot));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, best_epoch, snapshot)) = best {
        for (p, s) in model.params_mut().into_iter().zip(snapshot) {
            *p = s;
        }
        report.best_epoch = Some(best_epoch);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Mini-batch training with per-epoch shuffling, validation-macro-F early
/// stopping, and best-epoch weight restoration.
pub fn train(
    model: Model,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), TrainError> {
    train_scoped(model, train_set, val_set, cfg, TrainScope::All)
}

/// Deterministic per-stage seed derivation (splitmix64 over seed and depth).
pub fn stage_seed(seed: u64, depth: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(depth as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Instrumentation of one growth stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub depth: usize,
    pub seed: u64,
    /// Hash of the previous stage's trained prefix (its hidden layers).
    pub prev_prefix_hash: Option<u64>,
    /// Hash of this stage's matching prefix right after transfer, before any
    /// update; must equal `prev_prefix_hash`.
    pub init_prefix_hash: Option<u64>,
    #[serde(skip)]
    pub report: TrainReport,
}

pub struct LayerwiseOutcome {
    /// The deepest (final) base predictor.
    pub model: Model,
    /// Every trained subCNN in growth order (depths 2, 3, ..).
    pub stage_models: Vec<Model>,
    pub stage_records: Vec<StageRecord>,
}

/// Grows the network one trainable layer at a time: trains the depth-2
/// subCNN, transfers its prefix into depth 3, trains, and so on up to the
/// full architecture. Returns the final base predictor plus every
/// intermediate stage.
pub fn layerwise_train(
    arch: &ArchitectureConfig,
    pool_train: &SampleSet,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<LayerwiseOutcome, TrainError> {
    let max_depth = arch.max_depth();
    let mut stage_models: Vec<Model> = Vec::new();
    let mut stage_records = Vec::new();

    for depth in 2..=max_depth {
        let seed = stage_seed(cfg.seed, depth);
        let mut fresh = build_subcnn(arch, depth, seed)
            .map_err(|e| TrainError::Stage { depth, source: Box::new(e.into()) })?;

        let (prev_hash, init_hash) = if let Some(prev) = stage_models.last() {
            fresh = transfer_prefix_weights(prev, fresh)
                .map_err(|e| TrainError::Stage { depth, source: Box::new(e.into()) })?;
            let shared = depth - 2;
            (
                Some(prev.prefix_weights_hash(shared)),
                Some(fresh.prefix_weights_hash(shared)),
            )
        } else {
            (None, None)
        };

        let stage_cfg = TrainConfig { seed, ..cfg.clone() };
        let (mut trained, report) = train(fresh, pool_train, val, &stage_cfg)
            .map_err(|e| TrainError::Stage { depth, source: Box::new(e) })?;
        trained.metadata.seed = cfg.seed;
        trained.metadata.provenance = if depth == max_depth {
            "B pred".to_string()
        } else {
            format!("B pred ({depth} layers)")
        };

        stage_records.push(StageRecord {
            depth,
            seed,
            prev_prefix_hash: prev_hash,
            init_prefix_hash: init_hash,
            report,
        });
        stage_models.push(trained);
    }

    Ok(LayerwiseOutcome {
        model: stage_models.last().expect("at least one stage").clone(),
        stage_models,
        stage_records,
    })
}

/// Retrains only the final dense layer on a new instrument; every other
/// parameter stays bit-identical to the base predictor.
pub fn fine_tune_partial(
    base: &Model,
    stock_train: &SampleSet,
    stock_val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), TrainError> {
    let mut model = base.clone();
    model.metadata.provenance = "P pred".to_string();
    model.metadata.seed = cfg.seed;
    train_scoped(model, stock_train, stock_val, cfg, TrainScope::FinalLayerOnly)
}

/// Retrains all parameters on a new instrument, warm-started from the base
/// predictor's weights.
pub fn fine_tune_complete(
    base: &Model,
    stock_train: &SampleSet,
    stock_val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), TrainError> {
    let mut model = base.clone();
    model.metadata.provenance = "C pred".to_string();
    model.metadata.seed = cfg.seed;
    train_scoped(model, stock_train, stock_val, cfg, TrainScope::All)
}

/// Featurized, split data of one instrument.
pub struct InstrumentData {
    pub instrument: String,
    pub split: DatasetSplit,
}

/// The three report collections of the end-to-end run.
pub struct UcnnOutcome {
    pub base_model: Model,
    pub stage_models: Vec<Model>,
    pub stage_records: Vec<StageRecord>,
    /// Base predictor scored on each pool instrument's test split.
    pub base_reports: Vec<EvalReport>,
    /// Partially fine-tuned predictor per new instrument.
    pub partial_reports: Vec<EvalReport>,
    /// Completely fine-tuned predictor per new instrument.
    pub complete_reports: Vec<EvalReport>,
}

/// End-to-end driver: pools the training data of all pool instruments,
/// layer-wise trains the base predictor, scores it on every pool instrument's
/// test split, then adapts it to each new instrument with both fine-tuning
/// modes and scores those.
pub fn run_ucnnpred(
    arch: &ArchitectureConfig,
    pool: &[InstrumentData],
    new: &[InstrumentData],
    cfg: &TrainConfig,
) -> Result<UcnnOutcome, TrainError> {
    let pool_train =
        SampleSet::concat(&pool.iter().map(|d| &d.split.train).collect::<Vec<_>>());
    let pool_val =
        SampleSet::concat(&pool.iter().map(|d| &d.split.validation).collect::<Vec<_>>());

    let outcome = layerwise_train(arch, &pool_train, &pool_val, cfg)?;
    let base = &outcome.model;

    let mut base_reports = Vec::new();
    for inst in pool {
        base_reports.push(eval::evaluate_model(base, &inst.split.test, "B pred")?);
    }

    let mut partial_reports = Vec::new();
    let mut complete_reports = Vec::new();
    for inst in new {
        let (partial, _) =
            fine_tune_partial(base, &inst.split.train, &inst.split.validation, cfg)?;
        partial_reports.push(eval::evaluate_model(&partial, &inst.split.test, "P pred")?);

        let (complete, _) =
            fine_tune_complete(base, &inst.split.train, &inst.split.validation, cfg)?;
        complete_reports.push(eval::evaluate_model(&complete, &inst.split.test, "C pred")?);
    }

    Ok(UcnnOutcome {
        base_model: outcome.model.clone(),
        stage_models: outcome.stage_models,
        stage_records: outcome.stage_records,
        base_reports,
        partial_reports,
        complete_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Sample;
    use crate::model::{build_base_cnn, ConvSpec};
    use chrono::NaiveDate;

    fn micro_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            window: 8,
            n_features: 4,
            conv_specs: vec![
                ConvSpec { filter_h: 1, filter_w: 4, out_channels: 2 },
                ConvSpec { filter_h: 3, filter_w: 1, out_channels: 2 },
                ConvSpec { filter_h: 3, filter_w: 1, out_channels: 2 },
            ],
            pool_after: vec![false, true, false],
            dense_hidden: vec![],
            dropout_rate: 0.0,
            use_bias: true,
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 30,
            batch_size: 8,
            patience: 30,
            optimizer: OptimizerConfig::adam(0.01),
            seed,
            dropout_rate: 0.0,
        }
    }

    /// Separable toy set: label 1 samples carry +shift in feature 0, label 0
    /// samples -shift; other cells are seeded noise.
    fn toy_set(n: usize, window: usize, nf: usize, shift: f64, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let samples = (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let window_data: Vec<f64> = (0..window * nf)
                    .map(|j| {
                        let noise: f64 = rng.gen_range(-0.5..0.5);
                        if j % nf == 0 {
                            noise + sign * shift
                        } else {
                            noise
                        }
                    })
                    .collect();
                let date = base + chrono::Duration::days(i as i64);
                Sample {
                    instrument: "TOY".into(),
                    date,
                    label_date: date.succ_opt().unwrap(),
                    window: window_data,
                    label,
                }
            })
            .collect();
        SampleSet { samples, stats: None, window_len: window, n_features: nf }
    }

    fn train_accuracy(model: &Model, set: &SampleSet) -> f64 {
        let inputs = sample_tensors(set);
        let correct = inputs
            .iter()
            .zip(&set.samples)
            .filter(|(x, s)| {
                let p = model.forward_sample(x).unwrap();
                u8::from(p > 0.5) == s.label
            })
            .count();
        correct as f64 / set.len() as f64
    }

    #[test]
    fn overfits_separable_toy_set() {
        let arch = micro_arch();
        let set = toy_set(50, 8, 4, 1.0, 1);
        let model = build_base_cnn(&arch, 7).unwrap();
        let cfg = TrainConfig { max_epochs: 200, ..quick_cfg(7) };
        let (trained, report) = train(model, &set, &set, &cfg).unwrap();
        assert!(
            train_accuracy(&trained, &set) >= 0.95,
            "accuracy {} after {} epochs",
            train_accuracy(&trained, &set),
            report.epochs.len()
        );
    }

    #[test]
    fn empty_train_set_errors() {
        let arch = micro_arch();
        let model = build_base_cnn(&arch, 0).unwrap();
        let empty = SampleSet { window_len: 8, n_features: 4, ..Default::default() };
        let val = toy_set(4, 8, 4, 1.0, 0);
        assert!(matches!(
            train(model, &empty, &val, &quick_cfg(0)),
            Err(TrainError::EmptyTrainSet)
        ));
    }

    #[test]
    fn patience_one_stops_at_first_stale_epoch() {
        let arch = micro_arch();
        let set = toy_set(24, 8, 4, 1.0, 3);
        let model = build_base_cnn(&arch, 3).unwrap();
        let cfg = TrainConfig { max_epochs: 100, patience: 1, ..quick_cfg(3) };
        let (_, report) = train(model, &set, &set, &cfg).unwrap();
        let best = report.best_epoch.unwrap();
        // Stopped exactly one epoch after the last improvement.
        assert_eq!(report.epochs.len(), best + 2);
        let best_f = report.epochs[best].val_macro_f;
        for e in &report.epochs {
            assert!(e.val_macro_f <= best_f);
        }
    }

    #[test]
    fn identical_seed_gives_bit_identical_models() {
        let arch = micro_arch();
        let set = toy_set(30, 8, 4, 0.7, 5);
        let val = toy_set(10, 8, 4, 0.7, 6);
        let cfg = TrainConfig { max_epochs: 5, dropout_rate: 0.2, ..quick_cfg(11) };
        let run = || {
            let model = build_base_cnn(&arch, 11).unwrap();
            let (m, _) = train(model, &set, &val, &cfg).unwrap();
            m.serialize()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let arch = micro_arch();
        let set = toy_set(10, 8, 4, 1.0, 0);
        let model = build_base_cnn(&arch, 2).unwrap();
        let before = model.serialize();
        let cfg = TrainConfig { max_epochs: 0, ..quick_cfg(0) };
        let (after, report) = train(model, &set, &set, &cfg).unwrap();
        assert_eq!(before, after.serialize());
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn layerwise_returns_three_stages_with_growing_depths() {
        let arch = micro_arch();
        let set = toy_set(30, 8, 4, 0.8, 2);
        let val = toy_set(10, 8, 4, 0.8, 9);
        let cfg = TrainConfig { max_epochs: 2, ..quick_cfg(2) };
        let out = layerwise_train(&arch, &set, &val, &cfg).unwrap();
        assert_eq!(out.stage_models.len(), 3);
        let depths: Vec<usize> = out.stage_models.iter().map(|m| m.depth).collect();
        assert_eq!(depths, vec![2, 3, 4]);
        assert_eq!(out.model.depth, 4);
        assert_eq!(out.model.metadata.provenance, "B pred");
    }

    #[test]
    fn layerwise_chain_contract_prefix_hashes_match() {
        let arch = micro_arch();
        let set = toy_set(30, 8, 4, 0.8, 4);
        let val = toy_set(10, 8, 4, 0.8, 5);
        let cfg = TrainConfig { max_epochs: 3, ..quick_cfg(4) };
        let out = layerwise_train(&arch, &set, &val, &cfg).unwrap();
        assert_eq!(out.stage_records[0].prev_prefix_hash, None);
        for rec in &out.stage_records[1..] {
            assert!(rec.prev_prefix_hash.is_some());
            assert_eq!(
                rec.prev_prefix_hash, rec.init_prefix_hash,
                "depth {} prefix changed during transfer",
                rec.depth
            );
        }
    }

    #[test]
    fn layerwise_zero_epochs_chains_untrained_inits() {
        let arch = micro_arch();
        let set = toy_set(20, 8, 4, 0.8, 8);
        let cfg = TrainConfig { max_epochs: 0, ..quick_cfg(8) };
        let out = layerwise_train(&arch, &set, &set, &cfg).unwrap();
        // With no training the transfers chain the raw initializations: the
        // final prefix equals stage-by-stage transferred fresh weights.
        let d2 = build_subcnn(&arch, 2, stage_seed(8, 2)).unwrap();
        let d3 = transfer_prefix_weights(&d2, build_subcnn(&arch, 3, stage_seed(8, 3)).unwrap())
            .unwrap();
        let d4 = transfer_prefix_weights(&d3, build_subcnn(&arch, 4, stage_seed(8, 4)).unwrap())
            .unwrap();
        assert_eq!(out.model.prefix_weights_hash(3), d4.prefix_weights_hash(3));
    }

    #[test]
    fn partial_fine_tune_freezes_everything_but_last_layer() {
        let arch = micro_arch();
        let pool = toy_set(30, 8, 4, 0.8, 1);
        let base = {
            let cfg = TrainConfig { max_epochs: 2, ..quick_cfg(1) };
            let (m, _) = train(build_base_cnn(&arch, 1).unwrap(), &pool, &pool, &cfg).unwrap();
            m
        };
        let stock = toy_set(20, 8, 4, 0.8, 17);
        let cfg = TrainConfig { max_epochs: 3, ..quick_cfg(17) };
        let (tuned, _) = fine_tune_partial(&base, &stock, &stock, &cfg).unwrap();

        let base_params = base.params();
        let tuned_params = tuned.params();
        let n = base_params.len();
        for i in 0..n - 2 {
            assert_eq!(base_params[i], tuned_params[i], "param {i} changed");
        }
        assert_eq!(tuned.metadata.provenance, "P pred");
    }

    #[test]
    fn partial_fine_tune_with_zero_lr_is_identity_on_weights() {
        let arch = micro_arch();
        let base = build_base_cnn(&arch, 2).unwrap();
        let stock = toy_set(16, 8, 4, 0.8, 3);
        let cfg = TrainConfig {
            max_epochs: 3,
            optimizer: OptimizerConfig::sgd(0.0),
            ..quick_cfg(3)
        };
        let (tuned, _) = fine_tune_partial(&base, &stock, &stock, &cfg).unwrap();
        assert_eq!(base.params(), tuned.params());
    }

    #[test]
    fn partial_fine_tune_fits_linear_readout_of_base_features() {
        // Labels defined as a fixed linear readout of the base model's
        // penultimate features: tuning only the last layer must fit them.
        let arch = micro_arch();
        let base = build_base_cnn(&arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let flatten = arch.flatten_size().unwrap();
        let readout: Vec<f64> = (0..flatten).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let raw = toy_set(60, 8, 4, 0.0, 23); // pure noise windows
        let mut scores = Vec::new();
        for s in &raw.samples {
            let x = Tensor::new(vec![1, 8, 4], s.window.clone());
            let feats = base.hidden_features(&x).unwrap();
            let score: f64 = feats.data().iter().zip(&readout).map(|(a, b)| a * b).sum();
            scores.push(score);
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let mut set = raw.clone();
        for (s, &score) in set.samples.iter_mut().zip(&scores) {
            s.label = u8::from(score > median);
        }

        let cfg = TrainConfig {
            max_epochs: 300,
            batch_size: 60,
            patience: 300,
            optimizer: OptimizerConfig::adam(0.05),
            seed: 24,
            dropout_rate: 0.0,
        };
        let (tuned, _) = fine_tune_partial(&base, &set, &set, &cfg).unwrap();
        assert!(train_accuracy(&tuned, &set) >= 0.95);
    }

    #[test]
    fn complete_fine_tune_zero_epochs_is_identity() {
        let arch = micro_arch();
        let base = build_base_cnn(&arch, 5).unwrap();
        let stock = toy_set(10, 8, 4, 0.8, 5);
        let cfg = TrainConfig { max_epochs: 0, ..quick_cfg(5) };
        let (tuned, _) = fine_tune_complete(&base, &stock, &stock, &cfg).unwrap();
        assert_eq!(base.params(), tuned.params());
        assert_eq!(tuned.metadata.provenance, "C pred");
    }

    #[test]
    fn complete_fine_tune_updates_conv_weights() {
        // Negative control for the freeze contract.
        let arch = micro_arch();
        let base = build_base_cnn(&arch, 6).unwrap();
        let stock = toy_set(20, 8, 4, 0.8, 6);
        let cfg = TrainConfig { max_epochs: 1, ..quick_cfg(6) };
        let (tuned, _) = fine_tune_complete(&base, &stock, &stock, &cfg).unwrap();
        let changed = base
            .params()
            .iter()
            .zip(tuned.params())
            .take(2) // first conv layer's weights and bias
            .any(|(a, b)| a != &b);
        assert!(changed, "conv weights did not move under complete fine-tuning");
    }

    #[test]
    fn complete_fine_tune_warm_start_helps_or_ties() {
        // First-epoch train loss from the warm start should not be worse
        // than from a random initialization (5% tolerance on the median).
        let arch = micro_arch();
        let pool = toy_set(40, 8, 4, 0.8, 30);
        let stock = toy_set(30, 8, 4, 0.8, 31);
        let mut warm_losses = Vec::new();
        let mut cold_losses = Vec::new();
        for seed in 0..10u64 {
            let cfg1 = TrainConfig { max_epochs: 2, ..quick_cfg(seed) };
            let (base, _) =
                train(build_base_cnn(&arch, seed).unwrap(), &pool, &pool, &cfg1).unwrap();
            let cfg2 = TrainConfig { max_epochs: 1, ..quick_cfg(seed + 100) };
            let (_, warm) = fine_tune_complete(&base, &stock, &stock, &cfg2).unwrap();
            let cold_model = build_base_cnn(&arch, seed + 500).unwrap();
            let (_, cold) = train(cold_model, &stock, &stock, &cfg2).unwrap();
            warm_losses.push(warm.epochs[0].train_loss);
            cold_losses.push(cold.epochs[0].train_loss);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let warm = median(&mut warm_losses);
        let cold = median(&mut cold_losses);
        assert!(warm <= cold * 1.05, "warm {warm} vs cold {cold}");
    }

    fn split_of(set: SampleSet) -> DatasetSplit {
        let n = set.len();
        let train = SampleSet {
            samples: set.samples[..n / 2].to_vec(),
            stats: None,
            window_len: set.window_len,
            n_features: set.n_features,
        };
        let validation = SampleSet {
            samples: set.samples[n / 2..3 * n / 4].to_vec(),
            ..train.clone()
        };
        let test = SampleSet { samples: set.samples[3 * n / 4..].to_vec(), ..train.clone() };
        DatasetSplit {
            train,
            validation,
            test,
            provenance: crate::dataio::SplitProvenance {
                instrument: "TOY".into(),
                spec: crate::dataio::SplitSpec {
                    train_end: NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(),
                    val_fraction: 0.25,
                    test_start: NaiveDate::from_ymd_opt(2020, 7, 1).unwrap(),
                    test_end: NaiveDate::from_ymd_opt(2020, 12, 31).unwrap(),
                },
                discarded: 0,
                pipeline_version: "test".into(),
            },
        }
    }

    #[test]
    fn run_ucnnpred_without_new_instruments() {
        let arch = micro_arch();
        let pool = vec![
            InstrumentData { instrument: "A".into(), split: split_of(toy_set(40, 8, 4, 0.8, 1)) },
            InstrumentData { instrument: "B".into(), split: split_of(toy_set(40, 8, 4, 0.8, 2)) },
        ];
        let cfg = TrainConfig { max_epochs: 1, ..quick_cfg(0) };
        let out = run_ucnnpred(&arch, &pool, &[], &cfg).unwrap();
        assert_eq!(out.base_reports.len(), 2);
        assert!(out.partial_reports.is_empty());
        assert!(out.complete_reports.is_empty());
    }

    #[test]
    fn run_ucnnpred_reports_per_new_instrument() {
        let arch = micro_arch();
        let pool = vec![InstrumentData {
            instrument: "A".into(),
            split: split_of(toy_set(40, 8, 4, 0.8, 1)),
        }];
        let new = vec![
            InstrumentData { instrument: "N1".into(), split: split_of(toy_set(40, 8, 4, 0.8, 3)) },
            InstrumentData { instrument: "N2".into(), split: split_of(toy_set(40, 8, 4, 0.8, 4)) },
        ];
        let cfg = TrainConfig { max_epochs: 1, ..quick_cfg(0) };
        let out = run_ucnnpred(&arch, &pool, &new, &cfg).unwrap();
        assert_eq!(out.partial_reports.len(), 2);
        assert_eq!(out.complete_reports.len(), 2);
        assert!(out.partial_reports.iter().all(|r| r.model_tag == "P pred"));
        assert!(out.complete_reports.iter().all(|r| r.model_tag == "C pred"));
    }

    #[test]
    fn loss_decreases_on_separable_set_with_sgd() {
        let arch = micro_arch();
        let set = toy_set(40, 8, 4, 1.5, 12);
        let model = build_base_cnn(&arch, 12).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 40, // full batch
            patience: 50,
            optimizer: OptimizerConfig::sgd(0.05),
            seed: 12,
            dropout_rate: 0.0,
        };
        let (_, report) = train(model, &set, &set, &cfg).unwrap();
        for pair in report.epochs.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-9,
                "loss rose from {} to {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn report_csv_shape() {
        let report = TrainReport {
            epochs: vec![EpochMetrics { epoch: 0, train_loss: 0.7, val_loss: 0.68, val_macro_f: 0.5 }],
            best_epoch: Some(0),
            wall_clock_secs: 1.0,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_macro_f\n"));
        assert_eq!(csv.lines().count(), 2);
        assert!(!report.to_json_summary().contains("wall_clock"));
    }
}
