//! Two-stage optimization: the recommendation objective with both bottleneck
//! regularizers, then the contrastive update of the media parameters.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::config::{GraphRefresh, RunConfig, Stage2Schedule};
use crate::data::{sample_bpr_triples, Dataset, Split, TripleBatch};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::SemanticItemGraph;
use crate::model::{
    forward, logistic_noise, mean_of, predict_scores, project_modalities, MaskMode, ModelContext,
    ModelParams, ParamVars, Representations, Role, Tensor,
};
use crate::objectives::{
    bpr_loss, fib_loss, gib_loss, l2_penalty, stage1_total, stage2_infonce, HsicConfig,
    LossBreakdown,
};
use crate::seeds::{rng_for, Stream};

/// Bias-corrected Adam over a fixed subset of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    indices: Vec<usize>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, select: impl Fn(&Tensor) -> bool) -> Self {
        let indices: Vec<usize> = (0..params.len())
            .filter(|&i| select(&params.tensors()[i]))
            .collect();
        let zeros = |i: &usize| {
            let (r, c) = params.value(*i).shape();
            Matrix::zeros(r, c)
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: indices.iter().map(zeros).collect(),
            second: indices.iter().map(zeros).collect(),
            indices,
        }
    }

    /// Tensor indices this optimizer updates.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Applies one update. `grads[k]` belongs to tensor `indices()[k]`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != self.indices.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.indices.len()
            )));
        }
        for (g, &i) in grads.iter().zip(&self.indices) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.tensors()[i].name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, &i) in self.indices.iter().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let theta = params.tensors_mut()[i].value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss weights and kernel settings resolved from a [`RunConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Present when the feature-level regularizer is active.
    pub fib: Option<HsicConfig>,
    /// Present when the graph-level regularizer is active.
    pub gib: Option<HsicConfig>,
}

impl LossSettings {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        Ok(LossSettings {
            alpha: c.alpha,
            beta: c.beta,
            lambda: c.lambda_reg,
            tau: c.tau,
            fib: c
                .fib_active()
                .then(|| HsicConfig::new(c.sigma_sq_fib, c.hsic_normalize_inputs))
                .transpose()?,
            gib: c
                .gib_active()
                .then(|| HsicConfig::new(c.sigma_sq_gib, c.hsic_normalize_inputs))
                .transpose()?,
        })
    }
}

/// Tape handles of the stage-1 loss terms.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Terms {
    pub total: Var,
    pub rec: Var,
    pub reg: Var,
    pub fib: Option<Var>,
    pub gib: Option<Var>,
}

impl Stage1Terms {
    pub fn breakdown(&self, tape: &Tape, s: &LossSettings) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossBreakdown::stage1(
            tape.scalar(self.rec),
            get(self.fib),
            get(self.gib),
            tape.scalar(self.reg),
            s.alpha,
            s.beta,
        )
    }
}

/// Builds `rec + α·fib + β·gib + reg` for one batch.
///
/// `noise` is the logistic noise of the relaxed edge mask; it is ignored when
/// the context has no mask.
pub fn stage1_loss(
    tape: &mut Tape,
    ctx: &ModelContext,
    p: &ParamVars,
    batch: &TripleBatch,
    noise: &[f64],
    s: &LossSettings,
) -> Result<Stage1Terms> {
    stage1_loss_with_reference(tape, ctx, p, batch, noise, s, None)
}

/// The unmasked item-graph propagation that the graph-level term compares
/// against, evaluated at the current parameters.
pub fn gib_reference(
    ctx: &ModelContext,
    params: &ModelParams,
    noise: &[f64],
) -> Result<Option<Matrix>> {
    if !ctx.use_mask {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params, |_| false)?;
    let out = forward(&mut tape, ctx, &p, MaskMode::Sample(noise))?;
    Ok(out.y_prime_base.map(|v| tape.value(v).clone()))
}

/// [`stage1_loss`] with the detached graph-level reference replaced by a fixed matrix.
pub fn stage1_loss_with_reference(
    tape: &mut Tape,
    ctx: &ModelContext,
    p: &ParamVars,
    batch: &TripleBatch,
    noise: &[f64],
    s: &LossSettings,
    reference: Option<&Matrix>,
) -> Result<Stage1Terms> {
    let mode = if ctx.use_mask {
        MaskMode::Sample(noise)
    } else {
        MaskMode::Expected
    };
    let out = forward(tape, ctx, p, mode)?;
    let pos = predict_scores(tape, out.x, out.y_fused, &batch.users, &batch.positives)?;
    let neg = predict_scores(tape, out.x, out.y_fused, &batch.users, &batch.negatives)?;
    let rec = bpr_loss(tape, pos, neg)?;
    let reg = l2_penalty(tape, p.all(), s.lambda)?;

    let items = batch.distinct_items();
    let enough = items.len() >= 2;
    if !enough && (s.fib.is_some() || s.gib.is_some()) {
        log::warn!("batch has fewer than two distinct items; skipping dependence terms");
    }
    let fib = match s.fib {
        Some(cfg) if enough && !out.z_modal.is_empty() => {
            let mut z = Vec::with_capacity(out.z_modal.len());
            let mut m = Vec::with_capacity(out.z_modal.len());
            for (k, &zk) in out.z_modal.iter().enumerate() {
                z.push(tape.row_gather(zk, &items)?);
                m.push(tape.constant(ctx.features[k].gather_rows(&items))?);
            }
            Some(fib_loss(tape, &z, &m, cfg)?)
        }
        _ => None,
    };
    let base = match reference {
        Some(m) => Some(tape.constant(m.clone())?),
        None => out.y_prime_base,
    };
    let gib = match (s.gib, out.y_prime, base) {
        (Some(cfg), Some(yp), Some(yb)) if enough => {
            let masked = tape.row_gather(yp, &items)?;
            let reference = tape.row_gather(yb, &items)?;
            Some(gib_loss(tape, masked, reference, cfg)?)
        }
        _ => None,
    };
    let total = stage1_total(tape, rec, reg, fib, gib, s.alpha, s.beta)?;
    Ok(Stage1Terms {
        total,
        rec,
        reg,
        fib,
        gib,
    })
}

/// In-batch contrastive loss between users' media embeddings and their
/// positive items' mean projected features.
pub fn stage2_loss(
    tape: &mut Tape,
    ctx: &ModelContext,
    p: &ParamVars,
    users: &[usize],
    items: &[usize],
    tau: f64,
) -> Result<Var> {
    let c = tape.row_gather(p.user_media(), users)?;
    let mut z = Vec::with_capacity(ctx.features.len());
    for (k, m) in ctx.features.iter().enumerate() {
        let (w, b) = p.proj(k);
        let rows = tape.constant(m.gather_rows(items))?;
        let zk = tape.mat_mul(rows, w)?;
        z.push(tape.add_row(zk, b)?);
    }
    let z = mean_of(tape, &z)?;
    stage2_infonce(tape, c, z, tau)
}

/// Tracks the best validation score and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.wait = 0;
            StopDecision::Improved
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Validation Recall@20; absent when the validation split is empty.
    pub val_recall_20: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall_20: Option<f64>,
    pub stop_reason: StopReason,
}

/// Owns parameters, optimizer states and random streams for one run.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub dataset: &'a Dataset,
    pub ctx: ModelContext,
    pub params: ModelParams,
    pub settings: LossSettings,
    pub stage1_adam: Adam,
    pub stage2_adam: Adam,
    pairs: Vec<(usize, usize)>,
    sampling: ChaCha8Rng,
    mask: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let ctx = ModelContext::build(dataset, &config)?;
        let params = ModelParams::for_dataset(
            dataset,
            config.embedding_dim,
            &mut rng_for(config.seed, Stream::Init),
        );
        Self::with_params(dataset, &config, ctx, params)
    }

    /// Starts from given parameters and context instead of fresh ones.
    pub fn with_params(
        dataset: &'a Dataset,
        config: &RunConfig,
        ctx: ModelContext,
        params: ModelParams,
    ) -> Result<Self> {
        let config = config.resolved();
        if dataset.interactions.num_train() == 0 {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Trainer {
            settings: LossSettings::from_config(&config)?,
            stage1_adam: Adam::new(&params, |_| true),
            stage2_adam: Adam::new(&params, |t| t.role == Role::Shared),
            pairs: dataset.interactions.train_pairs(),
            sampling: rng_for(config.seed, Stream::Sampling),
            mask: rng_for(config.seed, Stream::Mask),
            dataset,
            ctx,
            params,
            config,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.config.batch_size)
    }

    pub fn sample_batch(&mut self) -> TripleBatch {
        sample_bpr_triples(
            &self.dataset.interactions,
            &self.pairs,
            self.config.batch_size,
            &mut self.sampling,
        )
    }

    pub fn draw_mask_noise(&mut self) -> Vec<f64> {
        match (&self.ctx.item_graph, self.ctx.use_mask) {
            (Some(g), true) => logistic_noise(&mut self.mask, g.num_edges()),
            _ => Vec::new(),
        }
    }

    /// Stage-1 loss on a batch with given noise, without updating anything.
    pub fn stage1_value(&self, batch: &TripleBatch, noise: &[f64]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, &self.params, |_| false)?;
        let terms = stage1_loss(&mut tape, &self.ctx, &p, batch, noise, &self.settings)?;
        Ok(terms.breakdown(&tape, &self.settings))
    }

    /// One Adam update of every tensor on the stage-1 objective.
    pub fn stage1_step(&mut self, batch: &TripleBatch, noise: &[f64]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, &self.params, |_| true)?;
        let terms = stage1_loss(&mut tape, &self.ctx, &p, batch, noise, &self.settings)?;
        let breakdown = terms.breakdown(&tape, &self.settings);
        let mut grads = tape.backward(terms.total)?;
        let g: Vec<Matrix> = self
            .stage1_adam
            .indices()
            .iter()
            .map(|&i| grads.take(p.all()[i]).expect("parameter gradient"))
            .collect();
        self.stage1_adam
            .apply(&mut self.params, &g, self.config.learning_rate)?;
        Ok(breakdown)
    }

    /// One Adam update of the media parameters on the contrastive objective.
    pub fn stage2_step(&mut self, batch: &TripleBatch) -> Result<f64> {
        if batch.len() < 2 {
            return Err(Error::BatchSize {
                got: batch.len(),
                need: 2,
            });
        }
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, &self.params, |t| t.role == Role::Shared)?;
        let loss = stage2_loss(
            &mut tape,
            &self.ctx,
            &p,
            &batch.users,
            &batch.positives,
            self.settings.tau,
        )?;
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        let g: Vec<Matrix> = self
            .stage2_adam
            .indices()
            .iter()
            .map(|&i| grads.take(p.all()[i]).expect("parameter gradient"))
            .collect();
        self.stage2_adam
            .apply(&mut self.params, &g, self.config.learning_rate)?;
        Ok(value)
    }

    /// One pass of `ceil(|train| / batch_size)` sampled batches.
    pub fn run_epoch(&mut self) -> Result<LossBreakdown> {
        let mut mean = LossBreakdown::default();
        let mut stage2_mean = 0.0;
        let mut stage2_count = 0usize;
        let mut deferred = Vec::new();
        for b in 0..self.batches_per_epoch() {
            let batch = self.sample_batch();
            if batch.is_empty() {
                continue;
            }
            let noise = self.draw_mask_noise();
            let losses = self.stage1_step(&batch, &noise)?;
            mean.accumulate(&losses, b + 1);
            if self.config.stage2_enabled && batch.len() >= 2 {
                match self.config.stage2_schedule {
                    Stage2Schedule::PerBatch => {
                        let v = self.stage2_step(&batch)?;
                        stage2_count += 1;
                        stage2_mean += (v - stage2_mean) / stage2_count as f64;
                    }
                    Stage2Schedule::PerEpoch => deferred.push(batch),
                }
            }
        }
        for batch in &deferred {
            let v = self.stage2_step(batch)?;
            stage2_count += 1;
            stage2_mean += (v - stage2_mean) / stage2_count as f64;
        }
        mean.stage2 = stage2_mean;
        if self.config.graph_refresh == GraphRefresh::PerEpoch {
            self.refresh_item_graph()?;
        }
        Ok(mean)
    }

    /// Rebuilds the kNN item graphs from the current projected features.
    pub fn refresh_item_graph(&mut self) -> Result<()> {
        if self.ctx.item_graph.is_none() {
            return Ok(());
        }
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, &self.params, |_| false)?;
        let z = project_modalities(&mut tape, &self.ctx, &p)?;
        let projected: Vec<Matrix> = z.iter().map(|&v| tape.value(v).clone()).collect();
        self.ctx.item_graph = Some(SemanticItemGraph::from_features(
            projected.iter(),
            self.config.knn_topk,
        )?);
        Ok(())
    }

    pub fn representations(&self) -> Result<Representations> {
        Representations::compute(&self.ctx, &self.params)
    }

    /// Validation Recall@20, or `None` when no user has validation items.
    pub fn validation_recall(&self) -> Result<Option<f64>> {
        if self.dataset.interactions.val.iter().all(|v| v.is_empty()) {
            return Ok(None);
        }
        let reps = self.representations()?;
        let m = evaluate(&reps, &self.dataset.interactions, Split::Val, &[20])?;
        Ok(Some(m.recall_at(20)))
    }

    /// Trains until early stopping or `max_epochs`, leaving the best parameters in place.
    /// `on_epoch` sees every epoch record as soon as it is complete.
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<TrainReport> {
        let has_val = self.dataset.interactions.val.iter().any(|v| !v.is_empty());
        if !has_val {
            log::warn!(
                "validation split is empty; training for a fixed {} epochs",
                self.config.max_epochs
            );
        }
        let mut stopper = EarlyStopper::new(self.config.early_stop_patience.max(1));
        let mut best: Option<(ModelParams, Option<SemanticItemGraph>)> = None;
        let mut epochs = Vec::new();
        let mut reason = StopReason::MaxEpochs;
        for epoch in 1..=self.config.max_epochs {
            let losses = self.run_epoch()?;
            let val = if has_val {
                self.validation_recall()?
            } else {
                None
            };
            let record = EpochRecord {
                epoch,
                losses,
                val_recall_20: val,
            };
            log::info!(
                "epoch {epoch}: loss {:.5} rec {:.5} val R@20 {}",
                losses.total_stage1,
                losses.rec,
                val.map_or("-".to_string(), |v| format!("{v:.5}"))
            );
            on_epoch(&record)?;
            epochs.push(record);
            if let Some(v) = val {
                match stopper.observe(epoch, v) {
                    StopDecision::Improved => {
                        best = Some((self.params.clone(), self.ctx.item_graph.clone()))
                    }
                    StopDecision::Continue => {}
                    StopDecision::Stop => {
                        reason = StopReason::EarlyStop;
                        break;
                    }
                }
            }
        }
        let best_epoch = if has_val {
            if let Some((params, graph)) = best {
                self.params = params;
                self.ctx.item_graph = graph;
            }
            stopper.best_epoch
        } else {
            epochs.len()
        };
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_val_recall_20: has_val.then_some(stopper.best),
            stop_reason: reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Backbone;
    use crate::data::{InteractionSet, ModalityFeatures};

    fn toy_dataset() -> Dataset {
        let train = vec![
            vec![0, 1, 2],
            vec![1, 3],
            vec![0, 4, 5],
            vec![2, 3, 5],
            vec![4, 5],
            vec![0, 3],
        ];
        let val = vec![vec![3], vec![0], vec![], vec![4], vec![1], vec![5]];
        let m = train.len();
        let set = InteractionSet {
            user_ids: (0..m).map(|u| format!("u{u}")).collect(),
            item_ids: (0..6).map(|i| format!("i{i}")).collect(),
            train,
            val,
            test: vec![vec![]; m],
        };
        let f1 = Matrix::from_rows(&[
            [1.0, 0.2, 0.0, 0.3],
            [0.9, 0.1, 0.3, 0.0],
            [0.0, 1.0, 0.5, 0.2],
            [0.2, 0.8, 0.1, 0.9],
            [0.5, 0.5, 0.5, 0.1],
            [0.1, 0.3, 0.9, 0.6],
        ]);
        let f2 = Matrix::from_rows(&[
            [0.3, 1.0],
            [1.0, 0.1],
            [0.7, 0.7],
            [0.1, 0.9],
            [-0.4, 0.6],
            [0.8, -0.2],
        ]);
        Dataset::new(
            set,
            ModalityFeatures::new(vec![("visual".into(), f1), ("text".into(), f2)]).unwrap(),
        )
        .unwrap()
    }

    fn toy_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "embedding_dim=4",
            "knn_topk=2",
            "batch_size=8",
            "learning_rate=0.001",
            "max_epochs=3",
        ])
        .unwrap();
        c
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let params = ModelParams::init(2, 3, &[2], 2, &mut rng_for(1, Stream::Init));
        let mut p = params.clone();
        let mut adam = Adam::new(&p, |_| true);
        let zeros: Vec<Matrix> = p
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
            .collect();
        adam.apply(&mut p, &zeros, 0.1).unwrap();
        assert_eq!(p, params);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let params = ModelParams::init(1, 1, &[1], 1, &mut rng_for(2, Stream::Init));
        let mut p = params.clone();
        let mut adam = Adam::new(&p, |_| true);
        let grads: Vec<Matrix> = p
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Matrix::filled(
                    t.value.rows(),
                    t.value.cols(),
                    if i % 2 == 0 { 3.0 } else { -0.02 },
                )
            })
            .collect();
        let lr = 0.0005;
        adam.apply(&mut p, &grads, lr).unwrap();
        for (i, (a, b)) in p.tensors().iter().zip(params.tensors()).enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - (y - lr * sign)).abs() < 1e-9, "{} {x} {y}", a.name);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = ModelParams::init(1, 1, &[1], 1, &mut rng_for(2, Stream::Init));
        let before = p.clone();
        let mut adam = Adam::new(&p, |_| true);
        let mut grads: Vec<Matrix> = p
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
            .collect();
        grads[1] = Matrix::filled(1, 1, f64::NAN);
        match adam.apply(&mut p, &grads, 0.1) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "item_latent"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopper::new(10);
        let mut stopped = None;
        for epoch in 1..=30 {
            let v = if epoch <= 3 { epoch as f64 } else { 3.0 };
            if s.observe(epoch, v) == StopDecision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(13));
        assert_eq!(s.best_epoch, 3);
    }

    #[test]
    fn one_step_decreases_loss_on_fixed_batch() {
        let d = toy_dataset();
        let mut t = Trainer::new(&d, &toy_config()).unwrap();
        for p in t.params.tensors_mut() {
            p.value = p.value.scale(30.0);
        }
        t.stage1_adam = Adam::new(&t.params, |_| true);
        let batch = t.sample_batch();
        let noise = t.draw_mask_noise();
        let before = t.stage1_value(&batch, &noise).unwrap();
        let reported = t.stage1_step(&batch, &noise).unwrap();
        assert_eq!(before, reported);
        let after = t.stage1_value(&batch, &noise).unwrap();
        assert!(
            after.total_stage1 < before.total_stage1,
            "{after:?} vs {before:?}"
        );
        assert!(before.fib > 0.0 && before.gib > 0.0);
    }

    #[test]
    fn stage2_touches_only_shared_tensors() {
        let d = toy_dataset();
        let mut t = Trainer::new(&d, &toy_config()).unwrap();
        let batch = t.sample_batch();
        let before = t.params.clone();
        let stage1_state = t.stage1_adam.clone();
        t.stage2_step(&batch).unwrap();
        for (a, b) in t.params.tensors().iter().zip(before.tensors()) {
            let diff = a.value.max_abs_diff(&b.value);
            match a.role {
                Role::Stage1 => assert_eq!(diff, 0.0, "{}", a.name),
                Role::Shared => assert!(diff > 0.0, "{}", a.name),
            }
        }
        assert_eq!(t.stage1_adam, stage1_state);
    }

    #[test]
    fn disabled_stage2_leaves_its_optimizer_untouched() {
        let d = toy_dataset();
        let mut c = toy_config();
        c.stage2_enabled = false;
        let mut t = Trainer::new(&d, &c).unwrap();
        let fresh = t.stage2_adam.clone();
        let losses = t.run_epoch().unwrap();
        assert_eq!(t.stage2_adam, fresh);
        assert_eq!(losses.stage2, 0.0);
    }

    #[test]
    fn disabled_regularizers_reduce_to_backbone() {
        let d = toy_dataset();
        let mut c = toy_config();
        c.fib_enabled = false;
        c.gib_enabled = false;
        let mut t = Trainer::new(&d, &c).unwrap();
        assert!(!t.ctx.use_mask);
        let batch = t.sample_batch();
        let b = t.stage1_value(&batch, &[]).unwrap();
        assert_eq!((b.fib, b.gib), (0.0, 0.0));
        assert_eq!(b.total_stage1, b.rec + b.reg);
        let mask = t.params.mask_index();
        let before = t.params.clone();
        t.stage1_step(&batch, &[]).unwrap();
        // Only weight decay moves the unused mask tensors.
        for i in mask..mask + 4 {
            let (a, b) = (t.params.value(i), before.value(i));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(x.abs() <= y.abs());
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_restores_best() {
        let d = toy_dataset();
        let run = || {
            let mut t = Trainer::new(&d, &toy_config()).unwrap();
            let mut seen = Vec::new();
            let report = t
                .run(|r| {
                    seen.push(r.epoch);
                    Ok(())
                })
                .unwrap();
            assert_eq!(seen, (1..=report.epochs.len()).collect::<Vec<_>>());
            (report, t.params.clone())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs.len(), 3);
        assert_eq!(r1.stop_reason, StopReason::MaxEpochs);
        let best = r1.epochs[r1.best_epoch - 1].val_recall_20.unwrap();
        assert_eq!(Some(best), r1.best_val_recall_20);
    }

    #[test]
    fn per_epoch_schedule_and_graph_refresh_run() {
        let d = toy_dataset();
        let mut c = toy_config();
        c.stage2_schedule = Stage2Schedule::PerEpoch;
        c.graph_refresh = GraphRefresh::PerEpoch;
        let mut t = Trainer::new(&d, &c).unwrap();
        let before = t.ctx.item_graph.clone().unwrap();
        let losses = t.run_epoch().unwrap();
        assert!(losses.stage2 > 0.0);
        let after = t.ctx.item_graph.as_ref().unwrap();
        assert_ne!(before.modality_values, after.modality_values);
    }

    #[test]
    fn backbones_train_without_error() {
        let d = toy_dataset();
        for b in Backbone::ALL {
            let mut c = toy_config();
            c.backbone = b;
            c.max_epochs = 1;
            let mut t = Trainer::new(&d, &c).unwrap();
            t.run(|_| Ok(())).unwrap();
        }
    }
}
