//! Batching, SGD training, checkpoint selection, gradient checking and
//! evaluation runs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{split_validation, Corpus, Split};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::losses::{loss_and_grad, BatchScores, LossKind, TemperaturePlan};
use crate::metrics::{ndcg_at_k, RankingEval, REPORT_CUTOFFS};
use crate::model::{backward, forward, forward_tape, ModelParams, ModelShape, RefinementTrace};
use crate::retrieval::{retrieve_all, EmbeddingIndex, ReferenceSet, RetrievalParams};

/// An embedding index plus the cached reference sets of every paper.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    index: EmbeddingIndex,
    references: Vec<ReferenceSet>,
    reference_rows: Vec<Vec<usize>>,
    truth: Vec<f64>,
}

impl ScoringContext {
    pub fn build(
        corpus: &Corpus,
        embeddings: &EmbeddingMatrix,
        retrieval: &RetrievalParams,
        exec: Execution,
    ) -> Result<Self> {
        let index = EmbeddingIndex::build(corpus, embeddings)?;
        let references = retrieve_all(&index, retrieval, exec);
        let reference_rows = references
            .iter()
            .map(|set| {
                set.references
                    .iter()
                    .map(|r| index.position(&r.id).expect("reference comes from the index"))
                    .collect()
            })
            .collect();
        Ok(ScoringContext {
            index,
            references,
            reference_rows,
            truth: corpus.scores(),
        })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn references(&self, paper: usize) -> &ReferenceSet {
        &self.references[paper]
    }

    pub fn truth(&self, paper: usize) -> f64 {
        self.truth[paper]
    }

    fn inputs(&self, paper: usize) -> (&[f64], Vec<&[f64]>) {
        let refs = self.reference_rows[paper]
            .iter()
            .map(|&r| self.index.vector(r))
            .collect();
        (self.index.vector(paper), refs)
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.shape().input_dim != self.index.dim() {
            return Err(Error::DimMismatch {
                expected: params.shape().input_dim,
                got: self.index.dim(),
            });
        }
        Ok(())
    }

    pub fn trace(&self, params: &ModelParams, paper: usize) -> Result<RefinementTrace> {
        let (target, refs) = self.inputs(paper);
        forward(params, target, &refs)
    }

    pub fn traces(&self, params: &ModelParams, papers: &[usize], exec: Execution) -> Result<Vec<RefinementTrace>> {
        self.check_params(params)?;
        exec::try_map_indexed(exec, papers.len(), |i| self.trace(params, papers[i]))
    }

    /// Final-step scores of `papers`.
    pub fn predict(&self, params: &ModelParams, papers: &[usize], exec: Execution) -> Result<Vec<f64>> {
        Ok(self
            .traces(params, papers, exec)?
            .into_iter()
            .map(|t| *t.scores.last().expect("non-empty trace"))
            .collect())
    }

    /// Loss of one batch and, if asked, its parameter gradient.
    fn batch_loss(
        &self,
        params: &ModelParams,
        batch: &[usize],
        config: &TrainConfig,
        plan: &TemperaturePlan,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let m = params.shape().steps;
        let exec = if config.reproducible {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        let tapes = exec::try_map_indexed(exec, batch.len(), |i| {
            let (target, refs) = self.inputs(batch[i]);
            forward_tape(params, target, &refs)
        })?;
        let predicted = (1..=m)
            .map(|j| tapes.iter().map(|t| t.trace.scores[j]).collect())
            .collect();
        let truth = batch.iter().map(|&i| self.truth[i]).collect();
        let scores = BatchScores::new(predicted, truth)?;
        let out = loss_and_grad(config.loss, &scores, plan, config.raw_listmle)?;
        if !with_grad {
            return Ok((out.value, None));
        }
        let dscores = |i: usize| -> Vec<f64> {
            std::iter::once(0.0)
                .chain((0..m).map(|j| out.grad[j][i]))
                .collect()
        };
        let grad = accumulate(exec, params, tapes.len(), |i, buf| {
            backward(params, &tapes[i], &dscores(i), buf)
        });
        Ok((out.value, Some(grad)))
    }
}

/// Sums per-paper gradients. Sequential mode adds them in batch order.
fn accumulate<F>(exec: Execution, params: &ModelParams, n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n)
            .into_par_iter()
            .fold(
                || vec![0.0; params.len()],
                |mut buf, i| {
                    f(i, &mut buf);
                    buf
                },
            )
            .reduce(
                || vec![0.0; params.len()],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                },
            );
    }
    let _ = exec;
    let mut buf = vec![0.0; params.len()];
    for i in 0..n {
        f(i, &mut buf);
    }
    buf
}

/// Shuffles `papers` with a stream keyed by `(seed, epoch)` and cuts batches
/// of at most `batch_size`. A trailing batch too small for `loss` is dropped.
pub fn make_batches(
    papers: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    loss: LossKind,
) -> Result<Vec<Vec<usize>>> {
    if papers.is_empty() {
        return Err(Error::InvalidArgument("no papers to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order = papers.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let min = if loss.is_ranking() { 2 } else { 1 };
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= min)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<RankingEval>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_ndcg@10,val_spearman,wall_seconds";

    pub fn csv_row(&self) -> String {
        let (ndcg, spearman) = match &self.validation {
            Some(v) => (
                v.ndcg.get(&10).map(|x| x.to_string()).unwrap_or_default(),
                v.spearman.map(|x| x.to_string()).unwrap_or_else(|| "degenerate".into()),
            ),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, ndcg, spearman, self.wall_seconds
        )
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Best epoch-end snapshot by the selection metric.
    pub best: Checkpoint,
    /// Every epoch-end snapshot, in order.
    pub snapshots: Vec<Checkpoint>,
    pub log: Vec<EpochLog>,
}

impl TrainRun {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(EpochLog::CSV_HEADER);
        s.push('\n');
        for row in &self.log {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

pub struct Trainer<'a> {
    corpus: &'a Corpus,
    context: ScoringContext,
    config: TrainConfig,
    train: Vec<usize>,
    validation: Vec<usize>,
    exec: Execution,
}

impl<'a> Trainer<'a> {
    /// Prepares retrieval and splits. When the corpus carries no validation
    /// records, `validation_fraction` of the train records is held out.
    pub fn new(corpus: &'a Corpus, embeddings: &EmbeddingMatrix, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let context = ScoringContext::build(corpus, embeddings, &config.retrieval(), Execution::Parallel)?;
        let (train, validation) = if corpus.count_in(Split::Validation) > 0 {
            (corpus.indices_in(Split::Train), corpus.indices_in(Split::Validation))
        } else {
            let split = split_validation(corpus, config.validation_fraction, config.seed)?;
            (split.indices_in(Split::Train), split.indices_in(Split::Validation))
        };
        if train.is_empty() {
            return Err(Error::InvalidArgument("no training records".into()));
        }
        Ok(Trainer {
            corpus,
            context,
            config: config.clone(),
            train,
            validation,
            exec: Execution::Parallel,
        })
    }

    /// Execution mode for evaluation passes.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn context(&self) -> &ScoringContext {
        &self.context
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.validation
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.context.index.dim(),
            hidden_dim: self.config.hidden_dim,
            steps: self.config.m,
            scorer_layers: self.config.scorer_layers,
        }
    }

    pub fn initial_params(&self) -> Result<ModelParams> {
        ModelParams::init(self.shape(), self.config.seed)
    }

    pub fn run(&self) -> Result<TrainRun> {
        self.run_from(self.initial_params()?)
    }

    pub fn run_from(&self, mut params: ModelParams) -> Result<TrainRun> {
        if *params.shape() != self.shape() {
            return Err(Error::Config("initial parameters do not match the config".into()));
        }
        let cfg = &self.config;
        let plan = cfg.plan()?;
        let mut velocity = vec![0.0; params.len()];
        let mut snapshots: Vec<Checkpoint> = Vec::with_capacity(cfg.epochs);
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize)> = None;

        for epoch in 1..=cfg.epochs {
            let started = Instant::now();
            let batches = make_batches(&self.train, cfg.batch, cfg.seed, epoch, cfg.loss)?;
            let mut total = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let diverged = |loss: f64| Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                };
                let (loss, grad) = match self.context.batch_loss(&params, batch, cfg, &plan, true) {
                    Ok(out) => out,
                    Err(e) if e.is_numeric() => return Err(diverged(f64::NAN)),
                    Err(e) => return Err(e),
                };
                let mut grad = grad.expect("gradient requested");
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(diverged(loss));
                }
                if let Some(limit) = cfg.clip {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > limit {
                        grad.iter_mut().for_each(|g| *g *= limit / norm);
                    }
                }
                for ((p, v), g) in params.as_mut_slice().iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.lr * *v;
                }
                if params.as_slice().iter().any(|p| !p.is_finite()) {
                    return Err(diverged(loss));
                }
                total += loss;
            }
            let mut snapshot = params.clone();
            snapshot.quantize_f32();
            let validation = if self.validation.len() >= 2 {
                Some(self.evaluate_params(&snapshot, &self.validation)?)
            } else {
                None
            };
            let score = match &validation {
                Some(v) => v.metric(&cfg.selection_metric)?,
                None => f64::NEG_INFINITY,
            };
            // strict improvement keeps the earliest of equally good epochs
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, snapshots.len()));
            }
            log.push(EpochLog {
                epoch,
                train_loss: total / batches.len().max(1) as f64,
                validation: validation.clone(),
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            snapshots.push(Checkpoint::new(snapshot, epoch, validation, cfg));
        }
        let (_, at) = best.expect("at least one epoch");
        Ok(TrainRun {
            best: snapshots[at].clone(),
            snapshots,
            log,
        })
    }

    fn evaluate_params(&self, params: &ModelParams, papers: &[usize]) -> Result<RankingEval> {
        let predicted = self.context.predict(params, papers, self.exec)?;
        let truth: Vec<f64> = papers.iter().map(|&i| self.context.truth(i)).collect();
        RankingEval::compute(&predicted, &truth, &REPORT_CUTOFFS)
    }
}

/// Trains with the configured defaults and returns the selected checkpoint.
pub fn train(corpus: &Corpus, embeddings: &EmbeddingMatrix, config: &TrainConfig) -> Result<Checkpoint> {
    Ok(Trainer::new(corpus, embeddings, config)?.run()?.best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Denominator floor for relative gradient errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Coordinates checked exhaustively up to this many parameters.
const GRAD_CHECK_EXHAUSTIVE: usize = 2000;

/// Compares analytic batch-loss gradients with central finite differences.
///
/// Every coordinate is checked for small models; larger ones are sampled
/// with an even stride over [`GRAD_CHECK_EXHAUSTIVE`] coordinates.
pub fn check_gradients(
    params: &ModelParams,
    context: &ScoringContext,
    batch: &[usize],
    config: &TrainConfig,
    epsilon: f64,
) -> Result<GradCheck> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    context.check_params(params)?;
    let plan = TemperaturePlan::new(config.tau_min, config.tau_max, params.shape().steps)?;
    let (_, grad) = context.batch_loss(params, batch, config, &plan, true)?;
    let grad = grad.expect("gradient requested");
    let n = params.len();
    let coords: Vec<usize> = if n <= GRAD_CHECK_EXHAUSTIVE {
        (0..n).collect()
    } else {
        (0..GRAD_CHECK_EXHAUSTIVE).map(|i| i * n / GRAD_CHECK_EXHAUSTIVE).collect()
    };
    let loss_at = |i: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.as_mut_slice()[i] += delta;
        Ok(context.batch_loss(&p, batch, config, &plan, false)?.0)
    };
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let fd = (loss_at(i, epsilon)? - loss_at(i, -epsilon)?) / (2.0 * epsilon);
        if !fd.is_finite() {
            return Err(Error::NonFinite("finite-difference loss".into()));
        }
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates: coords.len(),
    })
}

/// Final-step metrics of `checkpoint` over `papers`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    context: &ScoringContext,
    papers: &[usize],
    exec: Execution,
) -> Result<RankingEval> {
    if papers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "evaluation needs at least two papers, got {}",
            papers.len()
        )));
    }
    let predicted = context.predict(&checkpoint.params, papers, exec)?;
    let truth: Vec<f64> = papers.iter().map(|&i| context.truth(i)).collect();
    RankingEval::compute(&predicted, &truth, &REPORT_CUTOFFS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub ndcg: f64,
}

/// NDCG@10 (or @n for smaller splits) of every step's score, step 0 included.
pub fn step_diagnostic(
    params: &ModelParams,
    context: &ScoringContext,
    papers: &[usize],
    exec: Execution,
) -> Result<Vec<StepRow>> {
    if papers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diagnostic needs at least two papers, got {}",
            papers.len()
        )));
    }
    let traces = context.traces(params, papers, exec)?;
    let truth: Vec<f64> = papers.iter().map(|&i| context.truth(i)).collect();
    let k = 10.min(papers.len());
    (0..=params.shape().steps)
        .map(|j| {
            let scores: Vec<f64> = traces.iter().map(|t| t.scores[j]).collect();
            Ok(StepRow {
                step: j,
                ndcg: ndcg_at_k(&scores, &truth, k)?,
            })
        })
        .collect()
}

pub fn step_diagnostic_csv(rows: &[StepRow]) -> String {
    let mut s = String::from("step,ndcg@10\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.step, r.ndcg));
    }
    s
}
