//! Joint optimization: per-batch threshold solves, sharpness-aware
//! perturbation and the SGD update, plus evaluation-time scoring and
//! loss-landscape probes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{subgroup_stats, Dataset, PairBatch, PairSampler};
use crate::error::{Error, Result};
use crate::losses::{self, FairnessSolution, LossConfig, MarginTable};
use crate::metrics::Predictions;
use crate::model::{HeadId, Model, ModelConfig};
use crate::numerics::{sgd_step, GradientMap, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainMode {
    /// Disentanglement, fairness loss and sharpness-aware updates.
    #[default]
    Full,
    /// Plain CE on the domain-agnostic head with SGD.
    Baseline,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Baseline => "baseline",
        }
    }

    /// Head whose real/fake probability is reported at test time.
    pub fn scoring_head(self) -> HeadId {
        match self {
            TrainMode::Full => HeadId::Fused,
            TrainMode::Baseline => HeadId::Agnostic,
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Shape of the ascent step `ε*`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Perturbation {
    /// `γ·sign(∇L)`.
    #[default]
    Sign,
    /// `γ·∇L/‖∇L‖₂`.
    L2,
}

impl Perturbation {
    pub fn name(self) -> &'static str {
        match self {
            Perturbation::Sign => "sign",
            Perturbation::L2 => "l2",
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(Perturbation::Sign),
            "l2" => Ok(Perturbation::L2),
            other => Err(Error::invalid(format!("unknown perturbation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Images per batch; each batch holds `batch_size / 2` real/fake pairs.
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops early once this many steps have run in total.
    pub max_iterations: Option<u64>,
    pub seed: u64,
    pub mode: TrainMode,
    pub perturbation: Perturbation,
    /// Checkpoint callback cadence in iterations.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            batch_size: 16,
            epochs: 100,
            max_iterations: None,
            seed: 0,
            mode: TrainMode::Full,
            perturbation: Perturbation::Sign,
            checkpoint_every: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for r in [self.loss.validate(), self.model.validate()] {
            match r {
                Ok(()) => {}
                Err(Error::InvalidConfig(fields)) => bad.extend(fields),
                Err(e) => bad.push(format!("{e}")),
            }
        }
        if self.batch_size < 2 {
            bad.push(String::from("batch_size: must be >= 2"));
        }
        if self.checkpoint_every == Some(0) {
            bad.push(String::from("checkpoint_every: must be >= 1"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Total number of steps the run will take on `dataset`.
    pub fn total_iterations(&self, batches_per_epoch: usize) -> u64 {
        let full = self.epochs * batches_per_epoch as u64;
        self.max_iterations.map_or(full, |m| m.min(full))
    }
}

/// One row of the training log. Loss values are taken at `θ` before the
/// update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub epoch: u64,
    pub l_dis: f64,
    pub l_fair: f64,
    /// `L_dis + λ·L_fair`.
    pub total: f64,
    pub eta: Option<f64>,
    pub eta_j: Vec<Option<f64>>,
    /// `‖∇θL‖∞` of the gradient applied in the update.
    pub grad_inf_norm: f64,
    /// `ε*ᵀ∇θL(θ)`.
    pub ascent: f64,
    /// Seconds since the run started, from the injected [`Clock`].
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<StepLog>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&StepLog> {
        self.rows.last()
    }
}

/// Source of elapsed time, so that the core stays free of OS clocks.
pub trait Clock {
    fn elapsed(&mut self) -> f64;
}

/// Reports zero elapsed time.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed(&mut self) -> f64 {
        0.0
    }
}

/// `ε* = γ·sign(g)` with `sign(0) = 0`.
pub fn sam_perturbation(grads: &GradientMap, gamma: f64) -> GradientMap {
    let mut eps = grads.clone();
    for i in 0..eps.len() {
        for v in eps.value_at_mut(i).data_mut() {
            *v = if *v > 0.0 {
                gamma
            } else if *v < 0.0 {
                -gamma
            } else {
                0.0
            };
        }
    }
    eps
}

/// `ε* = γ·g/‖g‖₂`, zero for a zero gradient.
pub fn l2_perturbation(grads: &GradientMap, gamma: f64) -> GradientMap {
    let norm = libm::sqrt(
        grads
            .values()
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum(),
    );
    let mut eps = grads.clone();
    let c = if norm > 0.0 { gamma / norm } else { 0.0 };
    for i in 0..eps.len() {
        eps.value_at_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= c);
    }
    eps
}

/// Everything a step needs besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub model: &'a Model,
    pub dataset: &'a Dataset,
    pub margins: &'a MarginTable,
    pub config: &'a TrainRunConfig,
}

struct BuiltObjective {
    total: Var,
    l_dis: Var,
    l_fair: Option<Var>,
    solution: Option<FairnessSolution>,
}

impl StepContext<'_> {
    /// Builds `L = L_dis + λ·L_fair` on `tape`. Without `fixed` the
    /// thresholds are solved from the per-sample fused-head losses recorded
    /// on the same tape; with `fixed` they are reused as constants.
    fn build(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &PairBatch,
        fixed: Option<&FairnessSolution>,
    ) -> Result<BuiltObjective> {
        let (model, cfg) = (self.model, &self.config.loss);
        let enc = losses::encode_batch(tape, model, store, self.dataset, batch)?;
        if self.config.mode == TrainMode::Baseline {
            let mut terms = Vec::with_capacity(enc.members.len());
            for m in &enc.members {
                let img = enc.images[m.slot];
                let z = model.head(tape, store, HeadId::Agnostic, img.features.f_g)?;
                terms.push(tape.cross_entropy(z, self.dataset.sample(img.index).y as usize)?);
            }
            let l = tape.mean_n(&terms)?;
            return Ok(BuiltObjective {
                total: l,
                l_dis: l,
                l_fair: None,
                solution: None,
            });
        }
        let l_dis =
            losses::disentanglement(tape, model, store, self.dataset, &enc, self.margins, cfg)?;
        let k = self.dataset.subgroups().len();
        let mut nodes: Vec<Vec<Var>> = vec![Vec::new(); k];
        for img in &enc.images {
            let s = self.dataset.sample(img.index);
            let fused = model.fuse(tape, img.features.f_g, img.features.d)?;
            let z = model.head(tape, store, HeadId::Fused, fused)?;
            nodes[s.d].push(tape.cross_entropy(z, s.y as usize)?);
        }
        let solution = match fixed {
            Some(s) => s.clone(),
            None => {
                let values: Vec<Vec<f64>> = nodes
                    .iter()
                    .map(|g| g.iter().map(|&v| tape.scalar(v)).collect())
                    .collect();
                losses::fairness_loss(&values, cfg.alpha, cfg.alpha_prime)?
            }
        };
        let l_fair = losses::fairness_term(tape, &nodes, &solution, cfg.alpha, cfg.alpha_prime)?;
        let total = if cfg.lambda != 0.0 {
            let w = tape.scale(l_fair, cfg.lambda)?;
            tape.add(l_dis, w)?
        } else {
            l_dis
        };
        Ok(BuiltObjective {
            total,
            l_dis,
            l_fair: Some(l_fair),
            solution: Some(solution),
        })
    }

    /// `L` and `∇θL` at `store`, with thresholds solved or held fixed.
    pub fn objective(
        &self,
        store: &ParameterStore,
        batch: &PairBatch,
        fixed: Option<&FairnessSolution>,
    ) -> Result<(f64, GradientMap, Option<FairnessSolution>)> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, store, batch, fixed)?;
        let grads = tape.backward(built.total)?;
        Ok((
            tape.scalar(built.total),
            tape.param_gradients(&grads, store),
            built.solution,
        ))
    }

    /// One update of `store` on `batch`:
    /// solve `η_j`, `η` at `θ`; take `∇θL(θ)` with them fixed; form `ε*`;
    /// re-evaluate the gradient at `θ + ε*`; step `θ ← θ − β·∇θL(θ+ε*)`.
    /// Baseline mode skips the thresholds and the perturbation.
    pub fn training_step(
        &self,
        store: &mut ParameterStore,
        batch: &PairBatch,
        iteration: u64,
    ) -> Result<StepLog> {
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iteration },
            other => other,
        };
        let cfg = &self.config.loss;
        let mut tape = Tape::new();
        let built = self
            .build(&mut tape, store, batch, None)
            .map_err(diverged)?;
        let grads = tape.backward(built.total).map_err(diverged)?;
        let grads = tape.param_gradients(&grads, store);
        let (l_dis, total) = (tape.scalar(built.l_dis), tape.scalar(built.total));
        let l_fair = built.l_fair.map_or(0.0, |v| tape.scalar(v));
        drop(tape);

        let (applied, ascent) = match (&built.solution, self.config.mode) {
            (Some(solution), TrainMode::Full) => {
                let eps = match self.config.perturbation {
                    Perturbation::Sign => sam_perturbation(&grads, cfg.gamma),
                    Perturbation::L2 => l2_perturbation(&grads, cfg.gamma),
                };
                let ascent = eps.dot(&grads)?;
                let mut shifted = store.clone();
                shifted.axpy(1.0, &eps)?;
                let (_, g, _) = self
                    .objective(&shifted, batch, Some(solution))
                    .map_err(diverged)?;
                (g, ascent)
            }
            _ => (grads, 0.0),
        };
        sgd_step(store, &applied, cfg.lr).map_err(diverged)?;
        if !total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let (eta, eta_j) = match &built.solution {
            Some(s) => (
                Some(s.eta),
                s.subgroups.iter().map(|g| g.map(|g| g.eta)).collect(),
            ),
            None => (None, Vec::new()),
        };
        Ok(StepLog {
            iteration,
            epoch: 0,
            l_dis,
            l_fair,
            total,
            eta,
            eta_j,
            grad_inf_norm: applied.abs_max(),
            ascent,
            wall_time: 0.0,
        })
    }
}

/// Position of a run: the next batch to train on. Together with the run
/// seed this fixes all remaining randomness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainerState {
    pub epoch: u64,
    pub batch: usize,
    pub iteration: u64,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    model: Model,
    config: TrainRunConfig,
    margins: MarginTable,
    sampler: PairSampler,
    params: ParameterStore,
    state: TrainerState,
    history: TrainingHistory,
    batches: Option<(u64, Vec<PairBatch>)>,
}

impl<'a> Trainer<'a> {
    /// Fresh run from the seeded initialization.
    pub fn new(dataset: &'a Dataset, config: TrainRunConfig) -> Result<Self> {
        let model = Model::new(config.model.clone())?;
        let params = model.init(config.seed);
        Self::resume(dataset, config, params, TrainerState::default())
    }

    /// Continues a run from saved parameters and position.
    pub fn resume(
        dataset: &'a Dataset,
        config: TrainRunConfig,
        params: ParameterStore,
        state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        model.check_params(&params)?;
        if dataset.image() != config.model.image {
            return Err(Error::shape(
                "dataset",
                &config.model.image.dims(),
                &dataset.image().dims(),
            ));
        }
        if dataset.subgroups().len() != config.model.num_subgroups
            || dataset.domains().len() != config.model.num_domains
        {
            return Err(Error::invalid(format!(
                "model expects {} subgroups and {} domains, dataset has {} and {}",
                config.model.num_subgroups,
                config.model.num_domains,
                dataset.subgroups().len(),
                dataset.domains().len()
            )));
        }
        let margins = losses::compute_margins(&subgroup_stats(dataset), config.loss.delta)?;
        let sampler = PairSampler::new(dataset, config.batch_size, config.seed)?;
        Ok(Self {
            dataset,
            model,
            config,
            margins,
            sampler,
            params,
            state,
            history: TrainingHistory::default(),
            batches: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainRunConfig {
        &self.config
    }

    pub fn margins(&self) -> &MarginTable {
        &self.margins
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn state(&self) -> TrainerState {
        self.state
    }

    /// Rows logged by this trainer instance (a resumed run starts empty).
    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn into_parts(self) -> (ParameterStore, TrainingHistory, TrainerState) {
        (self.params, self.history, self.state)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.total_iterations(self.batches_per_epoch())
    }

    /// Runs one step; `None` once the run is complete.
    pub fn step(&mut self, clock: &mut dyn Clock) -> Result<Option<&StepLog>> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        if self.batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.batches = Some((epoch, self.sampler.epoch(epoch)));
        }
        let (_, batches) = self.batches.as_ref().expect("filled above");
        let ctx = StepContext {
            model: &self.model,
            dataset: self.dataset,
            margins: &self.margins,
            config: &self.config,
        };
        let mut row = ctx.training_step(
            &mut self.params,
            &batches[self.state.batch],
            self.state.iteration,
        )?;
        row.epoch = epoch;
        row.wall_time = clock.elapsed();
        self.state.iteration += 1;
        self.state.batch += 1;
        if self.state.batch == batches.len() {
            self.state.batch = 0;
            self.state.epoch += 1;
        }
        self.history.rows.push(row);
        Ok(self.history.rows.last())
    }

    /// Runs to completion, calling `on_checkpoint` at the configured cadence
    /// and once at the end.
    pub fn run(
        &mut self,
        clock: &mut dyn Clock,
        mut on_checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while self.step(clock)?.is_some() {
            if let Some(k) = self.config.checkpoint_every {
                if self.state.iteration % k == 0 && !self.is_finished() {
                    on_checkpoint(self)?;
                }
            }
        }
        on_checkpoint(self)
    }
}

pub fn train(
    dataset: &Dataset,
    config: &TrainRunConfig,
) -> Result<(ParameterStore, TrainingHistory)> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    trainer.run(&mut NoClock, |_| Ok(()))?;
    let (params, history, _) = trainer.into_parts();
    Ok((params, history))
}

/// Probability of the fake class from the mode's scoring head.
pub fn score(model: &Model, store: &ParameterStore, x: &Tensor, mode: TrainMode) -> Result<f64> {
    let logits = scoring_logits(model, store, x, mode)?;
    let m = logits[0].max(logits[1]);
    let (e0, e1) = (libm::exp(logits[0] - m), libm::exp(logits[1] - m));
    Ok(e1 / (e0 + e1))
}

fn scoring_logits(
    model: &Model,
    store: &ParameterStore,
    x: &Tensor,
    mode: TrainMode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let z = scoring_graph(&mut tape, model, store, x, mode)?;
    Ok(tape.value(z).data().to_vec())
}

fn scoring_graph(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    x: &Tensor,
    mode: TrainMode,
) -> Result<Var> {
    let xv = tape.constant(x.clone())?;
    let f = model.encode(tape, store, xv)?;
    let feature = match mode {
        TrainMode::Full => model.fuse(tape, f.f_g, f.d)?,
        TrainMode::Baseline => f.f_g,
    };
    model.head(tape, store, mode.scoring_head(), feature)
}

/// Scores every sample of `dataset` and binarizes at `threshold`.
pub fn predict(
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    mode: TrainMode,
    threshold: f64,
) -> Result<Predictions> {
    let mut scores = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        scores.push(score(model, store, &s.x, mode)?);
    }
    let labels: Vec<u8> = dataset.samples().iter().map(|s| s.y).collect();
    let groups: Vec<usize> = dataset.samples().iter().map(|s| s.d).collect();
    Predictions::from_scores(&scores, &labels, &groups, threshold)
}

/// Mean real/fake CE of the scoring head over `indices`.
pub fn eval_loss(
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    indices: &[usize],
    mode: TrainMode,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut total = 0.0;
    for &i in indices {
        let s = dataset.sample(i);
        let logits = scoring_logits(model, store, &s.x, mode)?;
        total += losses::cross_entropy(&logits, s.y as usize)?;
    }
    Ok(total / indices.len() as f64)
}

/// Gaussian direction rescaled tensor by tensor to the norm of the matching
/// parameter. Zero parameters (fresh biases) get a zero direction.
pub fn filter_normalized_direction(store: &ParameterStore, rng: &mut ChaCha8Rng) -> GradientMap {
    let mut dir = store.zeros_like();
    for i in 0..store.len() {
        let target = store.value_at(i).l2_norm();
        let d = dir.value_at_mut(i);
        for v in d.data_mut() {
            *v = StandardNormal.sample(rng);
        }
        let norm = d.l2_norm();
        let c = if norm > 0.0 { target / norm } else { 0.0 };
        d.data_mut().iter_mut().for_each(|v| *v *= c);
    }
    dir
}

/// Loss values on a square `(u, v)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub extent: f64,
    pub resolution: usize,
    /// Shared by both axes.
    pub coords: Vec<f64>,
    /// `values[i][j]` is the loss at `(coords[i], coords[j])`.
    pub values: Vec<Vec<f64>>,
}

/// Grid coordinates `extent·(2i − (r−1))/(r−1)`, symmetric about 0 exactly.
pub fn grid_coords(extent: f64, resolution: usize) -> Vec<f64> {
    if resolution <= 1 {
        return vec![0.0; resolution];
    }
    let r = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| extent * (2 * i as i64 - (resolution as i64 - 1)) as f64 / r)
        .collect()
}

/// `L(θ + u·dir1 + v·dir2)` over the grid, with `L` the scoring-head CE on
/// `indices`.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape_slice(
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    indices: &[usize],
    mode: TrainMode,
    dir1: &GradientMap,
    dir2: &GradientMap,
    extent: f64,
    resolution: usize,
) -> Result<LandscapeGrid> {
    if resolution == 0 {
        return Err(Error::invalid("landscape resolution must be >= 1"));
    }
    if !(extent.is_finite() && extent >= 0.0) {
        return Err(Error::invalid("landscape extent must be finite and >= 0"));
    }
    store.check_same_layout(dir1)?;
    store.check_same_layout(dir2)?;
    let coords = grid_coords(extent, resolution);
    let mut values = Vec::with_capacity(resolution);
    for &u in &coords {
        let mut row = Vec::with_capacity(resolution);
        for &v in &coords {
            let mut p = store.clone();
            for t in 0..p.len() {
                let (a, b) = (dir1.value_at(t).data(), dir2.value_at(t).data());
                for ((x, da), db) in p.value_at_mut(t).data_mut().iter_mut().zip(a).zip(b) {
                    *x = *x + u * da + v * db;
                }
            }
            row.push(eval_loss(model, &p, dataset, indices, mode)?);
        }
        values.push(row);
    }
    Ok(LandscapeGrid {
        extent,
        resolution,
        coords,
        values,
    })
}

/// Mean of `L(θ + radius·dir) − L(θ)` over `count` seeded filter-normalized
/// directions.
#[allow(clippy::too_many_arguments)]
pub fn sharpness(
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    indices: &[usize],
    mode: TrainMode,
    radius: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::invalid("sharpness needs at least one direction"));
    }
    let base = eval_loss(model, store, dataset, indices, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..count {
        let dir = filter_normalized_direction(store, &mut rng);
        let mut p = store.clone();
        p.axpy(radius, &dir)?;
        total += eval_loss(model, &p, dataset, indices, mode)? - base;
    }
    Ok(total / count as f64)
}
