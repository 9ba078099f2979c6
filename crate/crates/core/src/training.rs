//! Training orchestration for both models.
//!
//! Each step runs two phases on fresh tapes: first the discriminator
//! update (on detached fake encodings/images), then the generator-side
//! update. Every loss routes its gradient to exactly the networks it
//! trains; the translator's two objectives share one backward pass while
//! the reconstruction objective drives only the shared autoencoder.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::checkpoint;
use crate::data::{DataError, UnpairedDataset};
use crate::losses::{
    adversarial_discriminator_loss, adversarial_generator_loss, cyclic_loss, deviation_loss,
    LossWeights,
};
use crate::networks::{
    count_flops_with, decode, discriminate, encode, generate, translate, ArchSpec, BaselineModel,
    BoundNet, ModelKind, NetworkError, NetworkParams, Phase, ProposedModel,
};
use crate::rng::Rng;
use crate::tensor::{AdamHyper, EngineError, Tape, Tensor};

#[derive(Debug)]
pub enum TrainError {
    /// A loss term came out NaN/Inf; the step is aborted.
    NonFiniteLoss {
        term: &'static str,
        step: usize,
    },
    /// The gradient-scope audit found a mismatch.
    ScopeAudit {
        detail: String,
    },
    /// Batches of the two domains differ in size.
    BatchMismatch {
        a: Vec<usize>,
        b: Vec<usize>,
    },
    Config(String),
    Network(NetworkError),
    Engine(EngineError),
    Data(DataError),
    Checkpoint(checkpoint::CheckpointError),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFiniteLoss { term, step } => {
                write!(f, "non-finite {term} loss at step {step}; aborting")
            }
            TrainError::ScopeAudit { detail } => write!(f, "gradient scope audit failed: {detail}"),
            TrainError::BatchMismatch { a, b } => {
                write!(f, "domain batches differ: A {a:?} vs B {b:?}")
            }
            TrainError::Config(msg) => write!(f, "config: {msg}"),
            TrainError::Network(e) => write!(f, "{e}"),
            TrainError::Engine(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        TrainError::Network(e)
    }
}
impl From<EngineError> for TrainError {
    fn from(e: EngineError) -> Self {
        TrainError::Engine(e)
    }
}
impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}
impl From<checkpoint::CheckpointError> for TrainError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Everything one run needs, serializable to/from the key=value config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub weights: LossWeights,
    pub optimizer: AdamHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelKind,
    /// Dataset root holding trainA/trainB/testA/testB.
    pub data_root: PathBuf,
    /// Output directory for metrics CSVs and checkpoints.
    pub out_dir: PathBuf,
    /// Also write a checkpoint every k epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Run the gradient-scope audit every n steps (0 = never).
    pub scope_audit_every: usize,
    /// Diagnostic: drop the adversarial terms (no discriminator update, no
    /// generator adversarial pressure) to isolate the reconstruction
    /// objectives.
    pub detach_adversarial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::default(),
            weights: LossWeights::default(),
            optimizer: AdamHyper::default(),
            epochs: 1,
            batch_size: 1,
            seed: 1,
            model: ModelKind::Proposed,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint_every: 0,
            scope_audit_every: 100,
            detach_adversarial: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// FLOPs one train step costs at this config (per batch).
    pub fn step_flops(&self) -> u64 {
        count_flops_with(
            &self.arch,
            self.model,
            Phase::TrainStep,
            self.weights.use_dev_term_b,
        ) * self.batch_size as u64
    }
}

/// Per-step losses and cost accounting.
///
/// Reported values are the loss definitions themselves: `loss_cyclic` is
/// the unweighted sum of the A and B reconstruction terms, the deviation
/// fields carry their lambda weights, and the adversarial fields are the
/// raw objective values. `wall_time_ms` is measured, not deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step_index: usize,
    pub loss_cyclic: f64,
    pub loss_dev_a: f64,
    pub loss_dev_b: f64,
    pub loss_adv_gen: f64,
    pub loss_adv_disc: f64,
    pub wall_time_ms: f64,
    pub flops: u64,
}

impl StepReport {
    /// Equality over the deterministic fields (wall time excluded).
    pub fn same_losses(&self, other: &StepReport) -> bool {
        self.step_index == other.step_index
            && self.loss_cyclic.to_bits() == other.loss_cyclic.to_bits()
            && self.loss_dev_a.to_bits() == other.loss_dev_a.to_bits()
            && self.loss_dev_b.to_bits() == other.loss_dev_b.to_bits()
            && self.loss_adv_gen.to_bits() == other.loss_adv_gen.to_bits()
            && self.loss_adv_disc.to_bits() == other.loss_adv_disc.to_bits()
            && self.flops == other.flops
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub seconds: f64,
    pub mean_cyclic: f64,
    pub mean_dev_a: f64,
    pub mean_dev_b: f64,
    pub mean_adv_gen: f64,
    pub mean_adv_disc: f64,
}

/// Either model, as one training target.
#[derive(Debug, Clone)]
pub enum Model {
    Proposed(ProposedModel),
    Baseline(BaselineModel),
}

impl Model {
    pub fn init(arch: &ArchSpec, seed: u64, kind: ModelKind) -> TrainResult<Self> {
        Ok(match kind {
            ModelKind::Proposed => Model::Proposed(ProposedModel::init(arch, seed)?),
            ModelKind::Baseline => Model::Baseline(BaselineModel::init(arch, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Proposed(_) => ModelKind::Proposed,
            Model::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn networks(&self) -> Vec<&NetworkParams> {
        match self {
            Model::Proposed(m) => m.networks().to_vec(),
            Model::Baseline(m) => m.networks().to_vec(),
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut NetworkParams> {
        match self {
            Model::Proposed(m) => m.networks_mut().into_iter().collect(),
            Model::Baseline(m) => m.networks_mut().into_iter().collect(),
        }
    }
}

/// Model plus training progress; the unit of checkpointing.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub epochs_completed: u64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> TrainResult<Self> {
        Ok(TrainState {
            model: Model::init(&cfg.arch, cfg.seed, cfg.model)?,
            epochs_completed: 0,
        })
    }
}

type NamedGrads = BTreeMap<String, Vec<f64>>;

/// Backward from `root`, collecting gradients for exactly the parameters
/// of the listed networks, keyed by parameter name.
fn scoped_grads(tape: &Tape, root: &Tensor, nets: &[&BoundNet]) -> TrainResult<NamedGrads> {
    let mut names = Vec::new();
    let mut ids = Vec::new();
    for net in nets {
        for (name, id) in net.named_nodes() {
            names.push(name);
            ids.push(id);
        }
    }
    let mut grads = tape.backward(root, &ids)?;
    Ok(names
        .into_iter()
        .zip(ids)
        .map(|(name, id)| (name, grads.remove(&id).expect("requested gradient present")))
        .collect())
}

fn apply_adam(net: &mut NetworkParams, grads: &NamedGrads, hp: &AdamHyper) -> TrainResult<()> {
    for p in &mut net.params {
        let g = grads
            .get(&p.name)
            .unwrap_or_else(|| panic!("missing gradient for {}", p.name));
        p.adam_step(g, hp)?;
    }
    Ok(())
}

fn check_finite(value: f64, term: &'static str, step: usize) -> TrainResult<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { term, step })
    }
}

fn audit_keys(grads: &NamedGrads, nets: &[&NetworkParams], label: &str) -> TrainResult<()> {
    let mut expected: Vec<&String> = nets
        .iter()
        .flat_map(|n| n.params.iter().map(|p| &p.name))
        .collect();
    expected.sort();
    let got: Vec<&String> = grads.keys().collect();
    if expected != got {
        return Err(TrainError::ScopeAudit {
            detail: format!(
                "{label}: expected {} params, got {}",
                expected.len(),
                got.len()
            ),
        });
    }
    Ok(())
}

fn check_batches(batch_a: &Tensor, batch_b: &Tensor) -> TrainResult<usize> {
    if batch_a.shape() != batch_b.shape() {
        return Err(TrainError::BatchMismatch {
            a: batch_a.shape().to_vec(),
            b: batch_b.shape().to_vec(),
        });
    }
    Ok(batch_a.shape()[0])
}

/// One optimization step of the proposed model. `audit` additionally
/// verifies the gradient scopes on this step.
pub fn train_step_proposed(
    model: &mut ProposedModel,
    batch_a: &Tensor,
    batch_b: &Tensor,
    cfg: &TrainConfig,
    step_index: usize,
    audit: bool,
) -> TrainResult<StepReport> {
    let t0 = Instant::now();
    let batch = check_batches(batch_a, batch_b)?;
    let w = &cfg.weights;

    // Phase 1: discriminator. Generator forwards feed it as constants so
    // no gradient can leak toward the generator side.
    let mut loss_adv_disc = 0.0;
    if !cfg.detach_adversarial {
        let (grads, value) = {
            let mut tape = Tape::new();
            let enc_net = BoundNet::bind(&mut tape, &model.encoder);
            let tr_net = BoundNet::bind(&mut tape, &model.translator);
            let disc_net = BoundNet::bind(&mut tape, &model.discriminator);
            let enc_b = encode(&mut tape, &enc_net, batch_b)?;
            let enc_a = encode(&mut tape, &enc_net, batch_a)?;
            let fake = translate(&mut tape, &tr_net, &enc_a)?;
            let real_scores = discriminate(&mut tape, &disc_net, &enc_b.detach())?;
            let fake_scores = discriminate(&mut tape, &disc_net, &fake.detach())?;
            let d_loss = adversarial_discriminator_loss(&mut tape, &real_scores, &fake_scores, w)?;
            let value = check_finite(d_loss.item(), "adversarial_discriminator", step_index)?;
            let grads = scoped_grads(&tape, &d_loss, &[&disc_net])?;
            if audit {
                audit_keys(
                    &grads,
                    &[&model.discriminator],
                    "adversarial_discriminator_loss",
                )?;
            }
            (grads, value)
        };
        apply_adam(&mut model.discriminator, &grads, &cfg.optimizer)?;
        loss_adv_disc = value;
    }

    // Phase 2: generator side. One tape serves the reconstruction
    // objective (encoder + decoder) and the translator objective
    // (deviation + adversarial), each with its own backward scope.
    let (encdec_grads, trans_grads, report_values) = {
        let mut tape = Tape::new();
        let enc_net = BoundNet::bind(&mut tape, &model.encoder);
        let dec_net = BoundNet::bind(&mut tape, &model.decoder);
        let tr_net = BoundNet::bind(&mut tape, &model.translator);
        let disc_net = BoundNet::bind(&mut tape, &model.discriminator);

        let enc_a = encode(&mut tape, &enc_net, batch_a)?;
        let enc_b = encode(&mut tape, &enc_net, batch_b)?;
        let rec_a = decode(&mut tape, &dec_net, &enc_a)?;
        let rec_b = decode(&mut tape, &dec_net, &enc_b)?;
        let cyc_a = cyclic_loss(&mut tape, batch_a, &rec_a, w)?;
        let cyc_b = cyclic_loss(&mut tape, batch_b, &rec_b, w)?;
        let cyc_total = tape.add(&cyc_a, &cyc_b)?;
        let loss_cyclic = check_finite(cyc_total.item(), "cyclic", step_index)?;

        let trans_b = translate(&mut tape, &tr_net, &enc_b)?;
        let trans_cyclic_b = if w.use_dev_term_b {
            decode(&mut tape, &dec_net, &trans_b)?
        } else {
            batch_b.detach()
        };
        let dev = deviation_loss(&mut tape, &enc_b, &trans_b, batch_b, &trans_cyclic_b, w)?;
        check_finite(dev.total.item(), "deviation", step_index)?;

        let (trans_root, loss_adv_gen) = if cfg.detach_adversarial {
            (dev.total.clone(), 0.0)
        } else {
            let trans_a = translate(&mut tape, &tr_net, &enc_a)?;
            let fake_scores = discriminate(&mut tape, &disc_net, &trans_a)?;
            let adv = adversarial_generator_loss(&mut tape, &fake_scores, w)?;
            let value = check_finite(adv.item(), "adversarial_generator", step_index)?;
            (tape.add(&dev.total, &adv)?, value)
        };

        let encdec_root = tape.scale(&cyc_total, w.lambda_cyc)?;
        let encdec_grads = scoped_grads(&tape, &encdec_root, &[&enc_net, &dec_net])?;
        let trans_grads = scoped_grads(&tape, &trans_root, &[&tr_net])?;

        if audit {
            audit_keys(
                &encdec_grads,
                &[&model.encoder, &model.decoder],
                "cyclic_loss",
            )?;
            audit_keys(&trans_grads, &[&model.translator], "translator objective")?;
            // The cyclic path must be structurally disconnected from the
            // translator and discriminator.
            let outside = scoped_grads(&tape, &encdec_root, &[&tr_net, &disc_net])?;
            if outside.values().any(|g| g.iter().any(|&v| v != 0.0)) {
                return Err(TrainError::ScopeAudit {
                    detail: "cyclic loss leaked gradient outside encoder/decoder".into(),
                });
            }
        }
        (
            encdec_grads,
            trans_grads,
            (loss_cyclic, dev.term_a, dev.term_b, loss_adv_gen),
        )
    };

    apply_adam(&mut model.encoder, &encdec_grads, &cfg.optimizer)?;
    apply_adam(&mut model.decoder, &encdec_grads, &cfg.optimizer)?;
    apply_adam(&mut model.translator, &trans_grads, &cfg.optimizer)?;

    let (loss_cyclic, loss_dev_a, loss_dev_b, loss_adv_gen) = report_values;
    Ok(StepReport {
        step_index,
        loss_cyclic,
        loss_dev_a,
        loss_dev_b,
        loss_adv_gen,
        loss_adv_disc,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        flops: count_flops_with(
            &cfg.arch,
            ModelKind::Proposed,
            Phase::TrainStep,
            w.use_dev_term_b,
        ) * batch as u64,
    })
}

/// One optimization step of the CycleGAN-style baseline: two generators,
/// two image discriminators, cycle consistency both ways.
pub fn train_step_baseline(
    model: &mut BaselineModel,
    batch_a: &Tensor,
    batch_b: &Tensor,
    cfg: &TrainConfig,
    step_index: usize,
    audit: bool,
) -> TrainResult<StepReport> {
    let t0 = Instant::now();
    let batch = check_batches(batch_a, batch_b)?;
    let w = &cfg.weights;

    let mut loss_adv_disc = 0.0;
    if !cfg.detach_adversarial {
        let (grads_a, grads_b, value) = {
            let mut tape = Tape::new();
            let gen_ab = BoundNet::bind(&mut tape, &model.gen_a2b);
            let gen_ba = BoundNet::bind(&mut tape, &model.gen_b2a);
            let disc_a = BoundNet::bind(&mut tape, &model.disc_a);
            let disc_b = BoundNet::bind(&mut tape, &model.disc_b);
            let fake_b = generate(&mut tape, &gen_ab, batch_a)?;
            let fake_a = generate(&mut tape, &gen_ba, batch_b)?;
            let real_b_scores = discriminate(&mut tape, &disc_b, batch_b)?;
            let fake_b_scores = discriminate(&mut tape, &disc_b, &fake_b.detach())?;
            let real_a_scores = discriminate(&mut tape, &disc_a, batch_a)?;
            let fake_a_scores = discriminate(&mut tape, &disc_a, &fake_a.detach())?;
            let d_b = adversarial_discriminator_loss(&mut tape, &real_b_scores, &fake_b_scores, w)?;
            let d_a = adversarial_discriminator_loss(&mut tape, &real_a_scores, &fake_a_scores, w)?;
            let value = check_finite(
                d_a.item() + d_b.item(),
                "adversarial_discriminator",
                step_index,
            )?;
            let grads_b = scoped_grads(&tape, &d_b, &[&disc_b])?;
            let grads_a = scoped_grads(&tape, &d_a, &[&disc_a])?;
            if audit {
                audit_keys(&grads_b, &[&model.disc_b], "baseline disc B loss")?;
                audit_keys(&grads_a, &[&model.disc_a], "baseline disc A loss")?;
            }
            (grads_a, grads_b, value)
        };
        apply_adam(&mut model.disc_b, &grads_b, &cfg.optimizer)?;
        apply_adam(&mut model.disc_a, &grads_a, &cfg.optimizer)?;
        loss_adv_disc = value;
    }

    let (gen_grads, loss_cyclic, loss_adv_gen) = {
        let mut tape = Tape::new();
        let gen_ab = BoundNet::bind(&mut tape, &model.gen_a2b);
        let gen_ba = BoundNet::bind(&mut tape, &model.gen_b2a);
        let disc_a = BoundNet::bind(&mut tape, &model.disc_a);
        let disc_b = BoundNet::bind(&mut tape, &model.disc_b);

        let fake_b = generate(&mut tape, &gen_ab, batch_a)?;
        let cyc_a = generate(&mut tape, &gen_ba, &fake_b)?;
        let fake_a = generate(&mut tape, &gen_ba, batch_b)?;
        let cyc_b = generate(&mut tape, &gen_ab, &fake_a)?;

        let cyc_loss_a = cyclic_loss(&mut tape, batch_a, &cyc_a, w)?;
        let cyc_loss_b = cyclic_loss(&mut tape, batch_b, &cyc_b, w)?;
        let cyc_total = tape.add(&cyc_loss_a, &cyc_loss_b)?;
        let loss_cyclic = check_finite(cyc_total.item(), "cycle_consistency", step_index)?;
        let weighted_cyc = tape.scale(&cyc_total, w.lambda_cyc)?;

        let (root, loss_adv_gen) = if cfg.detach_adversarial {
            (weighted_cyc, 0.0)
        } else {
            let fake_b_scores = discriminate(&mut tape, &disc_b, &fake_b)?;
            let fake_a_scores = discriminate(&mut tape, &disc_a, &fake_a)?;
            let adv_b = adversarial_generator_loss(&mut tape, &fake_b_scores, w)?;
            let adv_a = adversarial_generator_loss(&mut tape, &fake_a_scores, w)?;
            let adv = tape.add(&adv_a, &adv_b)?;
            let value = check_finite(adv.item(), "adversarial_generator", step_index)?;
            (tape.add(&weighted_cyc, &adv)?, value)
        };

        let grads = scoped_grads(&tape, &root, &[&gen_ab, &gen_ba])?;
        if audit {
            audit_keys(
                &grads,
                &[&model.gen_a2b, &model.gen_b2a],
                "baseline generator objective",
            )?;
        }
        (grads, loss_cyclic, loss_adv_gen)
    };

    apply_adam(&mut model.gen_a2b, &gen_grads, &cfg.optimizer)?;
    apply_adam(&mut model.gen_b2a, &gen_grads, &cfg.optimizer)?;

    Ok(StepReport {
        step_index,
        loss_cyclic,
        loss_dev_a: 0.0,
        loss_dev_b: 0.0,
        loss_adv_gen,
        loss_adv_disc,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        flops: count_flops_with(
            &cfg.arch,
            ModelKind::Baseline,
            Phase::TrainStep,
            w.use_dev_term_b,
        ) * batch as u64,
    })
}

/// Seed for epoch `e` of run `seed`: a pure function, so a resumed run
/// shuffles exactly like an uninterrupted one.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    Rng::new(seed).derive(0xE70C).derive(epoch).next_u64()
}

/// Incremental trainer: owns the state, steps one epoch at a time.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    dataset: &'a UnpairedDataset,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, dataset: &'a UnpairedDataset) -> TrainResult<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            dataset,
            state: TrainState::fresh(cfg)?,
        })
    }

    pub fn from_state(
        cfg: &'a TrainConfig,
        dataset: &'a UnpairedDataset,
        state: TrainState,
    ) -> TrainResult<Self> {
        cfg.validate()?;
        if state.model.kind() != cfg.model {
            return Err(TrainError::Config(format!(
                "checkpoint holds a {} model but the config requests {}",
                state.model.kind().as_str(),
                cfg.model.as_str()
            )));
        }
        Ok(Trainer {
            cfg,
            dataset,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn epochs_completed(&self) -> u64 {
        self.state.epochs_completed
    }

    /// Train one full epoch; returns the summary and the per-step reports.
    pub fn run_epoch(&mut self) -> TrainResult<(EpochSummary, Vec<StepReport>)> {
        let epoch = self.state.epochs_completed;
        let batches = self
            .dataset
            .epoch_batches(self.cfg.batch_size, epoch_seed(self.cfg.seed, epoch));
        let steps_per_epoch = batches.len();
        let t0 = Instant::now();
        let mut reports = Vec::with_capacity(steps_per_epoch);
        for (i, (batch_a, batch_b)) in batches.iter().enumerate() {
            let step_index = epoch as usize * steps_per_epoch + i;
            let audit = self.cfg.scope_audit_every > 0
                && step_index.is_multiple_of(self.cfg.scope_audit_every);
            let report = match &mut self.state.model {
                Model::Proposed(m) => {
                    train_step_proposed(m, batch_a, batch_b, self.cfg, step_index, audit)?
                }
                Model::Baseline(m) => {
                    train_step_baseline(m, batch_a, batch_b, self.cfg, step_index, audit)?
                }
            };
            reports.push(report);
        }
        self.state.epochs_completed += 1;

        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&StepReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let summary = EpochSummary {
            epoch: epoch as usize + 1,
            seconds: t0.elapsed().as_secs_f64(),
            mean_cyclic: mean(|r| r.loss_cyclic),
            mean_dev_a: mean(|r| r.loss_dev_a),
            mean_dev_b: mean(|r| r.loss_dev_b),
            mean_adv_gen: mean(|r| r.loss_adv_gen),
            mean_adv_disc: mean(|r| r.loss_adv_disc),
        };
        Ok((summary, reports))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
    pub final_checkpoint: PathBuf,
}

pub const STEP_CSV_HEADER: &str =
    "step_index,loss_cyclic,loss_dev_a,loss_dev_b,loss_adv_gen,loss_adv_disc,wall_time_ms,flops";
pub const EPOCH_CSV_HEADER: &str =
    "epoch,seconds,mean_cyclic,mean_dev_a,mean_dev_b,mean_adv_gen,mean_adv_disc";

fn append_csv(path: &PathBuf, header: &str, rows: &[String]) -> TrainResult<()> {
    let exists = path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })?;
    let mut text = String::new();
    if !exists {
        text.push_str(header);
        text.push('\n');
    }
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    file.write_all(text.as_bytes())
        .map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })
}

fn step_row(r: &StepReport) -> String {
    format!(
        "{},{},{},{},{},{},{:.3},{}",
        r.step_index,
        r.loss_cyclic,
        r.loss_dev_a,
        r.loss_dev_b,
        r.loss_adv_gen,
        r.loss_adv_disc,
        r.wall_time_ms,
        r.flops
    )
}

fn epoch_row(s: &EpochSummary) -> String {
    format!(
        "{},{:.3},{},{},{},{},{}",
        s.epoch,
        s.seconds,
        s.mean_cyclic,
        s.mean_dev_a,
        s.mean_dev_b,
        s.mean_adv_gen,
        s.mean_adv_disc
    )
}

/// Drive training to `cfg.epochs`, starting fresh or from a checkpointed
/// state. Writes steps.csv / epochs.csv and checkpoints under
/// `cfg.out_dir`; calls `on_epoch` after each epoch (for progress output).
pub fn train_epochs(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> TrainResult<TrainOutcome> {
    let mut trainer = match resume {
        Some(state) => Trainer::from_state(cfg, dataset, state)?,
        None => Trainer::new(cfg, dataset)?,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|source| TrainError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let steps_csv = cfg.out_dir.join("steps.csv");
    let epochs_csv = cfg.out_dir.join("epochs.csv");

    let mut all_steps = Vec::new();
    let mut all_epochs = Vec::new();
    while trainer.epochs_completed() < cfg.epochs as u64 {
        let (summary, steps) = trainer.run_epoch()?;
        append_csv(
            &steps_csv,
            STEP_CSV_HEADER,
            &steps.iter().map(step_row).collect::<Vec<_>>(),
        )?;
        append_csv(&epochs_csv, EPOCH_CSV_HEADER, &[epoch_row(&summary)])?;
        let done = trainer.epochs_completed();
        if cfg.checkpoint_every > 0
            && done.is_multiple_of(cfg.checkpoint_every as u64)
            && done < cfg.epochs as u64
        {
            let path = cfg.out_dir.join(format!("model_epoch{done}.ckpt"));
            checkpoint::save_checkpoint(trainer.state(), cfg, &path)?;
        }
        on_epoch(&summary);
        all_steps.extend(steps);
        all_epochs.push(summary);
    }
    let final_path = cfg.out_dir.join("model_final.ckpt");
    checkpoint::save_checkpoint(trainer.state(), cfg, &final_path)?;
    Ok(TrainOutcome {
        steps: all_steps,
        epochs: all_epochs,
        final_checkpoint: final_path,
    })
}
