//! End-to-end optimization of the immunizer through a frozen editor.

mod losses;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SampleTuple};
use crate::editors::{edit_tensor, EditBackend, EditParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_method, MetricReport, TextScorer};
use crate::immunizer::checkpoint::Container;
use crate::immunizer::{apply_immunization_tensor, ImmunizerConfig, ImmunizerModel};

pub use losses::{
    edit_loss, edit_loss_tensor, noise_loss, noise_loss_tensor, total_loss, AblationMode, LossWeights,
    Objective,
};
pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `mixed` runs the immunizer forward pass in `f32` while parameters and
    /// optimizer state stay in `f64`.
    pub precision: Precision,
    pub seed: u64,
    /// Denoising steps the editor runs inside the training graph.
    pub editor_steps: usize,
    /// Save a training checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            batch_size: 5,
            learning_rate: 1e-5,
            precision: Precision::Mixed,
            seed: 0,
            editor_steps: 4,
            checkpoint_every: 1000,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("train.epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".to_string());
        }
        if self.editor_steps == 0 {
            errs.push("train.editor_steps must be positive".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            errs.push(format!("train.learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Random access to training samples; lets large manifests stream from disk.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<SampleTuple>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SampleTuple] {
    fn len(&self) -> usize {
        <[SampleTuple]>::len(self)
    }
    fn get(&self, index: usize) -> Result<SampleTuple> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SampleTuple> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<SampleTuple> {
        Ok(self[index].clone())
    }
}

/// Loads manifest records on demand at a fixed working resolution.
pub struct ManifestSource {
    pub manifest: DatasetManifest,
    pub resolution: Option<(usize, usize)>,
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.len()
    }
    fn get(&self, index: usize) -> Result<SampleTuple> {
        self.manifest.load_sample(&self.manifest.records[index], self.resolution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_noise: f64,
    pub l_edit: f64,
    pub l_total: f64,
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub sample_id: String,
    pub l_noise: f64,
    pub l_edit: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub epoch: usize,
    pub running: Option<StepLosses>,
    pub checkpoints: Vec<PathBuf>,
    /// Ids of batches skipped because of a non-finite loss.
    pub skipped: Vec<String>,
}

/// Batch losses as differentiable scalars, averaged per sample.
fn batch_objective(
    model: &ImmunizerModel,
    batch: &[SampleTuple],
    backend: &dyn EditBackend,
    params: &EditParams,
    objective: Objective,
) -> Result<(Tensor, StepLosses)> {
    let dev = Device::Cpu;
    let mut noise_terms = Vec::with_capacity(batch.len());
    let mut edit_terms = Vec::with_capacity(batch.len());
    for s in batch {
        let x = s.image.to_tensor(&dev)?;
        let m = s.mask.to_tensor(&dev)?;
        let noise = model.noise_tensor(&x)?;
        let immunized = apply_immunization_tensor(&x, &noise, &m)?;
        let region = m.affine(-1.0, 1.0)?;
        let edited = edit_tensor(backend, &immunized, &region, &s.prompt, params)?;
        noise_terms.push(noise_loss_tensor(&immunized, &x, &m)?);
        edit_terms.push(edit_loss_tensor(&edited, &m)?);
    }
    let n = batch.len() as f64;
    let l_noise = (Tensor::stack(&noise_terms, 0)?.sum_all()? / n)?;
    let l_edit = (Tensor::stack(&edit_terms, 0)?.sum_all()? / n)?;
    let total = ((&l_noise * objective.noise_weight)? + (&l_edit * objective.edit_weight)?)?;
    let losses = StepLosses {
        l_noise: l_noise.to_scalar::<f64>()?,
        l_edit: l_edit.to_scalar::<f64>()?,
        l_total: total.to_scalar::<f64>()?,
    };
    Ok((total, losses))
}

/// Loss of the current model on a batch without updating anything.
pub fn evaluate_losses(
    model: &ImmunizerModel,
    batch: &[SampleTuple],
    backend: &dyn EditBackend,
    params: &EditParams,
    objective: Objective,
) -> Result<StepLosses> {
    Ok(batch_objective(model, batch, backend, params, objective)?.1)
}

/// One optimization step: noise, masked apply and clamp, edit of the
/// editable region, both losses, and an Adam update of the immunizer only.
/// Returns the losses measured before the update.
pub fn train_step(
    model: &mut ImmunizerModel,
    optimizer: &mut Adam,
    batch: &[SampleTuple],
    backend: &dyn EditBackend,
    params: &EditParams,
    objective: Objective,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !backend.capabilities().differentiable {
        return Err(Error::Capability {
            backend: backend.id().to_string(),
            what: "gradient propagation".into(),
        });
    }
    let (total, losses) = batch_objective(model, batch, backend, params, objective)?;
    if !(losses.l_noise.is_finite() && losses.l_edit.is_finite() && losses.l_total.is_finite()) {
        return Err(Error::NonFiniteLoss {
            sample_id: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
        });
    }
    let vars = model.parameters();
    let grads = total.backward()?;
    let per_param: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(v).cloned()).collect();
    optimizer.step(&vars, &per_param)?;
    Ok(losses)
}

/// Stateful training driver: epoch ordering, logging, checkpoints, resume.
pub struct Trainer<'a> {
    model: ImmunizerModel,
    backend: &'a dyn EditBackend,
    cfg: TrainConfig,
    objective: Objective,
    optimizer: Adam,
    state: TrainState,
    log: Vec<LossRecord>,
    log_writer: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: ImmunizerModel, backend: &'a dyn EditBackend, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        model.set_compute_dtype(match cfg.precision {
            Precision::Full => DType::F64,
            Precision::Mixed => DType::F32,
        });
        let optimizer = Adam::new(&model.parameters(), cfg.learning_rate)?;
        Ok(Self {
            model,
            backend,
            cfg,
            objective,
            optimizer,
            state: TrainState::default(),
            log: Vec::new(),
            log_writer: None,
            checkpoint_dir: None,
        })
    }

    /// Restores model, optimizer moments and step counters from a training
    /// checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path, backend: &'a dyn EditBackend, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        let c = Container::read(path)?;
        let model = ImmunizerModel::from_container(&c)?;
        let mut t = Self::new(model, backend, cfg, objective)?;
        let training = c
            .meta
            .get("training")
            .ok_or_else(|| Error::Version("checkpoint has no training state".into()))?;
        let state: TrainState = serde_json::from_value(training["state"].clone())
            .map_err(|e| Error::Version(format!("bad training state: {e}")))?;
        let adam_t = training["adam_t"]
            .as_u64()
            .ok_or_else(|| Error::Version("missing optimizer step".into()))?;
        t.optimizer.restore(adam_t, |name| {
            c.get(name).map(|(e, d)| (e.shape.clone(), d.clone()))
        })?;
        t.state = state;
        Ok(t)
    }

    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log_writer = Some(BufWriter::new(f));
        Ok(self)
    }

    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &ImmunizerModel {
        &self.model
    }

    pub fn into_model(self) -> ImmunizerModel {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.cfg.epochs * self.steps_per_epoch(n);
        self.cfg.max_steps.map_or(all, |m| m.min(all))
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn edit_params(&self, step: usize) -> EditParams {
        EditParams {
            steps: self.cfg.editor_steps,
            guidance: 7.5,
            seed: self.cfg.seed.wrapping_add(step as u64),
        }
    }

    /// Runs one step at the current position. Non-finite losses skip the
    /// update but still advance the step counter.
    pub fn step(&mut self, source: &dyn SampleSource) -> Result<Option<StepLosses>> {
        let n = source.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let spe = self.steps_per_epoch(n);
        let epoch = self.state.step / spe;
        let pos = self.state.step % spe;
        let order = self.epoch_order(n, epoch);
        let idx = &order[pos * self.cfg.batch_size..((pos + 1) * self.cfg.batch_size).min(n)];
        let batch = idx.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
        let params = self.edit_params(self.state.step);
        let started = Instant::now();
        let res = train_step(&mut self.model, &mut self.optimizer, &batch, self.backend, &params, self.objective);
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let step = self.state.step;
        self.state.step += 1;
        self.state.epoch = self.state.step / spe;
        let out = match res {
            Ok(l) => {
                let rec = LossRecord {
                    step,
                    epoch,
                    sample_id: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
                    l_noise: l.l_noise,
                    l_edit: l.l_edit,
                    l_total: l.l_total,
                    wall_ms,
                };
                if let Some(w) = &mut self.log_writer {
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
                self.log.push(rec);
                self.state.running = Some(match self.state.running {
                    None => l,
                    Some(r) => {
                        let k = self.log.len() as f64;
                        StepLosses {
                            l_noise: r.l_noise + (l.l_noise - r.l_noise) / k,
                            l_edit: r.l_edit + (l.l_edit - r.l_edit) / k,
                            l_total: r.l_total + (l.l_total - r.l_total) / k,
                        }
                    }
                });
                Some(l)
            }
            Err(Error::NonFiniteLoss { sample_id }) => {
                log::warn!("step {step}: non-finite loss on `{sample_id}`, update skipped");
                self.state.skipped.push(sample_id);
                None
            }
            Err(e) => return Err(e),
        };
        if self.cfg.checkpoint_every > 0 && self.state.step % self.cfg.checkpoint_every == 0 {
            self.checkpoint_to_dir()?;
        }
        Ok(out)
    }

    /// Trains until the configured epochs (or `max_steps`) are exhausted.
    pub fn run(&mut self, source: &dyn SampleSource) -> Result<()> {
        if source.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total = self.total_steps(source.len());
        while self.state.step < total {
            self.step(source)?;
        }
        if let Some(w) = &mut self.log_writer {
            w.flush()?;
        }
        if self.checkpoint_dir.is_some()
            && self.state.checkpoints.last().map(|p| p.file_name()) != Some(Some(self.checkpoint_name().as_ref()))
        {
            self.checkpoint_to_dir()?;
        }
        Ok(())
    }

    fn checkpoint_name(&self) -> String {
        format!("step_{:08}.ckpt", self.state.step)
    }

    fn checkpoint_to_dir(&mut self) -> Result<()> {
        if let Some(dir) = self.checkpoint_dir.clone() {
            let path = dir.join(self.checkpoint_name());
            self.state.checkpoints.push(path.clone());
            self.save_checkpoint(&path)?;
        }
        Ok(())
    }

    /// Model weights plus optimizer moments and counters. The file also
    /// loads as a plain immunizer checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut c = self.model.to_container()?;
        c.tensors.extend(self.optimizer.to_entries()?);
        c.meta["training"] = serde_json::json!({
            "state": self.state,
            "adam_t": self.optimizer.steps_taken(),
            "config": self.cfg,
            "objective": self.objective,
        });
        c.write(path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ImmunizerModel,
    pub log: Vec<LossRecord>,
    pub state: TrainState,
}

pub fn train(
    model: ImmunizerModel,
    source: &dyn SampleSource,
    backend: &dyn EditBackend,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<TrainOutcome> {
    weights.validate()?;
    let mut t = Trainer::new(model, backend, cfg.clone(), weights.into())?;
    t.run(source)?;
    Ok(TrainOutcome {
        state: t.state.clone(),
        log: t.log.clone(),
        model: t.into_model(),
    })
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub mode: AblationMode,
    pub final_losses: StepLosses,
    pub report: MetricReport,
    pub model: ImmunizerModel,
}

/// Trains a fresh immunizer with one loss term optionally removed and
/// evaluates it; every mode yields the same metric schema.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    mode: AblationMode,
    immunizer: ImmunizerConfig,
    train_set: &dyn SampleSource,
    eval_set: &dyn SampleSource,
    backend: &dyn EditBackend,
    cfg: &TrainConfig,
    weights: LossWeights,
    eval_params: &EditParams,
    scorer: Option<&dyn TextScorer>,
) -> Result<AblationResult> {
    weights.validate()?;
    let objective = mode.objective(weights);
    let mut t = Trainer::new(ImmunizerModel::new(immunizer)?, backend, cfg.clone(), objective)?;
    t.run(train_set)?;
    let model = t.into_model();
    let all: Vec<SampleTuple> = (0..train_set.len()).map(|i| train_set.get(i)).collect::<Result<_>>()?;
    let final_losses = evaluate_losses(&model, &all, backend, eval_params, objective)?;
    let report = evaluate_method(&model, eval_set, backend, eval_params, scorer)?;
    Ok(AblationResult {
        mode,
        final_losses,
        report,
        model,
    })
}
