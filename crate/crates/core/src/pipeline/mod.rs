//! Subcommand implementations behind the CLI. Each command reads the
//! validated config, writes into its run directory, and reports how many
//! items failed so the caller can map partial failure to an exit code.

mod plot;
mod recipes;
mod rundir;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attacks::{robustness_protocol, CounterAttackSpec, DenoiserRegistry, PgdImmunizer, PgdTarget, RandomNoise};
use crate::config::Config;
use crate::data::{
    load_image, load_mask, save_image, split_manifest, synthetic, DatasetManifest, PromptText, RasterImage,
    RegionMask, SplitTag,
};
use crate::editors::{BackendRegistry, EditBackend};
use crate::error::{Error, Result};
use crate::eval::{
    edit_background, evaluate_method, load_scorer, render_comparison, video_evaluate, MetricReport, TextScorer,
};
use crate::immunizer::{IdentityImmunizer, ImmunizerModel, Immunize};
use crate::training::{ManifestSource, Objective, Trainer};

pub use plot::render_svg;
pub use recipes::{
    ablation_table, alpha_sweep, pooled_std, prompt_agnostic, render_ablation, render_sweep, AblationRow,
    Distribution, PromptAgnosticReport, PromptRow, SweepRow,
};
pub use rundir::RunDir;

/// Names accepted wherever an immunization method is selected.
pub const METHODS: [&str; 5] = ["immunizer", "identity", "random", "pgd-encoder", "pgd-full"];

/// Result of a command: what was written and how many items failed.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub failures: usize,
    pub written: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures > 0 {
            1
        } else {
            0
        }
    }
}

pub struct Context {
    pub cfg: Config,
    pub run: RunDir,
    pub backends: BackendRegistry,
    pub denoisers: DenoiserRegistry,
}

impl Context {
    pub fn new(cfg: Config, run: RunDir) -> Self {
        Self {
            cfg,
            run,
            backends: BackendRegistry::with_defaults(),
            denoisers: DenoiserRegistry::with_defaults(),
        }
    }

    pub fn backend(&self) -> Result<Box<dyn EditBackend>> {
        self.backends.resolve(&self.cfg.editor.id, &self.cfg.editor)
    }

    fn resolution(&self) -> Option<(usize, usize)> {
        Some((self.cfg.data.resolution, self.cfg.data.resolution))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.cfg.data.manifest {
            Some(p) => DatasetManifest::load(p),
            None => Err(Error::config("data.manifest is not set")),
        }
    }

    /// Records of `split` (all records for `None`), truncated to
    /// `eval.limit` when `limited`.
    pub fn source(&self, split: Option<SplitTag>, limited: bool) -> Result<ManifestSource> {
        let mut manifest = self.manifest()?;
        if let Some(s) = split {
            manifest = manifest.with_split(s);
        }
        if limited && self.cfg.eval.limit > 0 {
            manifest.records.truncate(self.cfg.eval.limit);
        }
        if manifest.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ManifestSource {
            manifest,
            resolution: self.resolution(),
        })
    }

    pub fn scorer(&self) -> Option<Box<dyn TextScorer>> {
        if !self.cfg.eval.clip {
            return None;
        }
        match load_scorer(self.cfg.editor.weights_dir().as_deref()) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("CLIP-T will be reported as absent: {e}");
                None
            }
        }
    }

    /// Builds an immunization method by name.
    pub fn method(&self, name: &str, checkpoint: Option<&Path>) -> Result<Box<dyn Immunize>> {
        match name {
            "immunizer" => {
                let path = checkpoint.ok_or_else(|| Error::config("the `immunizer` method needs --checkpoint"))?;
                Ok(Box::new(ImmunizerModel::load_checkpoint(path)?))
            }
            "identity" => Ok(Box::new(IdentityImmunizer)),
            "random" => Ok(Box::new(RandomNoise::new(self.cfg.budget(), self.cfg.attack.random_seed))),
            "pgd-encoder" | "pgd-full" => {
                let target = if name == "pgd-encoder" {
                    PgdTarget::EncoderLatent
                } else {
                    PgdTarget::FullEdit
                };
                Ok(Box::new(PgdImmunizer::new(
                    self.backend()?,
                    self.cfg.budget(),
                    self.cfg.attack.pgd(target, self.cfg.editor.params()),
                )?))
            }
            other => Err(Error::UnknownId {
                kind: "method",
                id: other.to_string(),
                available: METHODS.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }
}

/// Writes a procedural dataset with a seen/unseen split.
pub fn cmd_synth_data(dir: &Path, count: usize, size: usize, seed: u64, ratio: f64) -> Result<Outcome> {
    let m = synthetic::write_dataset(dir, count, size, seed)?;
    let (seen, unseen) = split_manifest(&m, ratio, seed)?;
    let mut all = DatasetManifest::new([seen.records, unseen.records].concat(), seed)?;
    all.records.sort_by(|a, b| a.id.cmp(&b.id));
    let path = dir.join("manifest.jsonl");
    all.save(&path)?;
    Ok(Outcome {
        failures: 0,
        written: vec![path],
        summary: format!("{count} samples of {size}x{size} in {}", dir.display()),
    })
}

/// Trains on the seen split; writes periodic checkpoints, the loss log and
/// `checkpoints/final.ckpt`.
pub fn cmd_train(ctx: &Context, resume: Option<&Path>) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let source = ctx.source(Some(SplitTag::Seen), false)?;
    let objective = Objective::from(ctx.cfg.loss);
    let trainer = match resume {
        Some(p) => Trainer::resume(p, backend.as_ref(), ctx.cfg.train.clone(), objective)?,
        None => {
            let mut model = ImmunizerModel::new(ctx.cfg.immunizer)?;
            model.set_run_id(ctx.run.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            Trainer::new(model, backend.as_ref(), ctx.cfg.train.clone(), objective)?
        }
    };
    let mut trainer = trainer
        .with_log_file(&ctx.run.logs().join("losses.jsonl"))?
        .with_checkpoint_dir(&ctx.run.checkpoints())?;
    trainer.run(&source)?;
    let final_path = ctx.run.checkpoints().join("final.ckpt");
    trainer.save_checkpoint(&final_path)?;
    let state = trainer.state().clone();
    let last = trainer.log().last().cloned();
    Ok(Outcome {
        failures: state.skipped.len(),
        written: vec![final_path],
        summary: match last {
            Some(r) => format!(
                "{} steps; last l_noise {:.6} l_edit {:.6} total {:.6}",
                state.step, r.l_noise, r.l_edit, r.l_total
            ),
            None => format!("{} steps", state.step),
        },
    })
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow<'a> {
    id: &'a str,
    output: String,
    runtime_ms: f64,
    peak_mem_mib: Option<f64>,
}

fn confinement_ok(original: &RasterImage, out: &RasterImage, mask: &RegionMask, eps: f64) -> bool {
    original
        .pixels()
        .iter()
        .zip(out.pixels().iter())
        .zip(mask.values().iter())
        .all(|((a, b), m)| if *m == 0.0 { a == b } else { (a - b).abs() <= eps })
}

/// Immunizes every manifest record (or one explicit image) at its native
/// size. Each output PNG gets a timing sidecar and a row in
/// `logs/timing.jsonl`. With `self_check`, the written file is re-read and
/// must equal the input outside the mask.
pub fn cmd_immunize(
    ctx: &Context,
    checkpoint: &Path,
    single: Option<(&Path, &Path)>,
    self_check: bool,
) -> Result<Outcome> {
    let model = ImmunizerModel::load_checkpoint(checkpoint)?;
    let eps = model.config().eps_max + 0.5 / 255.0 + 1e-12;
    let jobs: Vec<(String, PathBuf, PathBuf)> = match single {
        Some((img, mask)) => vec![(
            img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into()),
            img.to_path_buf(),
            mask.to_path_buf(),
        )],
        None => {
            let m = ctx.manifest()?;
            m.records
                .iter()
                .map(|r| (r.id.clone(), m.resolve(&r.image_path), m.resolve(&r.mask_path)))
                .collect()
        }
    };
    let mut out = Outcome::default();
    for (id, img_path, mask_path) in &jobs {
        let res = (|| -> Result<PathBuf> {
            let image = load_image(img_path)?;
            let mask = load_mask(mask_path, image.shape(), false)?;
            let run = model.immunize_profiled(&image, &mask)?;
            let path = ctx.run.outputs().join(format!("{id}.png"));
            save_image(run.image.image(), &path)?;
            let row = TimingRow {
                id,
                output: path.display().to_string(),
                runtime_ms: run.duration.as_secs_f64() * 1000.0,
                peak_mem_mib: run.peak_mem_mib,
            };
            std::fs::write(
                ctx.run.outputs().join(format!("{id}.timing.json")),
                serde_json::to_string_pretty(&row)?,
            )?;
            ctx.run.append_jsonl("logs/timing.jsonl", &row)?;
            if self_check {
                let written = load_image(&path)?;
                if !confinement_ok(&image, &written, &mask, eps) {
                    return Err(Error::InvalidArgument(format!("self-check failed for {id}")));
                }
            }
            Ok(path)
        })();
        match res {
            Ok(p) => out.written.push(p),
            Err(e) => {
                log::error!("{id}: {e}");
                out.failures += 1;
            }
        }
    }
    out.summary = format!("{} of {} images immunized", out.written.len(), jobs.len());
    Ok(out)
}

/// Edits the region outside `mask` of one image.
pub fn cmd_edit(ctx: &Context, image: &Path, mask: &Path, prompt: &str, output: Option<&Path>) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let img = load_image(image)?;
    let m = load_mask(mask, img.shape(), false)?;
    let edited = edit_background(backend.as_ref(), &img, &m, &PromptText::new(prompt)?, &ctx.cfg.editor.params())?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.run.outputs().join("edited.png"));
    save_image(&edited, &path)?;
    Ok(Outcome {
        failures: 0,
        written: vec![path],
        summary: format!("edited with {}", backend.id()),
    })
}

/// Scores each method on the manifest and writes one JSONL report per
/// method plus the comparison table.
pub fn cmd_evaluate(ctx: &Context, methods: &[String], checkpoint: Option<&Path>) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let source = ctx.source(None, true)?;
    let scorer = ctx.scorer();
    let mut out = Outcome::default();
    let mut reports = Vec::new();
    for name in methods {
        let method = ctx.method(name, checkpoint)?;
        let report = evaluate_method(
            method.as_ref(),
            &source,
            backend.as_ref(),
            &ctx.cfg.editor.params(),
            scorer.as_deref(),
        )?;
        let path = ctx.run.reports().join(format!("{name}.jsonl"));
        report.write_jsonl(&path)?;
        out.failures += report.failures.len();
        out.written.push(path);
        reports.push(report);
    }
    let table = render_comparison(&reports.iter().collect::<Vec<_>>());
    out.written.push(ctx.run.write_text("reports/table.txt", &table)?);
    out.summary = table;
    Ok(out)
}

/// Scores a method after each counter-attack.
pub fn cmd_attack(ctx: &Context, method: &str, checkpoint: Option<&Path>, specs: &[CounterAttackSpec]) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let source = ctx.source(None, true)?;
    let scorer = ctx.scorer();
    let im = ctx.method(method, checkpoint)?;
    let report = robustness_protocol(
        im.as_ref(),
        &source,
        backend.as_ref(),
        &ctx.cfg.editor.params(),
        specs,
        &ctx.denoisers,
        scorer.as_deref(),
    )?;
    let table = report.render();
    let jsonl = ctx.run.write_text("reports/robustness.jsonl", &report.to_jsonl()?)?;
    let txt = ctx.run.write_text("reports/robustness.txt", &table)?;
    Ok(Outcome {
        failures: report.arms.iter().map(|(_, r)| r.failures.len()).sum(),
        written: vec![jsonl, txt],
        summary: table,
    })
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::ArtifactMissing(dir.display().to_string()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Frames and masks of a video job, loaded and checked before anything is
/// written.
pub struct VideoJob {
    pub frames: Vec<RasterImage>,
    pub masks: Vec<RegionMask>,
    pub prompts: Vec<PromptText>,
}

impl VideoJob {
    /// Frames and masks are ordered lexicographically by file name.
    pub fn load(frames_dir: &Path, masks_dir: &Path, prompts: &[String]) -> Result<Self> {
        let frame_files = list_images(frames_dir)?;
        let mask_files = list_images(masks_dir)?;
        if frame_files.len() != mask_files.len() {
            return Err(Error::FrameMismatch(format!(
                "{} frames but {} masks",
                frame_files.len(),
                mask_files.len()
            )));
        }
        let frames = frame_files.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        let masks = frames
            .iter()
            .zip(&mask_files)
            .map(|(f, p)| load_mask(p, f.shape(), true))
            .collect::<Result<Vec<_>>>()?;
        crate::eval::check_frames(&frames, &masks)?;
        Ok(Self {
            frames,
            masks,
            prompts: prompts.iter().map(|p| PromptText::new(p.clone())).collect::<Result<_>>()?,
        })
    }
}

/// Immunizes every frame, writes `outputs/frame_%05d.png` in input order
/// and, when prompts are given, the mean-PSNR summary.
pub fn cmd_video(ctx: &Context, job: &VideoJob, method: &str, checkpoint: Option<&Path>) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let im = ctx.method(method, checkpoint)?;
    let res = video_evaluate(&job.frames, &job.masks, &job.prompts, im.as_ref(), backend.as_ref(), &ctx.cfg.editor.params())?;
    let mut out = Outcome::default();
    for (i, f) in res.immunized.iter().enumerate() {
        let p = ctx.run.outputs().join(format!("frame_{i:05}.png"));
        save_image(f.image(), &p)?;
        out.written.push(p);
    }
    let summary = res.summary.to_json();
    out.written.push(ctx.run.write_text("reports/video.json", &serde_json::to_string_pretty(&summary)?)?);
    out.summary = summary.to_string();
    Ok(out)
}

/// Loss-term ablation: trains on the seen split, evaluates on everything.
pub fn cmd_ablate(ctx: &Context) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let train = ctx.source(Some(SplitTag::Seen), false)?;
    let eval = ctx.source(None, true)?;
    let scorer = ctx.scorer();
    let rows = ablation_table(
        ctx.cfg.immunizer,
        &train,
        &eval,
        backend.as_ref(),
        &ctx.cfg.train,
        ctx.cfg.loss,
        &ctx.cfg.editor.params(),
        scorer.as_deref(),
    );
    let mut out = Outcome::default();
    let mut jsonl = String::new();
    for r in &rows {
        match &r.report {
            Some(rep) => {
                out.failures += rep.failures.len();
                jsonl.push_str(&rep.to_jsonl()?);
            }
            None => out.failures += 1,
        }
    }
    let table = render_ablation(&rows);
    out.written.push(ctx.run.write_text("reports/ablation.jsonl", &jsonl)?);
    out.written.push(ctx.run.write_text("reports/ablation.txt", &table)?);
    out.summary = table;
    Ok(out)
}

pub fn cmd_sweep_alpha(ctx: &Context, values: &[f64]) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let train = ctx.source(Some(SplitTag::Seen), false)?;
    let eval = ctx.source(None, true)?;
    let rows = alpha_sweep(values, ctx.cfg.immunizer, &train, &eval, backend.as_ref(), &ctx.cfg.train, &ctx.cfg.editor.params())?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let table = render_sweep(&rows);
    Ok(Outcome {
        failures: rows.iter().filter(|r| r.error.is_some()).count(),
        written: vec![
            ctx.run.write_text("reports/sweep_alpha.jsonl", &jsonl)?,
            ctx.run.write_text("reports/sweep_alpha.txt", &table)?,
        ],
        summary: table,
    })
}

pub fn cmd_prompt_agnostic(ctx: &Context, image: &Path, mask: &Path, seen: &[String], unseen: &[String]) -> Result<Outcome> {
    let backend = ctx.backend()?;
    let r = ctx.cfg.data.resolution;
    let img = load_image(image)?.resized(r, r)?;
    let m = load_mask(mask, img.shape(), false)?;
    let report = prompt_agnostic(
        &img,
        &m,
        seen,
        unseen,
        ctx.cfg.immunizer,
        backend.as_ref(),
        &ctx.cfg.train,
        ctx.cfg.loss,
        &ctx.cfg.editor.params(),
    )?;
    let summary = format!(
        "edit loss seen {:.6} (var {:.3e}) unseen {:.6} (var {:.3e}); pooled std {:.3e}; agnostic: {}",
        report.seen_edit_loss.mean,
        report.seen_edit_loss.variance,
        report.unseen_edit_loss.mean,
        report.unseen_edit_loss.variance,
        report.pooled_std_edit_loss,
        report.agnostic
    );
    Ok(Outcome {
        failures: 0,
        written: vec![ctx
            .run
            .write_text("reports/prompt_agnostic.json", &serde_json::to_string_pretty(&report)?)?],
        summary,
    })
}

/// Renders bar summaries of one or more JSONL reports.
pub fn cmd_plot(inputs: &[PathBuf], output: &Path) -> Result<Outcome> {
    let reports = inputs
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::ArtifactMissing(p.display().to_string()));
            }
            MetricReport::read_jsonl(p)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(output, render_svg(&reports))?;
    Ok(Outcome {
        failures: 0,
        written: vec![output.to_path_buf()],
        summary: format!("{} report(s) plotted", reports.len()),
    })
}
