//! Pipeline stages. Every stage reads and writes only inside its run
//! directory `<out>/<run-id>/` (plus an external `paths.data`, read-only).

use std::fs;
use std::path::{Path, PathBuf};

use calcifuse::augment::{augment_calcified, replay_matches};
use calcifuse::extraction::{batch_extract, BatchOptions, Classical, InpaintEngine};
use calcifuse::fusion::{self, FusionModel, FusionSample};
use calcifuse::inpainter::{self, train_inpainter};
use calcifuse::manifest::{Label, Manifest, Split, MANIFEST_FILE};
use calcifuse::metrics::{self, EvalReport};
use calcifuse::nn::checkpoint::Checkpoint;
use calcifuse::phantom::build_dataset;

use crate::config::{Engine, RunConfig};
use crate::CliError;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const FUSION_FILES: [(&str, &str); 3] = [("raw", "raw.ckpt"), ("refined", "refined.ckpt"), ("fusion", "fusion.ckpt")];
/// Minority / majority training-class ratio below which fusion training
/// without augmentation warns.
pub const IMBALANCE_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stage: &'static str,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn new(stage: &'static str) -> Self {
        Outcome {
            stage,
            notes: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn note(mut self, s: impl Into<String>) -> Self {
        self.notes.push(s.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub id: String,
    pub dir: PathBuf,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(calcifuse::Error::io(path, e))
}

fn fresh_dir(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        fs::remove_dir_all(p).map_err(|e| io(p, e))?;
    }
    fs::create_dir_all(p).map_err(|e| io(p, e))
}

fn stage<T>(name: &'static str, r: Result<T, CliError>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        e @ (CliError::Missing { .. } | CliError::Stage { .. }) => e,
        other => CliError::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

impl Run {
    /// Create (or reopen) the run directory and write the config snapshot.
    pub fn open(cfg: RunConfig) -> Result<Run, CliError> {
        let id = cfg.run_id();
        let dir = cfg.out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let snap = dir.join(SNAPSHOT_FILE);
        fs::write(&snap, cfg.snapshot()).map_err(|e| io(&snap, e))?;
        Ok(Run { cfg, id, dir })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.cfg.data.clone().unwrap_or_else(|| self.dir.join("phantom"))
    }

    pub fn stage_dir(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, dir: PathBuf, what: &'static str, command: &'static str) -> Result<Manifest, CliError> {
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(CliError::Missing { what, path: dir, command });
        }
        Ok(Manifest::load(&dir)?)
    }

    fn dataset(&self) -> Result<Manifest, CliError> {
        self.require(self.dataset_dir(), "phantom dataset", "phantom-gen")
    }

    fn extracted(&self) -> Result<Manifest, CliError> {
        self.require(self.stage_dir("extract"), "refined images", "extract")
    }

    /// Augmented manifest when augmentation ran, else the extracted one.
    fn fusion_input(&self) -> Result<(Manifest, bool), CliError> {
        let aug = self.stage_dir("augment");
        if aug.join(MANIFEST_FILE).is_file() {
            return Ok((Manifest::load(&aug)?, true));
        }
        Ok((self.extracted()?, false))
    }

    fn generator(&self) -> Result<inpainter::InpaintNet, CliError> {
        let path = self.stage_dir("inpainter").join(GENERATOR_FILE);
        if !path.is_file() {
            return Err(CliError::Missing {
                what: "inpainter checkpoint",
                path,
                command: "train-inpaint",
            });
        }
        let ck = Checkpoint::load(&path)?;
        ck.check_manifest(&self.dataset()?.digest())?;
        Ok(inpainter::load_generator(&ck, &self.cfg.inpainter.arch)?)
    }
}

pub fn phantom_gen(run: &Run) -> Result<Outcome, CliError> {
    stage("phantom-gen", (|| {
        if let Some(d) = &run.cfg.data {
            return Ok(Outcome::new("phantom-gen").note(format!("using external dataset {}", d.display())));
        }
        let dir = run.dataset_dir();
        fresh_dir(&dir)?;
        let m = build_dataset(&run.cfg.phantom, &dir)?;
        Ok(Outcome::new("phantom-gen").note(format!(
            "{} patches ({} normal, {} calcified, {} non-calcified) in {}",
            m.len(),
            m.count(Label::Normal),
            m.count(Label::Calcified),
            m.count(Label::NonCalcified),
            dir.display()
        )))
    })())
}

pub fn train_inpaint(run: &Run) -> Result<Outcome, CliError> {
    stage("train-inpaint", (|| {
        let m = run.dataset()?;
        let dir = run.stage_dir("inpainter");
        fresh_dir(&dir)?;
        let t = train_inpainter(&m, &run.cfg.inpainter)?;
        t.write_log(dir.join("train_log.csv"))?;
        t.checkpoint(run.cfg.seed, &m.digest()).save(dir.join(GENERATOR_FILE))?;
        let mut out = Outcome::new("train-inpaint");
        let curve = t.validation_curve();
        if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
            out = out.note(format!("validation hole MSE {:.5} -> {:.5} (PSNR {:.2} dB)", first.1, last.1, last.2));
        }
        Ok(out)
    })())
}

pub fn extract(run: &Run) -> Result<Outcome, CliError> {
    stage("extract", (|| {
        let m = run.dataset()?;
        let trained;
        let engine: &dyn InpaintEngine = match run.cfg.engine {
            Engine::Classical => &Classical,
            Engine::Trained => {
                trained = run.generator()?;
                &trained
            }
        };
        let nodules: Vec<_> = m
            .rows
            .iter()
            .filter(|r| r.label != Label::Normal)
            .cloned()
            .collect();
        let input = Manifest::new(m.root(), nodules);
        let dir = run.stage_dir("extract");
        fresh_dir(&dir)?;
        let opts = BatchOptions {
            mask_fraction: run.cfg.inpainter.mask_fraction,
            debug_stages: run.cfg.debug_stages,
        };
        let report = batch_extract(&input, engine, &dir, opts)?;
        let mut out = Outcome::new("extract");
        for f in &report.failures {
            out.warnings.push(format!("{}: {}", f.id, f.error));
        }
        if report.failed {
            return Err(CliError::Stage {
                stage: "extract",
                source: Box::new(CliError::Core(calcifuse::Error::invalid(format!(
                    "{} of {} samples failed",
                    report.failures.len(),
                    input.len()
                )))),
            });
        }
        report.manifest.save()?;
        Ok(out.note(format!(
            "{} refined images ({} engine) in {}",
            input.len() - report.failures.len(),
            run.cfg.engine,
            dir.display()
        )))
    })())
}

pub fn augment(run: &Run) -> Result<Outcome, CliError> {
    stage("augment", (|| {
        let m = run.extracted()?;
        let dir = run.stage_dir("augment");
        if run.cfg.augment.factor == 0 {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
            }
            return Ok(Outcome::new("augment").note("augment.factor = 0, augmentation disabled"));
        }
        fresh_dir(&dir)?;
        let r = augment_calcified(&m, &run.cfg.augment, &dir)?;
        r.manifest.save()?;
        let mut out = Outcome::new("augment").note(format!("{} augmented calcified pairs in {}", r.added, dir.display()));
        out.warnings.extend(r.skipped.iter().map(|(id, why)| format!("skipped {id}: {why}")));
        Ok(out)
    })())
}

fn train_counts(m: &Manifest) -> (usize, usize) {
    let n = |l| m.iter_where(Split::Train, &[l]).count();
    (n(Label::Calcified), n(Label::NonCalcified))
}

fn samples(run: &Run, m: &Manifest, split: Split) -> Result<Vec<FusionSample>, CliError> {
    Ok(fusion::load_samples(m, split, run.cfg.fusion.arch.size)?)
}

pub fn train_fusion(run: &Run) -> Result<Outcome, CliError> {
    stage("train-fusion", (|| {
        let (m, augmented) = run.fusion_input()?;
        let mut out = Outcome::new("train-fusion");
        let (calc, non) = train_counts(&m);
        if !augmented && (calc.min(non) as f64) < IMBALANCE_RATIO * calc.max(non) as f64 {
            out.warnings.push(format!(
                "training classes are imbalanced ({calc} calcified, {non} non-calcified); calcified patches are \
                 normally oversampled with `calcifuse augment` before fusion training. Proceeding without augmentation."
            ));
        }
        let train = samples(run, &m, Split::Train)?;
        let val = samples(run, &m, Split::Val)?;
        let dir = run.stage_dir("fusion");
        fresh_dir(&dir)?;
        let t = fusion::train_fusion(&train, &val, &run.cfg.fusion)?;
        t.write_log(dir.join("train_log.csv"))?;
        let digest = m.digest();
        for ((_, file), snap) in FUSION_FILES.iter().zip([&t.best_raw, &t.best_refined, &t.best]) {
            snap.model.checkpoint(run.cfg.seed, &digest).save(dir.join(file))?;
        }
        Ok(out.note(format!(
            "best validation AUC fused {:.4} (epoch {}), raw {:.4} (epoch {}), refined {:.4} (epoch {})",
            t.best.auc, t.best.epoch, t.best_raw.auc, t.best_raw.epoch, t.best_refined.auc, t.best_refined.epoch
        )))
    })())
}

/// Validation reports for the raw-only, refined-only and fused heads,
/// each from its own best checkpoint.
pub fn evaluate(run: &Run) -> Result<Vec<(&'static str, EvalReport)>, CliError> {
    let (m, _) = run.fusion_input()?;
    let val = samples(run, &m, Split::Val)?;
    let dir = run.stage_dir("fusion");
    let mut out = Vec::new();
    for (name, file) in FUSION_FILES {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(CliError::Missing {
                what: "fusion checkpoint",
                path,
                command: "train-fusion",
            });
        }
        let ck = Checkpoint::load(&path)?;
        ck.check_manifest(&m.digest())?;
        let model = FusionModel::from_checkpoint(&ck, run.cfg.fusion.arch.clone())?;
        let preds = model.predict_samples(&val)?;
        let scores: Vec<(f64, bool)> = preds
            .iter()
            .zip(&val)
            .map(|(p, s)| {
                let score = match name {
                    "raw" => p.p_raw,
                    "refined" => p.p_refined,
                    _ => p.p_calcified,
                };
                (score, s.label == 1)
            })
            .collect();
        out.push((name, metrics::evaluate(&scores)?));
    }
    Ok(out)
}

pub fn eval(run: &Run) -> Result<Outcome, CliError> {
    stage("eval", (|| {
        let reports = evaluate(run)?;
        let dir = run.stage_dir("eval");
        fresh_dir(&dir)?;
        let refs: Vec<(&str, &EvalReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
        metrics::emit_comparison(&refs, &dir)?;
        let mut out = Outcome::new("eval");
        for (name, r) in &reports {
            let auc = r.auc.map_or("undefined".into(), |a| format!("{a:.4}"));
            out = out.note(format!("{name}: accuracy {:.4}, AUC {auc}", r.accuracy));
        }
        Ok(out.note(format!("reports in {}", dir.display())))
    })())
}

pub fn run_all(run: &Run) -> Result<Vec<Outcome>, CliError> {
    let mut out = vec![phantom_gen(run)?];
    if run.cfg.engine == Engine::Trained {
        out.push(train_inpaint(run)?);
    } else {
        out.push(Outcome::new("train-inpaint").note("classical engine selected, inpainter training skipped"));
    }
    out.push(extract(run)?);
    out.push(augment(run)?);
    out.push(train_fusion(run)?);
    out.push(eval(run)?);
    Ok(out)
}

pub fn replay(run: &Run, id: &str) -> Result<Outcome, CliError> {
    stage("replay", (|| {
        let m = run.require(run.stage_dir("augment"), "augmented pairs", "augment")?;
        if !replay_matches(&m, id)? {
            return Err(CliError::Core(calcifuse::Error::invalid(format!(
                "{id}: replayed transform differs from the stored images"
            ))));
        }
        Ok(Outcome::new("replay").note(format!("{id}: replay is byte-identical to the stored images")))
    })())
}
