//! Run configuration: a sectioned `key = value` file, environment
//! overrides (`CALCIFUSE_<SECTION>__<KEY>`), then command-line flags.

use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use calcifuse::augment::AugmentCfg;
use calcifuse::fusion::FusionTrainCfg;
use calcifuse::inpainter::{InpaintTrainCfg, RecDomain};
use calcifuse::manifest::MANIFEST_FILE;
use calcifuse::phantom::DatasetConfig;
use ini::Ini;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ENV_PREFIX: &str = "CALCIFUSE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Engine {
    /// Learned context-encoder inpainter (needs `train-inpaint`).
    #[default]
    Trained,
    /// Harmonic fill, no checkpoint required.
    Classical,
}

impl Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Trained => "trained",
            Engine::Classical => "classical",
        })
    }
}

impl FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trained" => Ok(Engine::Trained),
            "classical" => Ok(Engine::Classical),
            _ => Err(format!("expected `trained` or `classical`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Existing dataset directory; when unset `phantom-gen` renders one
    /// inside the run directory.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub phantom: DatasetConfig,
    pub inpainter: InpaintTrainCfg,
    pub engine: Engine,
    pub debug_stages: bool,
    /// `augment.factor = 0` disables augmentation.
    pub augment: AugmentCfg,
    pub fusion: FusionTrainCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: None,
            out: PathBuf::from("runs"),
            phantom: DatasetConfig::default(),
            inpainter: InpaintTrainCfg::default(),
            engine: Engine::default(),
            debug_stages: false,
            augment: AugmentCfg::default(),
            fusion: FusionTrainCfg::default(),
        }
    }
}

/// Flag values that override the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub engine: Option<Engine>,
    pub debug_stages: bool,
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

struct Field {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.trim().parse().map_err(|e| format!("`{s}`: {e}"))
}

fn pair<T: FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: Display,
{
    match s.split(',').collect::<Vec<_>>()[..] {
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("expected `low, high`, got `{s}`")),
    }
}

fn show_pair<T: Display>(p: &(T, T)) -> String {
    format!("{}, {}", p.0, p.1)
}

fn flag(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

macro_rules! field {
    ($sec:literal, $key:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Field {
            section: $sec,
            key: $key,
            get: |$c| $get,
            set: |$m, $v| {
                $set;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("", "seed", |c| c.seed.to_string(), |c, v| c.seed = num(v)?),
        field!("paths", "data", |c| c.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(), |c, v| {
            c.data = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
        }),
        field!("paths", "out", |c| c.out.display().to_string(), |c, v| c.out = PathBuf::from(v.trim())),
        field!("phantom", "n_normal", |c| c.phantom.n_normal.to_string(), |c, v| c.phantom.n_normal = num(v)?),
        field!("phantom", "n_calcified", |c| c.phantom.n_calcified.to_string(), |c, v| c.phantom.n_calcified = num(v)?),
        field!("phantom", "n_noncalcified", |c| c.phantom.n_noncalcified.to_string(), |c, v| c.phantom.n_noncalcified = num(v)?),
        field!("phantom", "val_fraction", |c| c.phantom.val_fraction.to_string(), |c, v| c.phantom.val_fraction = num(v)?),
        field!("phantom", "patch_size", |c| c.phantom.ranges.patch_size.to_string(), |c, v| c.phantom.ranges.patch_size = num(v)?),
        field!("phantom", "background", |c| show_pair(&c.phantom.ranges.background), |c, v| c.phantom.ranges.background = pair(v)?),
        field!("phantom", "rib_count", |c| show_pair(&c.phantom.ranges.rib_count), |c, v| c.phantom.ranges.rib_count = pair(v)?),
        field!("phantom", "rib_contrast", |c| show_pair(&c.phantom.ranges.rib_contrast), |c, v| c.phantom.ranges.rib_contrast = pair(v)?),
        field!("phantom", "spine_probability", |c| c.phantom.ranges.spine_probability.to_string(), |c, v| {
            c.phantom.ranges.spine_probability = num(v)?
        }),
        field!("phantom", "noise_sigma", |c| c.phantom.ranges.noise_sigma.to_string(), |c, v| c.phantom.ranges.noise_sigma = num(v)?),
        field!("phantom", "radius", |c| show_pair(&c.phantom.ranges.radius), |c, v| c.phantom.ranges.radius = pair(v)?),
        field!("phantom", "contrast", |c| show_pair(&c.phantom.ranges.contrast), |c, v| c.phantom.ranges.contrast = pair(v)?),
        field!("phantom", "gain", |c| show_pair(&c.phantom.ranges.gain), |c, v| c.phantom.ranges.gain = pair(v)?),
        field!("phantom", "center_jitter", |c| c.phantom.ranges.center_jitter.to_string(), |c, v| c.phantom.ranges.center_jitter = num(v)?),
        field!("inpainter", "lambda_rec", |c| c.inpainter.weights.lambda_rec.to_string(), |c, v| c.inpainter.weights.lambda_rec = num(v)?),
        field!("inpainter", "lambda_adv", |c| c.inpainter.weights.lambda_adv.to_string(), |c, v| c.inpainter.weights.lambda_adv = num(v)?),
        field!("inpainter", "rec_domain", |c| match c.inpainter.rec_domain {
            RecDomain::Hole => "hole".to_string(),
            RecDomain::Full => "full".to_string(),
        }, |c, v| {
            c.inpainter.rec_domain = match v.trim() {
                "hole" => RecDomain::Hole,
                "full" => RecDomain::Full,
                _ => return Err(format!("expected `hole` or `full`, got `{v}`")),
            }
        }),
        field!("inpainter", "mask_fraction", |c| c.inpainter.mask_fraction.to_string(), |c, v| c.inpainter.mask_fraction = num(v)?),
        field!("inpainter", "iterations", |c| c.inpainter.iterations.to_string(), |c, v| c.inpainter.iterations = num(v)?),
        field!("inpainter", "batch", |c| c.inpainter.batch.to_string(), |c, v| c.inpainter.batch = num(v)?),
        field!("inpainter", "lr", |c| c.inpainter.lr.to_string(), |c, v| c.inpainter.lr = num(v)?),
        field!("inpainter", "beta1", |c| c.inpainter.beta1.to_string(), |c, v| c.inpainter.beta1 = num(v)?),
        field!("inpainter", "val_every", |c| c.inpainter.val_every.to_string(), |c, v| c.inpainter.val_every = num(v)?),
        field!("inpainter", "val_limit", |c| c.inpainter.val_limit.to_string(), |c, v| c.inpainter.val_limit = num(v)?),
        field!("extract", "engine", |c| c.engine.to_string(), |c, v| c.engine = v.trim().parse()?),
        field!("extract", "debug_stages", |c| c.debug_stages.to_string(), |c, v| c.debug_stages = flag(v)?),
        field!("augment", "factor", |c| c.augment.factor.to_string(), |c, v| c.augment.factor = num(v)?),
        field!("augment", "stratify", |c| c.augment.stratify.to_string(), |c, v| c.augment.stratify = flag(v)?),
        field!("augment", "max_shift", |c| c.augment.ranges.max_shift.to_string(), |c, v| c.augment.ranges.max_shift = num(v)?),
        field!("augment", "max_angle", |c| c.augment.ranges.max_angle.to_string(), |c, v| c.augment.ranges.max_angle = num(v)?),
        field!("augment", "aspect", |c| show_pair(&c.augment.ranges.aspect), |c, v| c.augment.ranges.aspect = pair(v)?),
        field!("augment", "scale", |c| show_pair(&c.augment.ranges.scale), |c, v| c.augment.ranges.scale = pair(v)?),
        field!("augment", "hflip_p", |c| c.augment.ranges.hflip_p.to_string(), |c, v| c.augment.ranges.hflip_p = num(v)?),
        field!("fusion", "epochs", |c| c.fusion.epochs.to_string(), |c, v| c.fusion.epochs = num(v)?),
        field!("fusion", "batch", |c| c.fusion.batch.to_string(), |c, v| c.fusion.batch = num(v)?),
        field!("fusion", "lr", |c| c.fusion.lr.to_string(), |c, v| c.fusion.lr = num(v)?),
        field!("fusion", "joint", |c| c.fusion.joint.to_string(), |c, v| c.fusion.joint = flag(v)?),
        field!("fusion", "hidden", |c| c.fusion.arch.hidden.unwrap_or(0).to_string(), |c, v| {
            c.fusion.arch.hidden = Some(num::<usize>(v)?).filter(|&h| h > 0)
        }),
        field!("fusion", "widths", |c| c.fusion.arch.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(", "), |c, v| {
            c.fusion.arch.widths = v.split(',').map(num).collect::<Result<_, _>>()?
        }),
    ]
}

fn path_of(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Set one field by section and key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let f = fields()
            .into_iter()
            .find(|f| f.section == section && f.key == key)
            .ok_or_else(|| config_err(path_of(section, key), "unknown key"))?;
        (f.set)(self, value).map_err(|m| config_err(path_of(section, key), m))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err("<file>", e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                cfg.set(section.unwrap_or(""), k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Apply `CALCIFUSE_<SECTION>__<KEY>` (or `CALCIFUSE_<KEY>` for
    /// top-level keys) overrides.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.as_ref().starts_with(ENV_PREFIX))
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        vars.sort();
        for (name, value) in vars {
            let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
            let (section, key) = rest.split_once("__").unwrap_or(("", &rest));
            self.set(section, key, &value).map_err(|e| match e {
                CliError::Config { field, message } => config_err(format!("{field} (from {name})"), message),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(e) = o.engine {
            self.engine = e;
        }
        if o.debug_stages {
            self.debug_stages = true;
        }
    }

    /// Defaults, then `file`, then environment, then flags; seeds and
    /// input sizes are propagated and the result validated.
    pub fn load<I, K, V>(file: Option<&Path>, env: I, flags: &Overrides) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err("--config", format!("{}: {e}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env(env)?;
        cfg.apply_overrides(flags);
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy the master seed and the patch size into every stage config.
    pub fn propagate(&mut self) {
        let size = self.phantom.ranges.patch_size;
        self.phantom.seed = self.seed;
        self.inpainter.seed = self.seed;
        self.inpainter.arch.size = size;
        self.augment.seed = self.seed;
        self.fusion.seed = self.seed;
        self.fusion.arch.size = size;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let w = &self.inpainter.weights;
        if !(w.lambda_rec >= 0.0 && w.lambda_adv >= 0.0) {
            return Err(config_err("inpainter.lambda_rec, inpainter.lambda_adv", "weights must be non-negative"));
        }
        if !((w.lambda_rec + w.lambda_adv) - 1.0).abs().le(&1e-9) {
            return Err(config_err(
                "inpainter.lambda_rec, inpainter.lambda_adv",
                format!("lambda_rec + lambda_adv = {} but must equal 1", w.lambda_rec + w.lambda_adv),
            ));
        }
        if !(0.0..1.0).contains(&self.phantom.val_fraction) {
            return Err(config_err("phantom.val_fraction", "must lie in [0, 1)"));
        }
        self.phantom.ranges.validate().map_err(|e| config_err("phantom", e.to_string()))?;
        if !(self.inpainter.mask_fraction > 0.0 && self.inpainter.mask_fraction < 1.0) {
            return Err(config_err("inpainter.mask_fraction", "must lie in (0, 1)"));
        }
        self.inpainter.validate().map_err(|e| config_err("inpainter", e.to_string()))?;
        self.augment.ranges.validate().map_err(|e| config_err("augment", e.to_string()))?;
        for (field, v) in [("fusion.epochs", self.fusion.epochs), ("fusion.batch", self.fusion.batch)] {
            if v == 0 {
                return Err(config_err(field, "must be at least 1"));
            }
        }
        if !(self.fusion.lr > 0.0 && self.fusion.lr.is_finite()) {
            return Err(config_err("fusion.lr", "must be positive"));
        }
        self.fusion.arch.validate().map_err(|e| config_err("fusion.widths", e.to_string()))?;
        if let Some(d) = &self.data {
            if !d.join(MANIFEST_FILE).is_file() {
                return Err(config_err("paths.data", format!("{} has no {MANIFEST_FILE}", d.display())));
            }
        }
        Ok(())
    }

    fn render(&self, include_out: bool) -> String {
        let mut s = String::new();
        let mut current = "";
        for f in fields() {
            if f.section == "paths" && f.key == "out" && !include_out {
                continue;
            }
            if f.section != current {
                let _ = writeln!(s, "\n[{}]", f.section);
                current = f.section;
            }
            let _ = writeln!(s, "{} = {}", f.key, (f.get)(self));
        }
        s
    }

    /// Every field in canonical order; parses back to the same config.
    pub fn snapshot(&self) -> String {
        self.render(true)
    }

    /// Content address of the run: digest of the snapshot (minus the
    /// output root) and the code version.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("calcifuse {}\n", env!("CARGO_PKG_VERSION")));
        h.update(self.render(false));
        hex::encode(h.finalize())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_ENV: [(&str, &str); 0] = [];

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig {
            seed: 7,
            engine: Engine::Classical,
            data: Some("some/where".into()),
            ..Default::default()
        };
        c.fusion.arch.hidden = Some(16);
        c.phantom.ranges.gain = (0.1, 0.2);
        let back = RunConfig::parse(&c.snapshot()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.snapshot(), c.snapshot());
    }

    #[test]
    fn sections_env_and_flags_layer_in_order() {
        let text = "seed = 3\n[fusion]\nepochs = 5\nlr = 0.01\n[extract]\nengine = classical\n";
        let mut c = RunConfig::parse(text).unwrap();
        assert_eq!((c.seed, c.fusion.epochs, c.engine), (3, 5, Engine::Classical));
        c.apply_env([("CALCIFUSE_FUSION__EPOCHS", "9"), ("CALCIFUSE_SEED", "4"), ("HOME", "x")]).unwrap();
        assert_eq!((c.seed, c.fusion.epochs), (4, 9));
        c.apply_overrides(&Overrides {
            seed: Some(11),
            engine: Some(Engine::Trained),
            ..Default::default()
        });
        assert_eq!((c.seed, c.engine), (11, Engine::Trained));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("[fusion]\nepochs = many\n").unwrap_err();
        assert!(e.to_string().contains("fusion.epochs"), "{e}");
        let e = RunConfig::parse("[fusion]\nmomentum = 1\n").unwrap_err();
        assert!(e.to_string().contains("fusion.momentum"), "{e}");
        let e = RunConfig::default().apply_env([("CALCIFUSE_AUGMENT__FACTOR", "-1")]).unwrap_err();
        assert!(e.to_string().contains("CALCIFUSE_AUGMENT__FACTOR"), "{e}");
    }

    #[test]
    fn loss_weights_must_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "[inpainter]\nlambda_rec = 0.9\nlambda_adv = 0.2\n").unwrap();
        let e = RunConfig::load(Some(&p), NO_ENV, &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("inpainter.lambda_rec"), "{e}");
        std::fs::write(&p, "[inpainter]\nlambda_rec = 0.75\nlambda_adv = 0.25\n").unwrap();
        assert!(RunConfig::load(Some(&p), NO_ENV, &Overrides::default()).is_ok());
    }

    #[test]
    fn run_id_tracks_content_not_output_root() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::default();
        c.fusion.lr = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("fusion.lr"));
        let mut c = RunConfig::default();
        c.augment.ranges.max_angle = 45.0;
        assert!(c.validate().unwrap_err().to_string().contains("augment"));
        let c = RunConfig {
            data: Some("/nonexistent".into()),
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("paths.data"));
    }
}
