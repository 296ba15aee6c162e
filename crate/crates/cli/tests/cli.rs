use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use calcifuse_cli::{execute, Cli, CliError};
use clap::Parser;

const TINY: &str = "seed = 1
[phantom]
n_normal = 24
n_calcified = 10
n_noncalcified = 10
[inpainter]
iterations = 4
batch = 4
val_every = 2
val_limit = 4
[augment]
factor = 1
[fusion]
epochs = 2
batch = 8
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(cfg: &str) -> Env {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), cfg).unwrap();
        Env { dir }
    }

    fn args(&self, extra: &[&str]) -> Vec<String> {
        let mut v = vec![
            "calcifuse".to_string(),
            "--config".into(),
            self.dir.path().join("run.cfg").display().to_string(),
            "--out".into(),
            self.dir.path().join("runs").display().to_string(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    fn run(&self, extra: &[&str]) -> Result<(calcifuse_cli::Run, Vec<calcifuse_cli::Outcome>), CliError> {
        let cli = Cli::try_parse_from(self.args(extra)).unwrap();
        execute(&cli, Vec::<(String, String)>::new())
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stages_report_the_missing_upstream_command() {
    let env = Env::new(TINY);
    let e = env.run(&["extract", "--engine", "classical"]).unwrap_err();
    assert!(e.to_string().contains("calcifuse phantom-gen"), "{e}");
    env.run(&["phantom-gen", "--engine", "classical"]).unwrap();
    let e = env.run(&["train-fusion", "--engine", "classical"]).unwrap_err();
    assert!(e.to_string().contains("calcifuse extract"), "{e}");
    let e = env.run(&["eval", "--engine", "classical"]).unwrap_err();
    assert!(e.to_string().contains("calcifuse extract"), "{e}");
    let e = env.run(&["replay", "--id", "x", "--engine", "classical"]).unwrap_err();
    assert!(e.to_string().contains("calcifuse augment"), "{e}");
}

#[test]
fn classical_extraction_needs_no_checkpoint_but_trained_does() {
    let env = Env::new(TINY);
    env.run(&["phantom-gen"]).unwrap();
    let e = env.run(&["extract"]).unwrap_err();
    assert!(e.to_string().contains("calcifuse train-inpaint"), "{e}");

    env.run(&["phantom-gen", "--engine", "classical", "--debug-stages"]).unwrap();
    let (run, out) = env.run(&["extract", "--engine", "classical", "--debug-stages"]).unwrap();
    assert!(out[0].notes[0].contains("classical"));
    assert_eq!(fs::read_dir(run.dir.join("extract/refined")).unwrap().count(), 20);
    assert_eq!(fs::read_dir(run.dir.join("extract/debug")).unwrap().count(), 20);
}

#[test]
fn fusion_on_imbalanced_data_without_augmentation_warns_and_proceeds() {
    let env = Env::new(&TINY.replace("n_noncalcified = 10", "n_noncalcified = 30").replace("factor = 1", "factor = 0"));
    let (run, out) = env.run(&["run-all", "--engine", "classical"]).unwrap();
    let fusion = out.iter().find(|o| o.stage == "train-fusion").unwrap();
    assert_eq!(fusion.warnings.len(), 1);
    assert!(fusion.warnings[0].contains("calcifuse augment"), "{:?}", fusion.warnings);
    assert!(run.dir.join("eval/metrics.csv").is_file());
    assert!(!run.dir.join("augment").exists());

    let balanced = Env::new(&TINY.replace("factor = 1", "factor = 0"));
    let (_, out) = balanced.run(&["run-all", "--engine", "classical"]).unwrap();
    assert!(out.iter().all(|o| o.warnings.is_empty()));
}

#[test]
fn run_all_is_reproducible_from_its_snapshot() {
    let env = Env::new(TINY);
    let (run, outcomes) = env.run(&["run-all"]).unwrap();
    let stages: Vec<&str> = outcomes.iter().map(|o| o.stage).collect();
    assert_eq!(stages, ["phantom-gen", "train-inpaint", "extract", "augment", "train-fusion", "eval"]);
    for m in ["raw", "refined", "fusion"] {
        for f in ["metrics.csv", "roc.csv", "confusion.csv", "roc.png"] {
            assert!(run.dir.join("eval").join(m).join(f).is_file(), "{m}/{f}");
        }
    }
    assert!(run.dir.join("eval/roc_combined.png").is_file());
    let header = fs::read_to_string(run.dir.join("fusion/train_log.csv")).unwrap();
    assert!(header.starts_with("epoch,l_ce1,l_ce2,l_ce3,val_acc,val_auc\n"));
    let csvs = |dir: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        tree(&dir.join("eval"))
            .into_iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "csv"))
            .map(|(p, b)| (p.strip_prefix(dir).unwrap().to_path_buf(), b))
            .collect()
    };
    let first = csvs(&run.dir);

    let snap = Env::new(&fs::read_to_string(run.dir.join("config.snapshot")).unwrap());
    let (again, _) = snap.run(&["run-all"]).unwrap();
    assert_eq!(again.id, run.id);
    assert_eq!(csvs(&again.dir), first);

    let aug = tree(&run.dir.join("augment/augmented/images"));
    let id = aug[0].0.file_stem().unwrap().to_str().unwrap().to_string();
    let (_, out) = env.run(&["replay", "--id", &id]).unwrap();
    assert!(out[0].notes[0].contains("byte-identical"));
}

#[test]
fn runs_do_not_touch_each_other() {
    let env = Env::new(TINY);
    let (a, _) = env.run(&["phantom-gen", "--engine", "classical"]).unwrap();
    let before = tree(&a.dir);
    let (b, _) = env.run(&["phantom-gen", "--engine", "classical", "--seed", "2"]).unwrap();
    assert_ne!(a.dir, b.dir);
    assert_eq!(tree(&a.dir), before);
}

#[test]
fn environment_overrides_apply_and_change_the_run_id() {
    let env = Env::new(TINY);
    let cli = Cli::try_parse_from(env.args(&["show-config"])).unwrap();
    let (plain, _) = execute(&cli, Vec::<(String, String)>::new()).unwrap();
    let (over, _) = execute(&cli, [("CALCIFUSE_FUSION__EPOCHS", "5")]).unwrap();
    assert_eq!(over.cfg.fusion.epochs, 5);
    assert_ne!(plain.id, over.id);
    let snap = fs::read_to_string(over.dir.join("config.snapshot")).unwrap();
    assert!(snap.contains("epochs = 5"));
}

#[test]
fn binary_exit_codes_name_the_failure() {
    let env = Env::new(&TINY.replace("[inpainter]", "[inpainter]\nlambda_rec = 0.5\nlambda_adv = 0.6"));
    let out = Process::new(env!("CARGO_BIN_EXE_calcifuse")).args(&env.args(&["phantom-gen"])[1..]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inpainter.lambda_rec"));

    let env = Env::new(TINY);
    let out = Process::new(env!("CARGO_BIN_EXE_calcifuse")).args(&env.args(&["extract"])[1..]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phantom-gen"), "{err}");

    let out = Process::new(env!("CARGO_BIN_EXE_calcifuse"))
        .args(&env.args(&["phantom-gen"])[1..])
        .env("CALCIFUSE_PHANTOM__N_NORMAL", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 normal"));
}
