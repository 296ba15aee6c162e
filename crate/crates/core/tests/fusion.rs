use std::sync::OnceLock;

use calcifuse::extraction::{batch_extract, extract_refined, BatchOptions, Classical, DEFAULT_MASK_FRACTION};
use calcifuse::fusion::*;
use calcifuse::manifest::Split;
use calcifuse::phantom::{build_dataset, render, Calcification, DatasetConfig, PhantomRanges};
use calcifuse::Error;

struct Data {
    train: Vec<FusionSample>,
    val: Vec<FusionSample>,
    _dir: tempfile::TempDir,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_normal: 0,
            n_calcified: 600,
            n_noncalcified: 600,
            seed: 3,
            ..Default::default()
        };
        let m = build_dataset(&cfg, dir.path().join("data")).unwrap();
        let r = batch_extract(&m, &Classical, &dir.path().join("ext"), BatchOptions::default()).unwrap();
        assert!(r.failures.is_empty());
        Data {
            train: load_samples(&r.manifest, Split::Train, 64).unwrap(),
            val: load_samples(&r.manifest, Split::Val, 64).unwrap(),
            _dir: dir,
        }
    })
}

#[test]
fn untrained_model_is_at_chance() {
    let d = data();
    let m = FusionModel::new(FusionArch::default(), 17).unwrap();
    let (auc, ..) = validation_scores(&m, &d.val).unwrap();
    assert!((0.4..=0.6).contains(&auc), "untrained AUC {auc}");
}

#[test]
fn trained_model_flags_strong_diffuse_calcification() {
    let d = data();
    let cfg = FusionTrainCfg {
        epochs: 20,
        seed: 1,
        ..Default::default()
    };
    let run = train_fusion(&d.train, &d.val, &cfg).unwrap();
    assert_eq!(run.log.len(), 20);

    let ranges = PhantomRanges::default();
    let n = 50;
    let mut hits = 0;
    for s in 0..n {
        let mut spec = ranges.sample(90_000 + s, Some(Calcification::Diffuse));
        if let Some(nod) = spec.nodule.as_mut() {
            nod.gain = ranges.gain.1;
        }
        let (raw, _) = render(&spec).unwrap();
        let res = extract_refined(&raw, &Classical, DEFAULT_MASK_FRACTION).unwrap();
        let p = run.best.model.predict(&raw, &res.refined).unwrap();
        assert!((p.p_calcified + (1.0 - p.p_calcified) - 1.0).abs() < 1e-12);
        if p.p_calcified > 0.5 {
            hits += 1;
        }
    }
    assert!(hits * 10 >= n * 9, "{hits}/{n} diffuse patches flagged");
}

#[test]
fn divergence_aborts_naming_the_loss() {
    let d = data();
    let cfg = FusionTrainCfg {
        epochs: 2,
        lr: 1e30,
        ..Default::default()
    };
    match train_fusion(&d.train[..128], &d.val, &cfg) {
        Err(Error::NonFinite { what, .. }) => assert!(what.starts_with("l_ce"), "{what}"),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn samples_require_refined_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_normal: 2,
        n_calcified: 3,
        n_noncalcified: 3,
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    let err = load_samples(&m, Split::Train, 64).unwrap_err();
    assert!(err.to_string().contains("refined"), "{err}");
}
