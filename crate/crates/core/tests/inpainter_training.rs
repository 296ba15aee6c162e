use calcifuse::inpainter::*;
use calcifuse::manifest::Manifest;
use calcifuse::nn::checkpoint::Checkpoint;
use calcifuse::phantom::{build_dataset, DatasetConfig};
use calcifuse::Error;

fn normals(n: usize, dir: &std::path::Path) -> Manifest {
    let cfg = DatasetConfig {
        n_normal: n,
        n_calcified: 0,
        n_noncalcified: 0,
        seed: 5,
        ..Default::default()
    };
    build_dataset(&cfg, dir).unwrap()
}

#[test]
fn held_out_hole_mse_drops_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = normals(250, dir.path());
    let cfg = InpaintTrainCfg {
        iterations: 2000,
        val_every: 250,
        seed: 3,
        ..Default::default()
    };
    let trained = train_inpainter(&m, &cfg).unwrap();
    let curve = trained.validation_curve();
    let (first, last) = (curve[0], *curve.last().unwrap());
    assert_eq!(first.0, 0);
    assert_eq!(last.0, 2000);
    assert!(last.1 < first.1, "{curve:?}");
    for a in &curve {
        for b in &curve {
            if a.1 < b.1 {
                assert!(a.2 > b.2);
            }
        }
    }
    let csv = trained.log_csv();
    assert!(csv.starts_with("iteration,l_rec,l_adv,l_inpaint,val_mse,val_psnr\n"));
    assert_eq!(csv.lines().count(), 2002);
}

#[test]
fn reconstruction_only_leaves_discriminator_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = normals(20, dir.path());
    let cfg = InpaintTrainCfg {
        iterations: 5,
        batch: 4,
        weights: InpaintLossWeights::new(1.0, 0.0).unwrap(),
        ..Default::default()
    };
    let trained = train_inpainter(&m, &cfg).unwrap();
    assert_eq!(trained.discriminator, Discriminator::new(&cfg.arch, cfg.seed).unwrap());
    assert!(trained.log.iter().skip(1).all(|r| r.loss.unwrap().l_adv == 0.0));
    assert_ne!(trained.generator, InpaintNet::new(cfg.arch.clone(), cfg.seed).unwrap());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = normals(20, dir.path());
    let cfg = InpaintTrainCfg {
        iterations: 4,
        batch: 4,
        val_every: 2,
        ..Default::default()
    };
    let a = train_inpainter(&m, &cfg).unwrap();
    let b = train_inpainter(&m, &cfg).unwrap();
    assert_eq!(a, b);

    let path = dir.path().join("inpainter.ckpt");
    a.checkpoint(cfg.seed, &m.digest()).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    ck.check_manifest(&m.digest()).unwrap();
    assert!(matches!(ck.check_manifest("other"), Err(Error::StaleCheckpoint { .. })));
    assert_eq!(load_generator(&ck, &cfg.arch).unwrap(), a.generator);
}

#[test]
fn diverging_training_aborts_with_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let m = normals(20, dir.path());
    let cfg = InpaintTrainCfg {
        iterations: 50,
        batch: 4,
        lr: 1e38,
        ..Default::default()
    };
    match train_inpainter(&m, &cfg) {
        Err(Error::NonFinite { at, .. }) => assert!(at.starts_with("iteration ")),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|t| t.log.len())),
    }
}

#[test]
fn requires_normal_training_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_normal: 0,
        n_calcified: 2,
        n_noncalcified: 2,
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    assert!(train_inpainter(&m, &InpaintTrainCfg::default()).is_err());
}
