use calcifuse::augment::*;
use calcifuse::extraction::{batch_extract, BatchOptions, Classical};
use calcifuse::imaging::{self, Image, Mask};
use calcifuse::manifest::{Label, Manifest, Split};
use calcifuse::phantom::{build_dataset, DatasetConfig};
use calcifuse::rng;

#[test]
fn sampling_statistics_and_bounds() {
    let mut r = rng::rng(77);
    let full = TransformRanges::default();
    let recs: Vec<TransformRecord> = (0..10_000).map(|_| sample_transform(&mut r)).collect();
    let flips = recs.iter().filter(|t| t.hflip).count() as f64 / 1e4;
    assert!((0.47..=0.53).contains(&flips), "{flips}");
    assert!(recs.iter().all(|t| t.within(&full)));
    assert!(recs.iter().all(|t| (-18.0..=18.0).contains(&t.angle)));
    assert!(recs.iter().any(|t| t.dx < -24) && recs.iter().any(|t| t.dx > 24));
    assert_eq!(sample_transform(&mut rng::rng(3)), sample_transform(&mut rng::rng(3)));
    let t = recs[17];
    assert_eq!(sample_from_seed(t.seed, &full, None), t);
}

fn extracted(dir: &std::path::Path) -> Manifest {
    let cfg = DatasetConfig {
        n_normal: 2,
        n_calcified: 15,
        n_noncalcified: 5,
        seed: 12,
        val_fraction: 0.2,
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir.join("data")).unwrap();
    let r = batch_extract(&m, &Classical, &dir.join("extract"), BatchOptions::default()).unwrap();
    r.manifest.save().unwrap();
    r.manifest
}

fn centroid(img: &Image) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.get(x, y).max(0.0);
            sx += v * x as f64;
            sy += v * y as f64;
            s += v;
        }
    }
    (s > 0.0).then(|| (sx / s, sy / s))
}

fn support(img: &Image) -> Mask {
    Mask::from_image(img, 0.5 / 65535.0)
}

fn contains(outer: &Mask, inner: &Mask) -> bool {
    outer.bits().iter().zip(inner.bits()).all(|(&o, &i)| o || !i)
}

#[test]
fn augmented_pairs_are_bounded_replayable_and_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let m = extracted(dir.path());
    let ranges = TransformRanges {
        max_shift: 16,
        ..Default::default()
    };
    let cfg = AugmentCfg {
        factor: 4,
        ranges,
        stratify: true,
        seed: 9,
    };
    let out = dir.path().join("aug");
    let rep = augment_calcified(&m, &cfg, &out).unwrap();
    let n_src = m.iter_where(Split::Train, &[Label::Calcified]).count();
    assert_eq!(n_src, 12);
    assert_eq!(rep.added, 4 * n_src);
    assert!(rep.skipped.is_empty());
    assert_eq!(rep.manifest.len(), m.len() + rep.added);
    rep.manifest.save().unwrap();
    let reloaded = Manifest::load(&out).unwrap();
    assert_eq!(reloaded.rows, rep.manifest.rows);

    let mut aligned_checks = 0;
    for row in reloaded.rows.iter().filter(|r| r.transform.is_some()) {
        let t = row.transform.unwrap();
        assert!(t.within(&ranges) && t.within(&TransformRanges::default()));
        assert!(replay_matches(&reloaded, &row.id).unwrap(), "{}", row.id);
        assert_eq!(row.split, Split::Train);
        assert_eq!(row.label, Label::Calcified);

        let src = reloaded.rows.iter().find(|r| Some(&r.id) == row.source.as_ref()).unwrap();
        let refined = imaging::load(reloaded.resolve(src.refined.as_ref().unwrap())).unwrap();
        let aug_refined = imaging::load(reloaded.resolve(row.refined.as_ref().unwrap())).unwrap();
        let raw = imaging::load(reloaded.resolve(&src.image)).unwrap();
        let clean = imaging::load(reloaded.resolve(src.clean.as_ref().unwrap())).unwrap();
        let residue = imaging::subtract(&apply(&raw, &t).unwrap(), &apply(&clean, &t).unwrap()).unwrap();
        let size = raw.width() as f64;
        let g = row.nodule.unwrap();
        let inside = g.cx - 1.2 * g.radius >= 0.0
            && g.cy - 1.2 * g.radius >= 0.0
            && g.cx + 1.2 * g.radius <= size - 1.0
            && g.cy + 1.2 * g.radius <= size - 1.0;
        if inside {
            let (rx, ry) = centroid(&residue).unwrap();
            assert!((rx - g.cx).hypot(ry - g.cy) <= 2.0, "{}: raw nodule at ({rx},{ry}) vs ({},{})", row.id, g.cx, g.cy);
            if let (Some(c0), Some((ax, ay))) = (centroid(&refined), centroid(&aug_refined)) {
                let (ex, ey) = t.forward_point(c0.0, c0.1, raw.width());
                assert!((ax - ex).hypot(ay - ey) <= 2.0, "{}", row.id);
                assert!((ax - rx).hypot(ay - ry) <= 2.0 + 2.0 * g.radius, "{}", row.id);
            }
            aligned_checks += 1;
        }

        let mask = Mask::from_image(&imaging::load(reloaded.resolve(src.mask.as_ref().unwrap())).unwrap(), 0.5);
        let aug_mask = Mask::from_image(&imaging::load(reloaded.resolve(row.mask.as_ref().unwrap())).unwrap(), 0.5);
        assert_eq!(aug_mask, Mask::from_image(&apply(&mask.to_image(), &t).unwrap(), 0.5));
        // every stage is a positive linear operator, so containment of the
        // refined support in a dilated mask survives the transform exactly
        let s0 = support(&refined);
        let d = (0..64).find(|&d| contains(&mask.dilate(d), &s0)).unwrap();
        let grown = support(&apply(&mask.dilate(d).to_image(), &t).unwrap());
        assert!(contains(&grown, &support(&apply(&refined, &t).unwrap())), "{} (d={d})", row.id);
        assert!(contains(&grown, &support(&aug_refined)), "{} (d={d})", row.id);
    }
    assert!(aligned_checks >= 24, "{aligned_checks}");
}

#[test]
fn identity_ranges_with_factor_one_copy_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = extracted(dir.path());
    let cfg = AugmentCfg {
        factor: 1,
        ranges: TransformRanges {
            max_shift: 0,
            max_angle: 0.0,
            aspect: (1.0, 1.0),
            scale: (1.0, 1.0),
            hflip_p: 0.0,
        },
        stratify: false,
        seed: 1,
    };
    let out = dir.path().join("aug");
    let rep = augment_calcified(&m, &cfg, &out).unwrap();
    for row in rep.manifest.rows.iter().filter(|r| r.source.is_some()) {
        let src = rep.manifest.rows.iter().find(|r| Some(&r.id) == row.source.as_ref()).unwrap();
        for (a, b) in [(&row.image, &src.image), (row.refined.as_ref().unwrap(), src.refined.as_ref().unwrap())] {
            assert_eq!(
                std::fs::read(rep.manifest.resolve(a)).unwrap(),
                std::fs::read(rep.manifest.resolve(b)).unwrap()
            );
        }
    }
    assert!(augment_calcified(&m, &AugmentCfg { factor: 0, ..cfg }, &out).is_err());
}

#[test]
fn rows_without_refined_images_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = extracted(dir.path());
    let victim = m.iter_where(Split::Train, &[Label::Calcified]).next().unwrap().id.clone();
    m.rows.iter_mut().find(|r| r.id == victim).unwrap().refined = None;
    let rep = augment_calcified(&m, &AugmentCfg::default(), &dir.path().join("aug")).unwrap();
    assert_eq!(rep.skipped.len(), 1);
    assert_eq!(rep.skipped[0].0, victim);
    assert_eq!(rep.added, 4 * 11);
    assert!(replay(&rep.manifest, &victim).is_err());
}
