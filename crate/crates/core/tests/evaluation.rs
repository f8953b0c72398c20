mod common;

use std::collections::BTreeSet;

use aelayers_core::attack::{AttackKind, AttackSpec};
use aelayers_core::csvio::Table;
use aelayers_core::eval::{
    adversarial_manifest, build_detection_dataset, h1_statistic, h2_profile, kde2d_grid, kde_to_table, scores_table,
    split_10_90, trajectories_from_table, trajectories_to_table, uniform_noise, Grid2, TrajectoryRecord,
};
use aelayers_core::features::{extract_feature_set, Provenance};
use aelayers_core::net::Classifier;
use aelayers_core::studies::trajectories;
use aelayers_detect::auroc;

#[test]
fn class_counts_replay_the_filter() {
    let (net, _) = common::toy_net();
    let test = common::toy_data(15, 31);
    let spec = AttackSpec::defaults(AttackKind::Fgsm, 0.15);
    let (ds, adv) = build_detection_dataset(&net, &test.images, &test.labels, &spec, 0.15, 5).unwrap();

    let noisy = uniform_noise(&test.images, 0.15, 5).unwrap();
    let (pc, pn, pa) = (net.predict(&test.images).unwrap(), net.predict(&noisy).unwrap(), net.predict(&adv.perturbed).unwrap());
    let mut expected = (0, 0);
    for i in 0..test.len() {
        let y = test.labels[i];
        expected.0 += usize::from(pc[i] == y) + usize::from(pn[i] == y);
        expected.1 += usize::from(pa[i] != y);
    }
    assert_eq!(ds.counts(), expected);

    let pred = net.predict(&ds.inputs).unwrap();
    for (s, p) in ds.samples.iter().zip(&pred) {
        let y = test.labels[s.test_index];
        match s.provenance {
            Provenance::Adversarial => assert!(*p != y && s.class == 1),
            _ => assert!(*p == y && s.class == 0),
        }
    }
    let (again, _) = build_detection_dataset(&net, &test.images, &test.labels, &spec, 0.15, 5).unwrap();
    assert_eq!(again, ds);

    let (quiet, _) = build_detection_dataset(&net, &test.images, &test.labels, &spec, 0.0, 5).unwrap();
    for s in quiet.samples.iter().filter(|s| s.provenance == Provenance::Noisy) {
        let i = quiet.samples.iter().position(|t| t.id == s.id).unwrap();
        assert_eq!(quiet.inputs.sample(i), test.images.sample(s.test_index));
    }
}

#[test]
fn split_is_a_stratified_partition() {
    for (n0, n1, seed) in [(100, 100, 1), (5, 5, 2), (37, 12, 3), (2, 91, 4)] {
        let classes: Vec<u8> = (0..n0 + n1).map(|i| u8::from(i >= n0)).collect();
        let (train, eval) = split_10_90(&classes, seed).unwrap();
        let a: BTreeSet<usize> = train.iter().copied().collect();
        let b: BTreeSet<usize> = eval.iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).copied().collect::<Vec<_>>(), (0..n0 + n1).collect::<Vec<_>>());
        let count = |set: &[usize], c| set.iter().filter(|&&i| classes[i] == c).count();
        assert_eq!(count(&train, 0), n0.div_ceil(10));
        assert_eq!(count(&train, 1), n1.div_ceil(10));
    }
}

#[test]
fn auroc_ignores_increasing_transforms() {
    let mut state = 3u64;
    for _ in 0..50 {
        let n = 30;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            scores.push(((u * 8.0).floor() / 4.0) - 1.0);
            labels.push(u8::from(i % 3 == 0));
        }
        let base = auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
        assert_eq!(auroc(&exp, &labels).unwrap(), base);
        assert_eq!(auroc(&affine, &labels).unwrap(), base);
    }
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.4; 6], &[0, 1, 0, 1, 0, 1]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
}

#[test]
fn kde_symmetry_and_mass() {
    let grid = Grid2 { x0: -5.0, x1: 5.0, nx: 80, y0: -4.0, y1: 4.0, ny: 64 };
    let d = kde2d_grid(&[(-1.0, 0.0), (1.0, 0.0)], (0.5, 0.7), &grid).unwrap();
    for row in &d {
        for i in 0..grid.nx {
            assert!((row[i] - row[grid.nx - 1 - i]).abs() <= 1e-12 * row[i].max(1e-300));
        }
    }
    for j in 0..grid.ny {
        assert!((d[j][10] - d[grid.ny - 1 - j][10]).abs() <= 1e-12);
    }
    let mass: f64 = d.iter().flatten().sum::<f64>() * grid.cell_area();
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    assert!(kde2d_grid(&[(0.0, 0.0)], (0.0, 1.0), &grid).is_err());
}

#[test]
fn trajectories_start_at_clean_features_and_round_trip() {
    let (net, train) = common::toy_net();
    let bank = common::toy_bank(&net, &train, 2, None);
    let test = common::toy_data(3, 41);
    let ids: Vec<u64> = (0..test.len() as u64).map(|i| 100 + i).collect();
    let spec = AttackSpec::defaults(AttackKind::Bim, 0.1);
    let recs = trajectories(&net, &bank, &test.images, &test.labels, &ids, &spec, 0.1, 4).unwrap();
    assert_eq!(recs.len(), test.len());
    let clean = extract_feature_set(&net, &bank, &test.images, ids.clone(), vec![Provenance::Clean; test.len()]).unwrap();
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.epsilons[0], 0.0);
        assert_eq!(r.epsilons.len(), 4);
        for t in 0..r.taps.len() {
            assert_eq!(r.rec_err[0][t], clean.outputs[t].rec_err[i]);
            assert_eq!(r.lat_norm[0][t], clean.outputs[t].lat_norm[i]);
        }
    }
    let back = trajectories_from_table(&Table::from_bytes(&trajectories_to_table(&recs).to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back, recs);
    assert_eq!(h1_statistic(&recs).len(), 4);
}

#[test]
fn h1_on_constructed_trajectories() {
    let rec = |rec: Vec<f64>, lat: Vec<f64>| TrajectoryRecord {
        sample_id: 0,
        attack: AttackKind::Bim,
        epsilons: (0..rec.len()).map(|i| i as f64).collect(),
        taps: vec!["t".into()],
        rec_err: rec.into_iter().map(|v| vec![v]).collect(),
        lat_norm: lat.into_iter().map(|v| vec![v]).collect(),
    };
    assert_eq!(h1_statistic(&[rec(vec![2.0], vec![3.0])]), vec![0.0]);
    assert!(h1_statistic(&[rec(vec![1.0, 2.0, 4.0], vec![3.0, 3.0, 3.0])])[0] > 0.0);
}

#[test]
fn h2_profile_is_direction_free() {
    let classes = [0, 0, 1, 1];
    let rec = vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]];
    let lat = vec![vec![0.0; 4], vec![0.0; 4]];
    assert_eq!(h2_profile(&rec, &lat, &classes).unwrap(), vec![1.0, 1.0]);
}

#[test]
fn report_tables_round_trip() {
    let (net, _) = common::toy_net();
    let test = common::toy_data(3, 51);
    let (_, adv) = build_detection_dataset(&net, &test.images, &test.labels, &AttackSpec::defaults(AttackKind::Fgsm, 0.3), 0.3, 1).unwrap();
    let grid = Grid2 { x0: 0.0, x1: 1.0, nx: 5, y0: 0.0, y1: 2.0, ny: 3 };
    let tables = [
        adversarial_manifest(&adv),
        scores_table(&[3, 4, 5], &[0.1, 1.0 / 3.0, -2.5e-9], &[0, 1, 1]),
        kde_to_table(&kde2d_grid(&[(0.3, 0.7)], (0.1, 0.2), &grid).unwrap(), &grid),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, t) in tables.iter().enumerate() {
        let path = dir.path().join(format!("{i}.csv"));
        t.write(&path).unwrap();
        assert_eq!(&Table::read(&path).unwrap(), t);
    }
    let m = &tables[0];
    let linf = m.column("linf").unwrap();
    for (row, l) in m.rows.iter().zip(&adv.linf) {
        assert_eq!(row[linf].parse::<f32>().unwrap(), *l);
    }
}
