use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use trivoxel::metrics::{confusion_matrix, geometric_scores, semantic_miou};
use trivoxel::oracle::{confusion_miou, count_geometric_iou};
use trivoxel::pipeline::{decode_volume, encode_volume, read_volume, write_volume};
use trivoxel::rng::seeded;
use trivoxel::volume::{LabelVolume, IGNORE_LABEL};

fn labels(seed: u64, dims: [usize; 3], n: usize, ignore: f64) -> LabelVolume {
    let mut rng = seeded(seed);
    let len = dims.iter().product();
    let data = (0..len)
        .map(|_| {
            if rng.random_bool(ignore) {
                IGNORE_LABEL
            } else {
                rng.random_range(0..=n) as u8
            }
        })
        .collect();
    LabelVolume::from_parts(dims, data).unwrap()
}

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    [1usize..=6, 1usize..=6, 1usize..=6]
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn scores_match_brute_force(seed in any::<u64>(), dims in dims_strategy(), n in 1usize..6) {
        let pred = labels(seed, dims, n, 0.05);
        let gt = labels(seed ^ 1, dims, n, 0.05);
        let geo = geometric_scores(&pred, &gt).unwrap();
        prop_assert!((geo.iou - count_geometric_iou(&pred, &gt)).abs() <= 1e-12);
        let sem = semantic_miou(&pred, &gt, n).unwrap();
        let (per_class, miou) = confusion_miou(&pred, &gt, n);
        prop_assert!((sem.miou - miou).abs() <= 1e-12);
        for (a, b) in sem.per_class.iter().zip(&per_class) {
            prop_assert!(close(*a, *b));
        }
    }

    #[test]
    fn scores_are_bounded(seed in any::<u64>(), dims in dims_strategy(), n in 1usize..6) {
        let pred = labels(seed, dims, n, 0.1);
        let gt = labels(seed ^ 2, dims, n, 0.1);
        let geo = geometric_scores(&pred, &gt).unwrap();
        for s in [geo.iou, geo.precision, geo.recall] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let sem = semantic_miou(&pred, &gt, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&sem.miou));
        prop_assert!(sem.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn geometric_scores_are_symmetric(seed in any::<u64>(), dims in dims_strategy()) {
        let a = labels(seed, dims, 3, 0.05);
        let b = labels(seed ^ 3, dims, 3, 0.05);
        let ab = geometric_scores(&a, &b).unwrap();
        let ba = geometric_scores(&b, &a).unwrap();
        prop_assert_eq!(ab.iou, ba.iou);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert_eq!(semantic_miou(&a, &b, 3).unwrap().miou, semantic_miou(&b, &a, 3).unwrap().miou);
    }

    #[test]
    fn voxel_permutation_leaves_scores_unchanged(seed in any::<u64>(), dims in dims_strategy(), n in 1usize..5) {
        let pred = labels(seed, dims, n, 0.05);
        let gt = labels(seed ^ 4, dims, n, 0.05);
        let mut order: Vec<usize> = (0..pred.data().len()).collect();
        order.shuffle(&mut seeded(seed ^ 5));
        let shuffle = |v: &LabelVolume| LabelVolume::from_parts(dims, order.iter().map(|&i| v.data()[i]).collect()).unwrap();
        let (p2, g2) = (shuffle(&pred), shuffle(&gt));
        prop_assert_eq!(geometric_scores(&pred, &gt).unwrap(), geometric_scores(&p2, &g2).unwrap());
        prop_assert_eq!(semantic_miou(&pred, &gt, n).unwrap(), semantic_miou(&p2, &g2, n).unwrap());
    }

    #[test]
    fn class_relabelling_permutes_per_class_scores(seed in any::<u64>(), dims in dims_strategy(), n in 2usize..6) {
        let pred = labels(seed, dims, n, 0.05);
        let gt = labels(seed ^ 6, dims, n, 0.05);
        let mut perm: Vec<u8> = (1..=n as u8).collect();
        perm.shuffle(&mut seeded(seed ^ 7));
        let relabel = |v: &LabelVolume| {
            let data = v.data().iter().map(|&l| if l == 0 || l == IGNORE_LABEL { l } else { perm[l as usize - 1] }).collect();
            LabelVolume::from_parts(dims, data).unwrap()
        };
        let before = semantic_miou(&pred, &gt, n).unwrap();
        let after = semantic_miou(&relabel(&pred), &relabel(&gt), n).unwrap();
        prop_assert!((before.miou - after.miou).abs() <= 1e-12);
        for c in 1..=n {
            prop_assert!(close(before.per_class[c - 1], after.per_class[perm[c - 1] as usize - 1]));
        }
        prop_assert_eq!(geometric_scores(&pred, &gt).unwrap(), geometric_scores(&relabel(&pred), &relabel(&gt)).unwrap());
    }

    #[test]
    fn self_comparison_is_perfect(seed in any::<u64>(), dims in dims_strategy(), n in 1usize..6) {
        let v = labels(seed, dims, n, 0.05);
        prop_assert_eq!(geometric_scores(&v, &v).unwrap().iou, 1.0);
        prop_assert_eq!(semantic_miou(&v, &v, n).unwrap().miou, 1.0);
    }

    #[test]
    fn volume_bytes_round_trip(seed in any::<u64>(), dims in dims_strategy(), n in 1usize..250) {
        let v = labels(seed, dims, n, 0.1);
        let bytes = encode_volume(&v).unwrap();
        prop_assert_eq!(bytes.len(), 16 + v.data().len());
        prop_assert_eq!(decode_volume(&bytes).unwrap(), v);
        prop_assert!(decode_volume(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn confusion_matrix_has_ground_truth_rows() {
    let pred = LabelVolume::from_parts([1, 1, 4], vec![1, 2, 2, IGNORE_LABEL]).unwrap();
    let gt = LabelVolume::from_parts([1, 1, 4], vec![1, 1, 0, 2]).unwrap();
    let m = confusion_matrix(&pred, &gt, 2).unwrap();
    assert_eq!(m, vec![vec![0, 0, 1], vec![0, 1, 1], vec![0, 0, 0]]);
}

#[test]
fn volume_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ovl");
    let v = labels(3, [4, 3, 2], 7, 0.0);
    write_volume(&path, &v).unwrap();
    assert_eq!(read_volume(&path).unwrap(), v);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"OVL1");
}
