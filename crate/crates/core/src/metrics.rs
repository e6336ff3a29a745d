//! Occupancy and semantic scores.
//!
//! A voxel takes part in scoring only if neither volume marks it with
//! [`IGNORE_LABEL`]. Occupied means label > 0.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, IGNORE_LABEL};

/// Binary occupancy counts and derived scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricScores {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    /// 1.0 when neither volume has an occupied voxel.
    pub iou: f64,
    /// 1.0 when nothing is predicted occupied.
    pub precision: f64,
    /// 1.0 when nothing is occupied in the ground truth.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    /// Entry `c - 1` is the IoU of class `c`; `None` when the class occurs in
    /// neither volume.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; 1.0 when no class is present.
    pub miou: f64,
}

fn check_dims(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn scored<'a>(pred: &'a LabelVolume, gt: &'a LabelVolume) -> impl Iterator<Item = (u8, u8)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p, g))
        .filter(|&(p, g)| p != IGNORE_LABEL && g != IGNORE_LABEL)
}

pub fn geometric_scores(pred: &LabelVolume, gt: &LabelVolume) -> Result<GeometricScores> {
    check_dims(pred, gt)?;
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (p, g) in scored(pred, gt) {
        match (p > 0, g > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok(GeometricScores {
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
        iou: ratio(tp, tp + fp + fneg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    })
}

pub fn geometric_iou(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    Ok(geometric_scores(pred, gt)?.iou)
}

/// `(N+1)×(N+1)` counts, row = ground truth, column = prediction.
pub fn confusion_matrix(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_dims(pred, gt)?;
    pred.validate(num_classes)?;
    gt.validate(num_classes)?;
    let mut m = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for (p, g) in scored(pred, gt) {
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn semantic_miou(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<SemanticScores> {
    let m = confusion_matrix(pred, gt, num_classes)?;
    let per_class: Vec<Option<f64>> = (1..=num_classes)
        .map(|c| {
            let tp = m[c][c];
            let gt_total: u64 = m[c].iter().sum();
            let pred_total: u64 = m.iter().map(|row| row[c]).sum();
            let union = gt_total + pred_total - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SemanticScores { per_class, miou })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: &[u8]) -> LabelVolume {
        LabelVolume::from_parts([1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let a = vol(&[0, 1, 2, 3, 1]);
        assert_eq!(geometric_iou(&a, &a).unwrap(), 1.0);
        let s = semantic_miou(&a, &a, 3).unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn disjoint_occupancy() {
        assert_eq!(geometric_iou(&vol(&[1, 0]), &vol(&[0, 2])).unwrap(), 0.0);
    }

    #[test]
    fn empty_volumes() {
        let e = vol(&[0, 0, 0]);
        let g = geometric_scores(&e, &e).unwrap();
        assert_eq!((g.iou, g.precision, g.recall), (1.0, 1.0, 1.0));
        let s = semantic_miou(&e, &e, 2).unwrap();
        assert_eq!(s.per_class, vec![None, None]);
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn missing_prediction_scores_zero() {
        let s = semantic_miou(&vol(&[0, 0, 0]), &vol(&[0, 2, 2]), 3).unwrap();
        assert_eq!(s.per_class, vec![None, Some(0.0), None]);
        assert_eq!(s.miou, 0.0);
    }

    #[test]
    fn ignore_voxels_are_skipped() {
        let pred = vol(&[1, 1, 0]);
        let gt = vol(&[1, 255, 255]);
        assert_eq!(geometric_iou(&pred, &gt).unwrap(), 1.0);
        assert_eq!(semantic_miou(&pred, &gt, 1).unwrap().miou, 1.0);
    }

    #[test]
    fn partial_overlap() {
        // class 1: tp 1, fp 1, fn 1 -> 1/3; class 2: tp 1, fn 0, fp 0 -> 1.
        let pred = vol(&[1, 1, 0, 2]);
        let gt = vol(&[1, 0, 1, 2]);
        let s = semantic_miou(&pred, &gt, 2).unwrap();
        assert!((s.per_class[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.per_class[1], Some(1.0));
        assert!((s.miou - 2.0 / 3.0).abs() < 1e-15);
        let g = geometric_scores(&pred, &gt).unwrap();
        assert_eq!((g.true_positive, g.false_positive, g.false_negative), (2, 1, 1));
    }

    #[test]
    fn errors() {
        assert!(geometric_iou(&vol(&[0]), &vol(&[0, 0])).is_err());
        assert!(semantic_miou(&vol(&[4]), &vol(&[0]), 3).is_err());
    }
}
