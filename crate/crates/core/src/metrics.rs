//! Evaluation metrics on hard masks and probability maps.

use crate::error::{Error, Result};
use crate::maps::{LabelMask, ProbMap};

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1 when both masks lack it.
pub fn dsc_metric(pred: &LabelMask, truth: &LabelMask, class_id: usize) -> Result<f64> {
    if !pred.same_geometry(truth) {
        return Err(Error::dim("prediction and truth masks differ in geometry"));
    }
    if class_id >= pred.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for {} classes",
            pred.classes()
        )));
    }
    let c = class_id as u8;
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        p += (a == c) as usize;
        t += (b == c) as usize;
        both += (a == c && b == c) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Mean over images of the per-pixel squared error against one-hot truth,
/// averaged over the class axis.
pub fn mse_metric(preds: &[ProbMap], truths: &[LabelMask]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != truths.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} masks",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += image_mse(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// Squared error of one image, averaged over pixels and classes.
pub fn image_mse(p: &ProbMap, truth: &LabelMask) -> Result<f64> {
    if p.classes() != truth.classes() || p.height() != truth.height() || p.width() != truth.width() {
        return Err(Error::dim("probability map and mask differ in geometry"));
    }
    let plane = p.height() * p.width();
    let probs = p.tensor().data();
    let mut sum = 0.0;
    for (i, &label) in truth.labels().iter().enumerate() {
        for k in 0..p.classes() {
            let target = if label as usize == k { 1.0 } else { 0.0 };
            let d = probs[k * plane + i] - target;
            sum += d * d;
        }
    }
    Ok(sum / (plane * p.classes()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mask(labels: Vec<u8>) -> LabelMask {
        LabelMask::new(1, labels.len(), 4, labels).unwrap()
    }

    #[test]
    fn dsc_basic_cases() {
        let a = mask(vec![1, 1, 2, 0]);
        assert_eq!(dsc_metric(&a, &a, 1).unwrap(), 1.0);
        let b = mask(vec![0, 0, 1, 1]);
        let c = mask(vec![1, 1, 0, 0]);
        assert_eq!(dsc_metric(&b, &c, 1).unwrap(), 0.0);
        // |P| = |G| = 4, overlap 2
        let p = LabelMask::new(2, 4, 4, vec![3, 3, 3, 3, 0, 0, 0, 0]).unwrap();
        let t = LabelMask::new(2, 4, 4, vec![0, 0, 3, 3, 3, 3, 0, 0]).unwrap();
        assert_eq!(dsc_metric(&p, &t, 3).unwrap(), 0.5);
        assert_eq!(dsc_metric(&p, &t, 2).unwrap(), 1.0);
        assert!(dsc_metric(&p, &t, 4).is_err());
    }

    #[test]
    fn mse_cases() {
        let m = mask(vec![0, 3, 2]);
        let exact = ProbMap::new(m.one_hot()).unwrap();
        assert_eq!(mse_metric(&[exact.clone()], &[m.clone()]).unwrap(), 0.0);

        let half = ProbMap::new(Tensor::full(&[2, 2, 2], 0.5)).unwrap();
        let truth = LabelMask::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        assert_eq!(mse_metric(&[half.clone()], &[truth.clone()]).unwrap(), 0.25);

        assert!(mse_metric(&[], &[]).is_err());
        assert!(mse_metric(&[half], &[]).is_err());
    }
}
