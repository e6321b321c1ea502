//! Per-pixel class probabilities and integer label masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for the per-pixel sum-to-one check.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Class probabilities of shape `[classes, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 || probs.shape()[0] < 2 {
            return Err(Error::dim(format!(
                "probability map must be [classes >= 2, h, w], got {:?}",
                probs.shape()
            )));
        }
        let (c, plane) = (probs.shape()[0], probs.shape()[1] * probs.shape()[2]);
        let d = probs.data();
        if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        for i in 0..plane {
            let s: f64 = (0..c).map(|k| d[k * plane + i]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidArgument(format!("pixel {i} sums to {s}, not 1")));
            }
        }
        Ok(Self(probs))
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Hard labels by per-pixel argmax (lowest class wins ties).
    pub fn argmax(&self) -> LabelMask {
        let (c, plane) = (self.classes(), self.height() * self.width());
        let d = self.0.data();
        let labels = (0..plane)
            .map(|i| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * plane + i] > d[best * plane + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            height: self.height(),
            width: self.width(),
            classes: c,
            labels,
        }
    }
}

/// Integer class labels of an `h x w` image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::dim(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidArgument(format!("class count {classes} outside 2..=256")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class_id).count()
    }

    /// `[classes, h, w]` indicator tensor.
    pub fn one_hot(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; self.classes * plane];
        self.write_one_hot(&mut data);
        Tensor::from_parts(vec![self.classes, self.height, self.width], data)
    }

    pub(crate) fn write_one_hot(&self, out: &mut [f64]) {
        let plane = self.height * self.width;
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * plane + i] = 1.0;
        }
    }

    pub(crate) fn same_geometry(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }
}

/// `[n, classes, h, w]` one-hot targets for a batch of masks.
pub fn one_hot_batch(masks: &[&LabelMask]) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::EmptyDataset)?;
    let per = first.classes * first.height * first.width;
    let mut data = vec![0.0; masks.len() * per];
    for (m, chunk) in masks.iter().zip(data.chunks_mut(per)) {
        if !m.same_geometry(first) {
            return Err(Error::dim("masks in a batch must share geometry"));
        }
        m.write_one_hot(chunk);
    }
    Ok(Tensor::from_parts(
        vec![masks.len(), first.classes, first.height, first.width],
        data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(Tensor::new(vec![2, 1, 1], vec![0.4, 0.6]).unwrap()).is_ok());
        assert!(ProbMap::new(Tensor::new(vec![2, 1, 1], vec![0.4, 0.5]).unwrap()).is_err());
        assert!(ProbMap::new(Tensor::new(vec![2, 1, 1], vec![-0.5, 1.5]).unwrap()).is_err());
    }

    #[test]
    fn mask_validation_and_one_hot() {
        assert!(LabelMask::new(1, 2, 2, vec![0, 2]).is_err());
        let m = LabelMask::new(1, 3, 3, vec![0, 2, 1]).unwrap();
        assert_eq!(m.one_hot().data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn argmax_recovers_labels() {
        let m = LabelMask::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let p = ProbMap::new(m.one_hot()).unwrap();
        assert_eq!(p.argmax(), m);
    }
}
