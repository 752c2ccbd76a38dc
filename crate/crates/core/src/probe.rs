//! Linear softmax probe for measuring what a frozen feature encodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression on standardized inputs, fitted by
/// full-batch gradient descent from zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    // classes × dim, row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("probe needs one label per feature vector"));
        }
        if classes < 2 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::invalid("probe labels outside the class range"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid(
                "probe features must share one nonzero length",
            ));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            scale
                .iter_mut()
                .zip(f)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { libm::sqrt(*s) } else { 1.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for (x, &l) in xs.iter().zip(labels) {
                let p = probe.probabilities(x);
                for c in 0..classes {
                    let r = (p[c] - f64::from(u8::from(c == l))) / n;
                    gb[c] += r;
                    gw[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, v)| *g += r * v);
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let z: Vec<f64> = (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * dim..(c + 1) * dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| libm::exp(v - m)).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let p = self.probabilities(&self.standardize(feature));
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    pub fn balanced_accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pred: Vec<usize> = features.iter().map(|f| self.predict(f)).collect();
        balanced_accuracy(&pred, labels, self.classes)
    }
}

/// Mean per-class recall over the classes present in `labels`. Chance level
/// is `1 / present classes` regardless of class imbalance.
pub fn balanced_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(
            "balanced accuracy needs matching nonempty inputs",
        ));
    }
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l >= classes {
            return Err(Error::invalid("label outside the class range"));
        }
        tot[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| tot[c] > 0)
        .map(|c| hit[c] as f64 / tot[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_ignores_imbalance() {
        let labels = [0, 0, 0, 1];
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &labels, 2).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &labels, 2).unwrap(), 1.0);
    }

    #[test]
    fn probe_separates_linear_classes() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            let l = usize::from(i % 3 == 0);
            feats.push(vec![if l == 1 { 1.0 + t } else { -1.0 - t }, 5.0 * t]);
            labels.push(l);
        }
        let p = LinearProbe::fit(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(p.balanced_accuracy(&feats, &labels).unwrap(), 1.0);
    }

    #[test]
    fn constant_features_give_chance() {
        let feats = vec![vec![1.0, 2.0]; 10];
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let p = LinearProbe::fit(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(p.balanced_accuracy(&feats, &labels).unwrap(), 0.5);
    }
}
