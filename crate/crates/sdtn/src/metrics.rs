//! Classification metrics (overall/average accuracy, Cohen's kappa) and
//! rendering of predicted label maps to binary PPM images.

use crate::error::{Result, SdtnError};

/// Square confusion matrix indexed by 1-based class ids;
/// `counts[actual][predicted]` in 0-based storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(SdtnError::Value("confusion matrix needs >= 1 class".into()));
        }
        Ok(ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Record one (actual, predicted) pair of 1-based class ids.
    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        if actual == 0 || actual > self.n_classes || predicted == 0 || predicted > self.n_classes {
            return Err(SdtnError::Value(format!(
                "class pair ({actual}, {predicted}) outside 1..={}",
                self.n_classes
            )));
        }
        self.counts[(actual - 1) * self.n_classes + (predicted - 1)] += 1;
        Ok(())
    }

    pub fn count(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[(actual - 1) * self.n_classes + (predicted - 1)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, actual: usize) -> u64 {
        self.counts[(actual - 1) * self.n_classes..actual * self.n_classes]
            .iter()
            .sum()
    }

    fn col_sum(&self, predicted: usize) -> u64 {
        (1..=self.n_classes).map(|a| self.count(a, predicted)).sum()
    }

    /// Overall accuracy: correct / total.
    pub fn oa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(SdtnError::Value("confusion matrix is empty".into()));
        }
        let correct: u64 = (1..=self.n_classes).map(|c| self.count(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Per-class recall, one entry per class in ascending id order.
    pub fn per_class(&self) -> Result<Vec<f64>> {
        (1..=self.n_classes)
            .map(|c| {
                let row = self.row_sum(c);
                if row == 0 {
                    Err(SdtnError::Value(format!(
                        "class {c} has no samples; per-class accuracy undefined"
                    )))
                } else {
                    Ok(self.count(c, c) as f64 / row as f64)
                }
            })
            .collect()
    }

    /// Average accuracy: mean of per-class recalls.
    pub fn aa(&self) -> Result<f64> {
        let per = self.per_class()?;
        Ok(per.iter().sum::<f64>() / per.len() as f64)
    }

    /// Cohen's kappa: (p_o - p_e) / (1 - p_e) with chance agreement p_e
    /// from the marginals. Errors when p_e == 1 (degenerate marginals).
    pub fn kappa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(SdtnError::Value("confusion matrix is empty".into()));
        }
        let t = total as f64;
        let p_o = self.oa()?;
        let p_e: f64 = (1..=self.n_classes)
            .map(|c| (self.row_sum(c) as f64 / t) * (self.col_sum(c) as f64 / t))
            .sum();
        if (1.0 - p_e).abs() < 1e-15 {
            return Err(SdtnError::Value(
                "chance agreement is 1; kappa undefined".into(),
            ));
        }
        Ok((p_o - p_e) / (1.0 - p_e))
    }
}

/// Default class palette (RGB). Index 0 (unlabeled) renders black; class
/// ids wrap around the palette when a scene has more classes than entries.
pub const PALETTE: [[u8; 3]; 10] = [
    [0, 0, 0],
    [216, 27, 96],
    [30, 136, 229],
    [255, 193, 7],
    [0, 77, 64],
    [94, 53, 177],
    [255, 109, 0],
    [67, 160, 71],
    [0, 172, 193],
    [141, 110, 99],
];

pub fn class_color(class: u16) -> [u8; 3] {
    if class == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (class as usize - 1) % (PALETTE.len() - 1)]
    }
}

/// Render a row-major label map as a binary (P6) PPM image.
pub fn render_map(labels: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(SdtnError::Value(format!(
            "label map has {} entries, expected {}",
            labels.len(),
            height * width
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * labels.len());
    for &l in labels {
        out.extend_from_slice(&class_color(l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn from_counts(counts: &[&[u64]]) -> ConfusionMatrix {
        let n = counts.len();
        let mut m = ConfusionMatrix::new(n).unwrap();
        for (a, row) in counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    m.record(a + 1, p + 1).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn perfect_prediction() {
        let m = from_counts(&[&[10, 0], &[0, 30]]);
        assert_eq!(m.oa().unwrap(), 1.0);
        assert_eq!(m.aa().unwrap(), 1.0);
        assert_eq!(m.kappa().unwrap(), 1.0);
    }

    #[test]
    fn chance_level_kappa_is_zero() {
        let m = from_counts(&[&[25, 25], &[25, 25]]);
        assert_eq!(m.oa().unwrap(), 0.5);
        assert!(m.kappa().unwrap().abs() < 1e-15);
    }

    #[test]
    fn hand_computed_three_class() {
        // rows actual, cols predicted
        let m = from_counts(&[&[5, 1, 0], &[2, 6, 2], &[0, 1, 3]]);
        let total = 20.0;
        assert_eq!(m.total(), 20);
        assert!((m.oa().unwrap() - 14.0 / total).abs() < 1e-15);
        let per = m.per_class().unwrap();
        assert!((per[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((per[1] - 6.0 / 10.0).abs() < 1e-15);
        assert!((per[2] - 3.0 / 4.0).abs() < 1e-15);
        let aa = (5.0 / 6.0 + 0.6 + 0.75) / 3.0;
        assert!((m.aa().unwrap() - aa).abs() < 1e-15);
        let p_e = (6.0 * 7.0 + 10.0 * 8.0 + 4.0 * 5.0) / (total * total);
        let expect = (0.7 - p_e) / (1.0 - p_e);
        assert!((m.kappa().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn random_matrices_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let mut m = ConfusionMatrix::new(n).unwrap();
            let mut counts = vec![vec![0u64; n]; n];
            for a in 0..n {
                // keep every row populated so per-class is defined
                counts[a][rng.gen_range(0..n)] += 1;
                for p in 0..n {
                    counts[a][p] += rng.gen_range(0..20);
                }
            }
            for (a, row) in counts.iter().enumerate() {
                for (p, &c) in row.iter().enumerate() {
                    for _ in 0..c {
                        m.record(a + 1, p + 1).unwrap();
                    }
                }
            }
            let total: u64 = counts.iter().flatten().sum();
            let t = total as f64;
            let correct: u64 = (0..n).map(|i| counts[i][i]).sum();
            let oa = correct as f64 / t;
            assert!((m.oa().unwrap() - oa).abs() < 1e-12);
            let per: Vec<f64> = (0..n)
                .map(|a| counts[a][a] as f64 / counts[a].iter().sum::<u64>() as f64)
                .collect();
            let aa = per.iter().sum::<f64>() / n as f64;
            assert!((m.aa().unwrap() - aa).abs() < 1e-12);
            let p_e: f64 = (0..n)
                .map(|c| {
                    let row: u64 = counts[c].iter().sum();
                    let col: u64 = (0..n).map(|a| counts[a][c]).sum();
                    (row as f64 / t) * (col as f64 / t)
                })
                .sum();
            if (1.0 - p_e).abs() > 1e-12 {
                assert!((m.kappa().unwrap() - (oa - p_e) / (1.0 - p_e)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn class_permutation_leaves_metrics_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let mut counts = vec![vec![0u64; n]; n];
        for row in counts.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(1..15);
            }
        }
        let base = from_counts(&counts.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![vec![0u64; n]; n];
        for a in 0..n {
            for p in 0..n {
                permuted[perm[a]][perm[p]] = counts[a][p];
            }
        }
        let pm = from_counts(&permuted.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        assert!((base.oa().unwrap() - pm.oa().unwrap()).abs() < 1e-15);
        assert!((base.aa().unwrap() - pm.aa().unwrap()).abs() < 1e-15);
        assert!((base.kappa().unwrap() - pm.kappa().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases_error() {
        let m = ConfusionMatrix::new(2).unwrap();
        assert!(m.oa().is_err());
        assert!(m.kappa().is_err());
        let mut one_row = ConfusionMatrix::new(2).unwrap();
        one_row.record(1, 1).unwrap();
        assert!(one_row.per_class().is_err());
        // single class: p_e is always 1
        let mut single = ConfusionMatrix::new(1).unwrap();
        single.record(1, 1).unwrap();
        assert!(single.kappa().is_err());
        let mut m = ConfusionMatrix::new(2).unwrap();
        assert!(m.record(0, 1).is_err());
        assert!(m.record(1, 3).is_err());
    }

    #[test]
    fn ppm_header_and_pixels() {
        let labels = vec![0u16, 1, 2, 1];
        let bytes = render_map(&labels, 2, 2).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 12);
        assert_eq!(&body[0..3], &class_color(0));
        assert_eq!(&body[3..6], &class_color(1));
        assert_eq!(&body[6..9], &class_color(2));
        assert_eq!(&body[9..12], &class_color(1));
        assert_eq!(class_color(0), [0, 0, 0]);
        assert_ne!(class_color(1), class_color(2));
        assert!(render_map(&labels, 3, 2).is_err());
    }
}
