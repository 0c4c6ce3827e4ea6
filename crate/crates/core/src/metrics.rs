//! AUROC at image and pixel level, thresholding and multi-run summaries.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly_map::AnomalyMap;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

/// Mann-Whitney AUROC: the probability that a random positive outranks a
/// random negative, ties counted as one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based ranks over positives, with tied runs sharing their mean
    // rank. Twice the rank is an integer, so accumulate in u128 exactly.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, mean = (start + 1 + end) / 2
        let twice_mean = (start + 1 + end) as u128;
        let pos_in_run = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += twice_mean * pos_in_run;
        start = end;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u128) as f64)
}

fn is_positive(mask: &Tensor) -> Vec<bool> {
    match mask.data() {
        TensorData::U8(v) => v.iter().map(|&x| x != 0).collect(),
        TensorData::F32(v) => v.iter().map(|&x| x != 0.0).collect(),
        TensorData::F64(v) => v.iter().map(|&x| x != 0.0).collect(),
    }
}

/// AUROC over every pixel of every map against the ground-truth masks.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[Tensor]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::arg(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        mask.expect_shape(&[map.height(), map.width()], "pixel mask")?;
        scores.extend_from_slice(map.pixels());
        labels.extend(is_positive(mask));
    }
    auroc(&scores, &labels)
}

/// 1 where the pixel is at or above `threshold`.
pub fn threshold_mask(map: &AnomalyMap, threshold: f64) -> Tensor {
    let data = map
        .pixels()
        .iter()
        .map(|&v| u8::from(v >= threshold))
        .collect();
    Tensor::from_u8(vec![map.height(), map.width()], data).expect("extents match")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean image-level AUROC over runs.
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub runs: Vec<RunMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
    pub config: serde_json::Value,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Attaches the effective configuration and its SHA-256 fingerprint.
    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_vec(&config).expect("json values serialize");
        self.config_fingerprint = Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        self.config = config;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation (divisor R − 1) across runs. Pixel
/// statistics are reported only when every run has a pixel AUROC.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::arg("no runs to aggregate"));
    }
    let image: Vec<f64> = runs.iter().map(|r| r.image_auroc).collect();
    let (image_mean, image_std) = mean_std(&image);
    let pixel: Option<Vec<f64>> = runs.iter().map(|r| r.pixel_auroc).collect();
    let (pixel_mean, pixel_std) = match pixel {
        Some(p) => {
            let (m, s) = mean_std(&p);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        image_auroc: image_mean,
        pixel_auroc: pixel_mean,
        runs: runs.to_vec(),
        mean: MetricSummary {
            image_auroc: image_mean,
            pixel_auroc: pixel_mean,
        },
        std: MetricSummary {
            image_auroc: image_std,
            pixel_auroc: pixel_std,
        },
        config: serde_json::Value::Null,
        config_fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) pairwise counting with ties as one half.
    fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_example() {
        let v = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(v, 0.75);
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(
            auroc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[0.3; 5], &[false, true, false, true, true]).unwrap(),
            0.5
        );
    }

    #[test]
    fn single_class_is_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    fn map(h: usize, w: usize, v: Vec<f64>) -> AnomalyMap {
        AnomalyMap::new(h, w, v, 0.0).unwrap()
    }

    #[test]
    fn pixel_level() {
        let mask = Tensor::from_u8(vec![2, 2], vec![0, 1, 1, 0]).unwrap();
        let perfect = map(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            pixel_auroc(&[perfect], std::slice::from_ref(&mask)).unwrap(),
            1.0
        );
        let inverted = map(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            pixel_auroc(&[inverted], std::slice::from_ref(&mask)).unwrap(),
            0.0
        );

        let a = map(2, 2, vec![0.2, 0.9, 0.4, 0.1]);
        let b = map(2, 2, vec![0.5, 0.3, 0.3, 0.8]);
        let mb = Tensor::from_u8(vec![2, 2], vec![0, 0, 1, 1]).unwrap();
        let flat: Vec<f64> = a.pixels().iter().chain(b.pixels()).copied().collect();
        let labels = [false, true, true, false, false, false, true, true];
        let expected = pairwise_auroc(&flat, &labels);
        assert_eq!(pixel_auroc(&[a, b], &[mask, mb]).unwrap(), expected);

        let none = Tensor::from_u8(vec![1, 2], vec![0, 0]).unwrap();
        assert!(matches!(
            pixel_auroc(&[map(1, 2, vec![0.0, 1.0])], &[none]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn thresholds() {
        let m = map(2, 2, vec![0.1, 0.7, 0.3, 0.9]);
        assert!(threshold_mask(&m, -1.0)
            .as_u8()
            .unwrap()
            .iter()
            .all(|&v| v == 1));
        assert!(threshold_mask(&m, 2.0)
            .as_u8()
            .unwrap()
            .iter()
            .all(|&v| v == 0));
        // median of four distinct values sits between the 2nd and 3rd
        let median = (0.3 + 0.7) / 2.0;
        let positives: u32 = threshold_mask(&m, median)
            .as_u8()
            .unwrap()
            .iter()
            .map(|&v| v as u32)
            .sum();
        assert_eq!(positives, 2);
    }

    #[test]
    fn run_aggregation() {
        let runs = |v: &[f64]| -> Vec<RunMetrics> {
            v.iter()
                .enumerate()
                .map(|(i, &x)| RunMetrics {
                    seed: i as u64,
                    image_auroc: x,
                    pixel_auroc: Some(x),
                })
                .collect()
        };
        let r = aggregate_runs(&runs(&[0.9, 0.9, 0.9])).unwrap();
        assert!((r.mean.image_auroc - 0.9).abs() < 1e-15);
        assert!(r.std.image_auroc.abs() < 1e-15);

        let r = aggregate_runs(&runs(&[0.8, 1.0])).unwrap();
        assert!((r.mean.image_auroc - 0.9).abs() < 1e-15);
        assert!((r.std.image_auroc - 0.141_421_356_237_309_5).abs() < 1e-12);

        let r = aggregate_runs(&runs(&[0.7])).unwrap();
        assert_eq!(r.std.image_auroc, 0.0);
        assert_eq!(r.std.pixel_auroc, Some(0.0));
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = aggregate_runs(&[RunMetrics {
            seed: 3,
            image_auroc: 0.123456789012,
            pixel_auroc: None,
        }])
        .unwrap()
        .with_config(serde_json::json!({"d": 100}));
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in [
            "image_auroc",
            "pixel_auroc",
            "runs",
            "mean",
            "std",
            "config",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["image_auroc"].as_f64().unwrap(), 0.123456789012);
        assert_eq!(r.config_fingerprint.len(), 64);
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..300)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, l)| {
                l.iter().any(|&x| x) && l.iter().any(|&x| !x)
            })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle((scores, labels) in scored_labels()) {
            let fast = auroc(&scores, &labels).unwrap();
            prop_assert!((fast - pairwise_auroc(&scores, &labels)).abs() <= 1e-12);
        }

        #[test]
        fn rank_invariant((scores, labels) in scored_labels()) {
            let base = auroc(&scores, &labels).unwrap();
            let affine: Vec<f64> = scores.iter().map(|x| 2.0 * x + 1.0).collect();
            let cubic: Vec<f64> = scores.iter().map(|x| x.powi(3)).collect();
            prop_assert_eq!(auroc(&affine, &labels).unwrap(), base);
            prop_assert_eq!(auroc(&cubic, &labels).unwrap(), base);
        }

        #[test]
        fn complement_without_ties(
            raw in proptest::collection::hash_set(0u32..1_000_000, 2..200),
            flips in proptest::collection::vec(any::<bool>(), 200),
        ) {
            let scores: Vec<f64> = raw.into_iter().map(|v| v as f64).collect();
            let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|x| -x).collect();
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((auroc(&neg, &labels).unwrap() - (1.0 - a)).abs() <= 1e-12);
        }
    }
}
