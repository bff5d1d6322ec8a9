//! Depth error and accuracy metrics with optional per-frame median scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthField, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub scale_applied: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub scale_first: bool,
    /// `max(p/g, g/p) < 1.25^k` when set, `<=` otherwise.
    pub strict_delta: bool,
    /// Ground-truth pixels outside `[min, max]` are ignored.
    pub depth_range: Option<(f64, f64)>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            scale_first: true,
            strict_delta: true,
            depth_range: None,
        }
    }
}

fn check_shapes(pred: &DepthField, gt: &DepthField, valid: &Mask) -> Result<()> {
    if pred.shape() != gt.shape() || gt.shape() != (valid.height, valid.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, ground truth {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            (valid.height, valid.width)
        )));
    }
    Ok(())
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Scales `pred` by `median(gt) / median(pred)` over the valid pixels.
pub fn median_scale(pred: &DepthField, gt: &DepthField, valid: &Mask) -> Result<(DepthField, f64)> {
    check_shapes(pred, gt, valid)?;
    let pick = |f: &DepthField| -> Vec<f64> {
        f.data
            .iter()
            .zip(&valid.data)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect()
    };
    let (Some(mg), Some(mp)) = (median(&mut pick(gt)), median(&mut pick(pred))) else {
        return Err(Error::EmptySelection("median scaling needs at least one valid pixel".into()));
    };
    let scale = mg / mp;
    Ok((pred.scaled(scale), scale))
}

pub fn compute_metrics(
    pred: &DepthField,
    gt: &DepthField,
    valid: &Mask,
    scale_first: bool,
) -> Result<DepthMetrics> {
    compute_metrics_with(
        pred,
        gt,
        valid,
        &MetricOptions {
            scale_first,
            ..MetricOptions::default()
        },
    )
}

pub fn compute_metrics_with(
    pred: &DepthField,
    gt: &DepthField,
    valid: &Mask,
    opts: &MetricOptions,
) -> Result<DepthMetrics> {
    check_shapes(pred, gt, valid)?;
    let mut mask = valid.clone();
    if let Some((lo, hi)) = opts.depth_range {
        for (m, g) in mask.data.iter_mut().zip(&gt.data) {
            *m = *m && *g >= lo && *g <= hi;
        }
    }
    if let Some(g) = gt
        .data
        .iter()
        .zip(&mask.data)
        .find(|(g, &m)| m && !(g.is_finite() && **g > 0.0))
    {
        return Err(Error::InvalidInput(format!(
            "ground truth must be positive on valid pixels, found {}",
            g.0
        )));
    }
    let (scaled, scale) = if opts.scale_first {
        median_scale(pred, gt, &mask)?
    } else {
        (pred.clone(), 1.0)
    };
    let mut m = DepthMetrics {
        scale_applied: scale,
        ..DepthMetrics::default()
    };
    let mut count = 0usize;
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    let mut hits = [0usize; 3];
    for ((p, g), &keep) in scaled.data.iter().zip(&gt.data).zip(&mask.data) {
        if !keep {
            continue;
        }
        count += 1;
        let d = p - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        m.rmse += d * d;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        // max(p/g, g/p) against t without the rounding of a division.
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            let pass = if opts.strict_delta {
                *p < t * g && *g < t * p
            } else {
                *p <= t * g && *g <= t * p
            };
            if pass {
                *hit += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySelection("no valid pixel to evaluate".into()));
    }
    let n = count as f64;
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 = hits[0] as f64 / n;
    m.delta2 = hits[1] as f64 / n;
    m.delta3 = hits[2] as f64 / n;
    Ok(m)
}

/// Field-wise mean over frames.
pub fn mean_metrics(frames: &[DepthMetrics]) -> DepthMetrics {
    let n = frames.len().max(1) as f64;
    frames.iter().fold(DepthMetrics::default(), |acc, m| DepthMetrics {
        abs_rel: acc.abs_rel + m.abs_rel / n,
        sq_rel: acc.sq_rel + m.sq_rel / n,
        rmse: acc.rmse + m.rmse / n,
        rmse_log: acc.rmse_log + m.rmse_log / n,
        delta1: acc.delta1 + m.delta1 / n,
        delta2: acc.delta2 + m.delta2 / n,
        delta3: acc.delta3 + m.delta3 / n,
        scale_applied: acc.scale_applied + m.scale_applied / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn field(v: &[f64]) -> DepthField {
        DepthField::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn median_scale_examples() {
        let gt = field(&[1.0, 2.0, 3.0]);
        let all = Mask::filled(1, 3, true);
        let (scaled, s) = median_scale(&gt.scaled(2.0), &gt, &all).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(scaled, gt);
        assert_eq!(median_scale(&gt, &gt, &all).unwrap().1, 1.0);
        let pred = field(&[2.0, 3.0, 4.0]);
        let gt2 = field(&[1.0, 1.2, 5.0]);
        assert_abs_diff_eq!(median_scale(&pred, &gt2, &all).unwrap().1, 0.4, epsilon = 1e-15);
        let none = Mask::filled(1, 3, false);
        assert!(matches!(median_scale(&gt, &gt, &none), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn perfect_prediction() {
        let gt = field(&[0.5, 1.0, 7.0, 2.0]);
        let m = compute_metrics(&gt, &gt, &Mask::filled(1, 4, true), false).unwrap();
        assert_eq!(
            (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3),
            (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn uniform_ratio_on_the_second_threshold() {
        let gt = field(&[1.0, 2.0, 4.0]);
        let pred = gt.scaled(1.25f64.powi(2));
        let m = compute_metrics(&pred, &gt, &Mask::filled(1, 3, true), false).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 0.0);
        assert_eq!(m.delta3, 1.0);
        assert_abs_diff_eq!(m.abs_rel, 0.5625, epsilon = 1e-15);
    }

    #[test]
    fn four_pixel_example() {
        let pred = field(&[1.0, 2.0, 3.0, 4.0]);
        let gt = field(&[1.0, 1.0, 3.0, 5.0]);
        let m = compute_metrics(&pred, &gt, &Mask::filled(1, 4, true), false).unwrap();
        assert_abs_diff_eq!(m.abs_rel, 0.3, epsilon = 1e-15);
        assert_eq!(m.delta1, 0.5);
        let loose = compute_metrics_with(
            &pred,
            &gt,
            &Mask::filled(1, 4, true),
            &MetricOptions {
                scale_first: false,
                strict_delta: false,
                depth_range: None,
            },
        )
        .unwrap();
        assert_eq!(loose.delta1, 0.75);
    }

    #[test]
    fn invalid_pixels_are_ignored_and_range_filter() {
        let pred = field(&[1.0, 100.0]);
        let gt = field(&[1.0, 1.0]);
        let mut valid = Mask::filled(1, 2, true);
        valid.data[1] = false;
        let m = compute_metrics(&pred, &gt, &valid, false).unwrap();
        assert_eq!(m.rmse, 0.0);
        let opts = MetricOptions {
            scale_first: false,
            strict_delta: true,
            depth_range: Some((2.0, 3.0)),
        };
        assert!(compute_metrics_with(&pred, &gt, &Mask::filled(1, 2, true), &opts).is_err());
    }
}
