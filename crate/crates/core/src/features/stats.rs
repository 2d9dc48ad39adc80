use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooShort(usize),
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    /// Set when either series is constant; `r` is then reported as 0.
    pub zero_variance: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooShort(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            zero_variance: true,
        });
    }
    Ok(Pearson {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        zero_variance: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub threshold: f64,
    /// (feature, r, zero-variance flag) in input order.
    pub entries: Vec<(String, f64, bool)>,
    pub selected: BTreeSet<String>,
}

impl CorrelationReport {
    pub fn r(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == name).map(|e| e.1)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("feature,r,zero_variance,selected  # threshold {}\n", self.threshold);
        for (name, r, flag) in &self.entries {
            let sel = u8::from(self.selected.contains(name));
            out.push_str(&format!("{name},{r:.6},{},{sel}\n", u8::from(*flag)));
        }
        out
    }
}

/// Correlate every feature column with the label; keep those with
/// `|r| >= threshold`.
pub fn correlation_report(
    names: &[String],
    rows: &[Vec<f64>],
    labels: &[f64],
    threshold: f64,
) -> Result<CorrelationReport, StatsError> {
    if rows.is_empty() {
        return Err(StatsError::Empty);
    }
    if rows.len() != labels.len() {
        return Err(StatsError::Length(rows.len(), labels.len()));
    }
    let mut entries = Vec::with_capacity(names.len());
    let mut selected = BTreeSet::new();
    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let p = pearson(&col, labels)?;
        if !p.zero_variance && p.r.abs() >= threshold {
            selected.insert(name.clone());
        }
        entries.push((name.clone(), p.r, p.zero_variance));
    }
    Ok(CorrelationReport {
        threshold,
        entries,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_values() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap().r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        // r = 5 / sqrt(2 * 12.666..) computed by hand
        let r = pearson(&x, &[2.0, 4.0, 7.0]).unwrap().r;
        assert!((r - 0.993_399_267_798_783).abs() < 1e-12, "{r}");
        let flat = pearson(&[1.0, 1.0, 1.0], &x).unwrap();
        assert!(flat.zero_variance && flat.r == 0.0);
        assert_eq!(pearson(&[1.0], &[1.0]), Err(StatsError::TooShort(1)));
    }

    #[test]
    fn planted_weak_feature_is_dropped() {
        // y, and e orthogonal to y with the same norm, give
        // x = 0.04 y + sqrt(1 - 0.04^2) e with corr(x, y) = 0.04 exactly.
        let n = 200;
        let center = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.into_iter().map(|a| a - m).collect::<Vec<f64>>()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let y = center((0..n).map(|i| ((i * 37) % 11) as f64).collect());
        let raw = center((0..n).map(|i| ((i * 53) % 17) as f64).collect());
        let k = dot(&raw, &y) / dot(&y, &y);
        let e: Vec<f64> = raw.iter().zip(&y).map(|(r, y)| r - k * y).collect();
        let scale = (dot(&y, &y) / dot(&e, &e)).sqrt();
        let rho: f64 = 0.04;
        let x: Vec<f64> = y
            .iter()
            .zip(&e)
            .map(|(y, e)| rho * y + (1.0 - rho * rho).sqrt() * e * scale)
            .collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![x[i], y[i], 3.0]).collect();
        let names = vec!["weak".to_string(), "label".to_string(), "const".to_string()];
        let rep = correlation_report(&names, &rows, &y, 0.05).unwrap();
        assert!((rep.r("weak").unwrap() - 0.04).abs() < 1e-9);
        assert!((rep.r("label").unwrap() - 1.0).abs() < 1e-12);
        assert!(rep.entries[2].2);
        assert_eq!(rep.selected, BTreeSet::from(["label".to_string()]));
    }
}
