//! Held-out-site error metrics and the benchmark CSV table.
//!
//! Every predicted tensor is compared to ground truth at its site under two
//! metrics: the Frobenius distance, defined for any symmetric pair, and the
//! affine-invariant Riemannian distance, defined only between SPD tensors.
//! Predictions that fail the SPD check are excluded from the Riemannian
//! mean and counted as violations instead of aborting the comparison —
//! linear interpolation of a noisy source can leave the cone, and the
//! benchmark must still report it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gwp_dti_core::field::{HoldoutSplit, TensorGrid};
use gwp_dti_core::spd::{frob_distance, riem_distance, SpdTensor3, SymTensor3};
use gwp_dti_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Frobenius,
    Riemannian,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Frobenius => "frobenius",
            Metric::Riemannian => "riemannian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation of the per-site distances.
    pub std: f64,
    /// Number of held-out sites (not reduced by exclusions).
    pub n: usize,
    /// Predictions excluded from the Riemannian mean for failing the SPD
    /// check; always 0 for the Frobenius rows.
    pub spd_violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores one method's predictions at the held-out sites against truth.
///
/// `predicted` must align one-to-one with `split.held_out` (the linear
/// indices into `truth`). Returns the Frobenius row then the Riemannian row.
pub fn evaluate(
    method: &str,
    predicted: &[SymTensor3],
    truth: &TensorGrid,
    split: &HoldoutSplit,
) -> Result<MetricsTable> {
    if predicted.len() != split.held_out.len() {
        return Err(Error::Usage(format!(
            "evaluate: {} predictions for {} held-out sites",
            predicted.len(),
            split.held_out.len()
        )));
    }
    let mut frob = Vec::with_capacity(predicted.len());
    let mut riem = Vec::with_capacity(predicted.len());
    let mut violations = 0usize;
    for (pred, &linear) in predicted.iter().zip(&split.held_out) {
        if linear >= truth.len() || !truth.is_valid(linear) {
            return Err(Error::Usage(format!(
                "evaluate: held-out index {linear} is not a valid site of the truth grid"
            )));
        }
        let t = truth.tensor(linear);
        frob.push(frob_distance(pred, t));
        // Truth tensors from a user-supplied file may themselves be
        // non-SPD; such sites cannot be scored under the Riemannian
        // metric either and join the exclusion count.
        match (SpdTensor3::try_new(*pred), SpdTensor3::try_new(*t)) {
            (Ok(p), Ok(t)) => riem.push(riem_distance(&t, &p)),
            _ => violations += 1,
        }
    }
    let (f_mean, f_std) = mean_std(&frob);
    let (r_mean, r_std) = mean_std(&riem);
    Ok(MetricsTable {
        rows: vec![
            MetricsRow {
                method: method.to_string(),
                metric: Metric::Frobenius,
                mean: f_mean,
                std: f_std,
                n: split.held_out.len(),
                spd_violations: 0,
            },
            MetricsRow {
                method: method.to_string(),
                metric: Metric::Riemannian,
                mean: r_mean,
                std: r_std,
                n: split.held_out.len(),
                spd_violations: violations,
            },
        ],
    })
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn row(&self, method: &str, metric: Metric) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric)
    }

    /// Serializes the fixed CSV schema. Values are written with 17
    /// significant digits, enough to reproduce every f64 exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std,n,spd_violations\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{},{}",
                r.method,
                r.metric.name(),
                r.mean,
                r.std,
                r.n,
                r.spd_violations
            )
            .expect("writing to String cannot fail");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_of(tensors: Vec<SymTensor3>) -> TensorGrid {
        let n = tensors.len();
        TensorGrid::new([n, 1, 1], [1.0, 1.0, 1.0], tensors, None).unwrap()
    }

    fn simple_split(n: usize) -> HoldoutSplit {
        HoldoutSplit {
            kept: vec![],
            held_out: (0..n).collect(),
        }
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let tensors = vec![
            SymTensor3::from_diagonal(2e-3, 1e-3, 5e-4),
            SymTensor3::from_diagonal(1e-3, 8e-4, 6e-4),
        ];
        let grid = grid_of(tensors.clone());
        let table = evaluate("gwp", &tensors, &grid, &simple_split(2)).unwrap();
        for row in &table.rows {
            // Frobenius is exactly zero; Riemannian goes through an
            // eigendecomposition and lands at roundoff.
            assert!(row.mean.abs() <= 1e-12, "{} mean {}", row.metric.name(), row.mean);
            assert!(row.std.abs() <= 1e-12);
            assert_eq!(row.n, 2);
            assert_eq!(row.spd_violations, 0);
        }
        assert_eq!(table.rows[0].mean, 0.0);
    }

    #[test]
    fn single_site_mean_is_the_distance_and_std_zero() {
        let truth = SymTensor3::from_diagonal(2e-3, 1e-3, 5e-4);
        let pred = SymTensor3::from_diagonal(2.2e-3, 0.9e-3, 5e-4);
        let grid = grid_of(vec![truth]);
        let table = evaluate("linear", &[pred], &grid, &simple_split(1)).unwrap();
        let f = table.row("linear", Metric::Frobenius).unwrap();
        assert_relative_eq!(f.mean, frob_distance(&pred, &truth), epsilon = 0.0);
        assert_eq!(f.std, 0.0);
        let r = table.row("linear", Metric::Riemannian).unwrap();
        let expect = riem_distance(
            &SpdTensor3::try_new(truth).unwrap(),
            &SpdTensor3::try_new(pred).unwrap(),
        );
        assert_relative_eq!(r.mean, expect, epsilon = 0.0);
    }

    #[test]
    fn non_spd_predictions_are_excluded_and_counted() {
        let truth = vec![SymTensor3::identity(), SymTensor3::identity()];
        let grid = grid_of(truth);
        let good = SymTensor3::from_diagonal(2.0, 1.0, 1.0);
        let bad = SymTensor3::from_diagonal(1.0, -1.0, 1.0);
        let table = evaluate("linear", &[good, bad], &grid, &simple_split(2)).unwrap();
        let r = table.row("linear", Metric::Riemannian).unwrap();
        assert_eq!(r.spd_violations, 1);
        assert_eq!(r.n, 2);
        // Mean over the single surviving site: d(I, diag(2,1,1)) = ln 2.
        assert_relative_eq!(r.mean, 2.0f64.ln(), epsilon = 1e-12);
        assert_eq!(r.std, 0.0);
        // Frobenius still scores every site.
        let f = table.row("linear", Metric::Frobenius).unwrap();
        assert_eq!(f.spd_violations, 0);
        assert!(f.mean > 0.0);
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let truth = vec![
            SymTensor3::from_diagonal(1.0, 1.0, 1.0),
            SymTensor3::from_diagonal(2.0, 1.0, 1.0),
            SymTensor3::from_diagonal(3.0, 2.0, 1.0),
        ];
        let grid = grid_of(truth);
        let preds = [
            SymTensor3::from_diagonal(1.1, 1.0, 1.0),
            SymTensor3::from_diagonal(2.2, 1.1, 0.9),
            SymTensor3::from_diagonal(2.9, 2.1, 1.2),
        ];
        let a = evaluate(
            "m",
            &preds,
            &grid,
            &HoldoutSplit {
                kept: vec![],
                held_out: vec![0, 1, 2],
            },
        )
        .unwrap();
        let b = evaluate(
            "m",
            &[preds[2], preds[0], preds[1]],
            &grid,
            &HoldoutSplit {
                kept: vec![],
                held_out: vec![2, 0, 1],
            },
        )
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_relative_eq!(ra.mean, rb.mean, epsilon = 1e-15);
            assert_relative_eq!(ra.std, rb.std, epsilon = 1e-15);
        }
    }

    #[test]
    fn size_mismatch_is_a_usage_error() {
        let grid = grid_of(vec![SymTensor3::identity(); 3]);
        let err = evaluate("m", &[SymTensor3::identity()], &grid, &simple_split(3)).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn csv_has_fixed_schema_and_full_precision() {
        let grid = grid_of(vec![SymTensor3::identity()]);
        let pred = SymTensor3::from_diagonal(1.25, 1.0, 1.0);
        let table = evaluate("gwp", &[pred], &grid, &simple_split(1)).unwrap();
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,metric,mean,std,n,spd_violations"));
        let frob_line = lines.next().unwrap();
        assert!(frob_line.starts_with("gwp,frobenius,"));
        // The mean must round-trip exactly through the printed decimal.
        let printed: f64 = frob_line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(printed, table.rows[0].mean);
        assert!(lines.next().unwrap().starts_with("gwp,riemannian,"));
    }
}
