//! Run traces, energy functions, error metrics and identity checks.
//!
//! Everything here is a pure function of iterates that the algorithms already
//! produce; nothing feeds back into a run.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ReferenceSolution;

/// Window length and relative range used by [`detect_plateau`].
pub const PLATEAU_WINDOW: usize = 10;
pub const PLATEAU_RELATIVE_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    Diverged,
}

impl RunStatus {
    /// Process exit code: 0 converged, 2 budget exhausted, 3 diverged.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::BudgetExhausted => 2,
            RunStatus::Diverged => 3,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Converged => "converged",
            RunStatus::BudgetExhausted => "budget_exhausted",
            RunStatus::Diverged => "diverged",
        })
    }
}

/// Which columns a trace carries in CSV form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSchema {
    Centralized,
    Decentralized,
}

impl TraceSchema {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            TraceSchema::Centralized => &[
                "iter",
                "consensus_error_l1",
                "energy",
                "z_step_norm",
                "dual_sum_norm",
                "wall_time_us",
            ],
            TraceSchema::Decentralized => &[
                "iter",
                "consensus_error_l1",
                "energy",
                "z_step_norm",
                "dual_sum_norm",
                "max_z_disagreement",
                "fqac_rounds",
                "fqac_messages",
                "wall_time_us",
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceRow {
    pub iter: usize,
    pub consensus_error_l1: f64,
    pub energy: f64,
    pub z_step_norm: f64,
    pub dual_sum_norm: f64,
    pub max_z_disagreement: f64,
    pub fqac_rounds: u64,
    pub fqac_messages: u64,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub variant: String,
    pub rho: f64,
    pub delta: Option<f64>,
    pub seed: u64,
    pub problem_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    metadata: TraceMetadata,
    schema: TraceSchema,
    rows: Vec<TraceRow>,
    pub status: RunStatus,
    /// Free-form note, e.g. why a run was flagged divergent.
    pub note: Option<String>,
}

impl RunTrace {
    pub fn new(metadata: TraceMetadata, schema: TraceSchema) -> Self {
        Self {
            metadata,
            schema,
            rows: Vec::new(),
            status: RunStatus::BudgetExhausted,
            note: None,
        }
    }

    pub fn metadata(&self) -> &TraceMetadata {
        &self.metadata
    }

    pub fn schema(&self) -> TraceSchema {
        self.schema
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    /// Appends a row; iteration numbers must strictly increase.
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iter <= last.iter {
                return Err(Error::InvalidInput(format!(
                    "trace iteration {} does not follow {}",
                    row.iter, last.iter
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn consensus_errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.consensus_error_l1).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.energy).collect()
    }

    /// First iteration whose consensus error is at or below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.consensus_error_l1 <= threshold)
            .map(|r| r.iter)
    }

    pub fn total_fqac_messages(&self) -> u64 {
        self.rows.iter().map(|r| r.fqac_messages).sum()
    }

    /// Copy keeping only the rows before the energy plateau (all rows when none is found).
    pub fn truncated_at_plateau(&self) -> RunTrace {
        let cut = detect_plateau(&self.energies()).unwrap_or(self.rows.len());
        RunTrace {
            rows: self.rows[..cut].to_vec(),
            ..self.clone()
        }
    }

    /// Writes the CSV for this trace's schema. With `include_wall_time = false`
    /// the timing column is zeroed so repeated runs produce identical bytes.
    pub fn write_csv<W: Write>(&self, out: W, include_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.columns())?;
        for r in &self.rows {
            let wall = if include_wall_time { r.wall_time_us } else { 0 };
            let mut rec = vec![
                r.iter.to_string(),
                fmt_f64(r.consensus_error_l1),
                fmt_f64(r.energy),
                fmt_f64(r.z_step_norm),
                fmt_f64(r.dual_sum_norm),
            ];
            if self.schema == TraceSchema::Decentralized {
                rec.push(fmt_f64(r.max_z_disagreement));
                rec.push(r.fqac_rounds.to_string());
                rec.push(r.fqac_messages.to_string());
            }
            rec.push(wall.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trace CSV. `iter` and `consensus_error_l1` are required; other
    /// known columns are optional and default to zero (`energy` to NaN).
    pub fn read_csv<R: Read>(input: R, metadata: TraceMetadata) -> Result<RunTrace> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let iter_col = col("iter").ok_or_else(|| Error::Schema("missing column `iter`".into()))?;
        let err_col = col("consensus_error_l1")
            .ok_or_else(|| Error::Schema("missing column `consensus_error_l1`".into()))?;
        let schema = if col("fqac_rounds").is_some() {
            TraceSchema::Decentralized
        } else {
            TraceSchema::Centralized
        };
        let mut trace = RunTrace::new(metadata, schema);
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |idx: Option<usize>| -> Result<Option<&str>> {
                match idx {
                    None => Ok(None),
                    Some(i) => rec
                        .get(i)
                        .map(Some)
                        .ok_or_else(|| Error::Schema(format!("row {}: missing field", line + 1))),
                }
            };
            let float = |idx: Option<usize>, default: f64| -> Result<f64> {
                match field(idx)? {
                    None => Ok(default),
                    Some("") => Ok(f64::NAN),
                    Some(s) => s
                        .parse()
                        .map_err(|_| Error::Schema(format!("row {}: bad number {s:?}", line + 1))),
                }
            };
            let int = |idx: Option<usize>| -> Result<u64> {
                match field(idx)? {
                    None => Ok(0),
                    Some(s) => s
                        .parse()
                        .map_err(|_| Error::Schema(format!("row {}: bad integer {s:?}", line + 1))),
                }
            };
            let row = TraceRow {
                iter: int(Some(iter_col))? as usize,
                consensus_error_l1: float(Some(err_col), f64::NAN)?,
                energy: float(col("energy"), f64::NAN)?,
                z_step_norm: float(col("z_step_norm"), 0.0)?,
                dual_sum_norm: float(col("dual_sum_norm"), 0.0)?,
                max_z_disagreement: float(col("max_z_disagreement"), 0.0)?,
                fqac_rounds: int(col("fqac_rounds"))?,
                fqac_messages: int(col("fqac_messages"))?,
                wall_time_us: int(col("wall_time_us"))?,
            };
            trace
                .push(row)
                .map_err(|e| Error::Schema(format!("row {}: {e}", line + 1)))?;
        }
        Ok(trace)
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

fn reference_or_unavailable(reference: Option<&ReferenceSolution>) -> Result<&ReferenceSolution> {
    reference.ok_or_else(|| Error::DiagnosticUnavailable("no reference solution".into()))
}

/// `Σ_i ‖z − z*‖²_{B_i} + ‖λ_i − λ_i*‖²_{B_i⁻¹}`.
pub fn energy_constant_metric(
    z: &DVector<f64>,
    lambdas: &[DVector<f64>],
    reference: Option<&ReferenceSolution>,
    metrics: &[DMatrix<f64>],
) -> Result<f64> {
    let r = reference_or_unavailable(reference)?;
    if lambdas.len() != metrics.len() || lambdas.len() != r.lambdas.len() {
        return Err(Error::InvalidInput("agent counts differ".into()));
    }
    let ez = z - &r.z;
    lambdas
        .iter()
        .zip(&r.lambdas)
        .zip(metrics)
        .map(|((l, ls), b)| {
            let el = l - ls;
            let chol = b
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("metric is not positive definite".into()))?;
            Ok(ez.dot(&(b * &ez)) + el.dot(&chol.solve(&el)))
        })
        .sum()
}

/// `ρN‖ẑ − z*‖² + (1/ρ) Σ_i ‖λ̂_i − λ_i*‖²`.
pub fn energy_decentralized(
    z: &DVector<f64>,
    lambdas: &[DVector<f64>],
    reference: Option<&ReferenceSolution>,
    rho: f64,
) -> Result<f64> {
    let r = reference_or_unavailable(reference)?;
    if lambdas.len() != r.lambdas.len() {
        return Err(Error::InvalidInput("agent counts differ".into()));
    }
    let n_agents = lambdas.len() as f64;
    let dual: f64 = lambdas
        .iter()
        .zip(&r.lambdas)
        .map(|(l, ls)| (l - ls).norm_squared())
        .sum();
    Ok(rho * n_agents * (z - &r.z).norm_squared() + dual / rho)
}

/// `Σ_i ‖x_i − x*‖₁`.
pub fn consensus_error_l1(xs: &[DVector<f64>], x_star: &DVector<f64>) -> f64 {
    xs.iter().map(|x| (x - x_star).lp_norm(1)).sum()
}

/// Metric appearing in the midpoint identity.
#[derive(Debug, Clone, Copy)]
pub enum MidpointMetric<'a> {
    Scaled(f64),
    PerAgent(&'a [DMatrix<f64>]),
}

/// `max_i ‖x_i − ½B_i⁻¹(λ_i⁺ − λ_i) − ½(z_i⁺ + z_i)‖`.
///
/// `z_prev`/`z_next` are per agent so the same check covers the decentralized
/// estimates; centralized callers pass the shared `z` for every agent.
pub fn check_midpoint_identity(
    xs: &[DVector<f64>],
    lambda_prev: &[DVector<f64>],
    lambda_next: &[DVector<f64>],
    z_prev: &[DVector<f64>],
    z_next: &[DVector<f64>],
    metric: MidpointMetric<'_>,
) -> Result<f64> {
    let n = xs.len();
    if [lambda_prev.len(), lambda_next.len(), z_prev.len(), z_next.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::InvalidInput("agent counts differ".into()));
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let dl = &lambda_next[i] - &lambda_prev[i];
        let scaled = match metric {
            MidpointMetric::Scaled(rho) => dl / rho,
            MidpointMetric::PerAgent(bs) => bs[i]
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("metric is not positive definite".into()))?
                .solve(&dl),
        };
        let r = &xs[i] - scaled * 0.5 - (&z_next[i] + &z_prev[i]) * 0.5;
        worst = worst.max(r.norm());
    }
    Ok(worst)
}

/// Empirical contraction factor from a log-linear least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// `exp(slope)` of `ln energy` against iteration, i.e. the estimate of `1/(1+δ)`.
    pub rate: f64,
    pub r_squared: f64,
    pub rows_used: usize,
}

/// Fits `ln energy` against iteration over every row with finite positive energy.
/// Decentralized traces should be cut with [`RunTrace::truncated_at_plateau`] first.
pub fn fit_linear_rate(trace: &RunTrace) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = trace
        .rows()
        .iter()
        .filter(|r| r.energy.is_finite() && r.energy > 0.0)
        .map(|r| (r.iter as f64, r.energy))
        .collect();
    fit_log_linear(&points)
}

pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 10 {
        return Err(Error::DiagnosticUnavailable(format!(
            "rate fit needs at least 10 rows with positive energy, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum();
    let scale = ys.iter().fold(0.0f64, |a, y| a.max(y.abs())).max(1.0);
    let r_squared = if syy <= 1e-24 * scale * scale * n {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok(RateFit {
        rate: slope.exp(),
        r_squared,
        rows_used: points.len(),
    })
}

/// First index `k` where the range of `values[k..k+10]` is below 5% of its mean.
pub fn detect_plateau(values: &[f64]) -> Option<usize> {
    if values.len() < PLATEAU_WINDOW {
        return None;
    }
    (0..=values.len() - PLATEAU_WINDOW).find(|&k| {
        let w = &values[k..k + PLATEAU_WINDOW];
        if w.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        let mean = w.iter().sum::<f64>() / PLATEAU_WINDOW as f64;
        max - min < PLATEAU_RELATIVE_RANGE * mean.abs()
    })
}

/// Median of the final quarter of `values` (at least the last 10 entries);
/// the last value for series shorter than 10.
pub fn plateau_level(values: &[f64]) -> Option<f64> {
    if values.len() < PLATEAU_WINDOW {
        return values.last().copied();
    }
    let take = (values.len() / 4).max(PLATEAU_WINDOW).min(values.len());
    let mut tail: Vec<f64> = values[values.len() - take..].to_vec();
    tail.sort_by(|a, b| a.total_cmp(b));
    let mid = tail.len() / 2;
    Some(if tail.len() % 2 == 0 {
        0.5 * (tail[mid - 1] + tail[mid])
    } else {
        tail[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn meta() -> TraceMetadata {
        TraceMetadata {
            variant: "test".into(),
            rho: 1.0,
            delta: None,
            seed: 0,
            problem_id: "p".into(),
        }
    }

    fn trace_from_energy(values: &[f64]) -> RunTrace {
        let mut t = RunTrace::new(meta(), TraceSchema::Centralized);
        for (k, e) in values.iter().enumerate() {
            t.push(TraceRow {
                iter: k + 1,
                energy: *e,
                consensus_error_l1: *e,
                ..TraceRow::default()
            })
            .unwrap();
        }
        t
    }

    fn reference(z: DVector<f64>, lambdas: Vec<DVector<f64>>) -> ReferenceSolution {
        ReferenceSolution { z, lambdas }
    }

    #[test]
    fn energy_examples() {
        let r = reference(dv(&[0.0, 0.0]), vec![dv(&[1.0, -1.0])]);
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(
            energy_constant_metric(&r.z, &r.lambdas, Some(&r), &[i2.clone()]).unwrap(),
            0.0
        );
        assert_eq!(
            energy_constant_metric(&dv(&[1.0, 0.0]), &r.lambdas, Some(&r), &[i2]).unwrap(),
            1.0
        );
        assert_eq!(energy_decentralized(&r.z, &r.lambdas, Some(&r), 2.0).unwrap(), 0.0);
        assert_eq!(
            energy_decentralized(&dv(&[1.0, 0.0]), &r.lambdas, Some(&r), 1.0).unwrap(),
            1.0
        );
        assert!(matches!(
            energy_decentralized(&r.z, &r.lambdas, None, 1.0),
            Err(Error::DiagnosticUnavailable(_))
        ));
    }

    #[test]
    fn energy_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4;
        let agents = 3;
        let rnd = |rng: &mut ChaCha8Rng| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = reference(rnd(&mut rng), (0..agents).map(|_| rnd(&mut rng)).collect());
        let bs: Vec<DMatrix<f64>> = (0..agents)
            .map(|_| {
                let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                &a * a.transpose() + DMatrix::identity(n, n)
            })
            .collect();
        let z = rnd(&mut rng);
        let ls: Vec<_> = (0..agents).map(|_| rnd(&mut rng)).collect();
        let got = energy_constant_metric(&z, &ls, Some(&r), &bs).unwrap();
        let mut oracle = 0.0;
        for i in 0..agents {
            let inv = bs[i].clone().try_inverse().unwrap();
            let ez = &z - &r.z;
            let el = &ls[i] - &r.lambdas[i];
            oracle += (ez.transpose() * &bs[i] * &ez)[0] + (el.transpose() * inv * &el)[0];
        }
        assert_relative_eq!(got, oracle, max_relative = 1e-10);

        let rho = 1.7;
        let scaled: Vec<_> = (0..agents).map(|_| DMatrix::identity(n, n) * rho).collect();
        let a = energy_constant_metric(&z, &ls, Some(&r), &scaled).unwrap();
        let b = energy_decentralized(&z, &ls, Some(&r), rho).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn consensus_error_examples() {
        let star = dv(&[2.0]);
        assert_eq!(consensus_error_l1(&[dv(&[1.0]), dv(&[3.0])], &star), 2.0);
        assert_eq!(consensus_error_l1(&[star.clone(), star.clone()], &star), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut naive = 0.0;
        for x in &xs {
            for j in 0..3 {
                naive += x[j].abs();
            }
        }
        assert_relative_eq!(consensus_error_l1(&xs, &DVector::zeros(3)), naive, max_relative = 1e-14);
    }

    #[test]
    fn midpoint_identity_residuals() {
        let x = vec![dv(&[1.0])];
        let l0 = vec![dv(&[0.0])];
        let l1 = vec![dv(&[0.0])];
        let z0 = vec![dv(&[0.5])];
        let z1 = vec![dv(&[1.5])];
        let r = check_midpoint_identity(&x, &l0, &l1, &z0, &z1, MidpointMetric::Scaled(1.0)).unwrap();
        assert_eq!(r, 0.0);
        let z1 = vec![dv(&[2.5])];
        let r = check_midpoint_identity(&x, &l0, &l1, &z0, &z1, MidpointMetric::Scaled(1.0)).unwrap();
        assert!(r > 0.0);
        let b = vec![DMatrix::from_element(1, 1, 2.0)];
        let l1 = vec![dv(&[-2.0])];
        let r = check_midpoint_identity(&x, &l0, &l1, &z0, &z1, MidpointMetric::PerAgent(&b)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn rate_fit_examples() {
        let geometric: Vec<f64> = (0..20).map(|k| 0.5f64.powi(k)).collect();
        let fit = fit_linear_rate(&trace_from_energy(&geometric)).unwrap();
        assert_relative_eq!(fit.rate, 0.5, max_relative = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, max_relative = 1e-12);

        let fit = fit_linear_rate(&trace_from_energy(&[3.0; 15])).unwrap();
        assert_eq!(fit.rate, 1.0);

        assert!(matches!(
            fit_linear_rate(&trace_from_energy(&[1.0; 5])),
            Err(Error::DiagnosticUnavailable(_))
        ));
    }

    #[test]
    fn plateau_detection() {
        let mut v: Vec<f64> = (0..30).map(|k| 0.5f64.powi(k)).collect();
        let floor = v[29];
        v.extend(std::iter::repeat(floor).take(20));
        let onset = detect_plateau(&v).unwrap();
        assert!(onset >= 29 && onset <= 30, "onset {onset}");
        assert!(detect_plateau(&v[..25]).is_none());
        assert_eq!(plateau_level(&[4.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(plateau_level(&[]), None);
        let ramp: Vec<f64> = (1..=12).map(f64::from).collect();
        assert_eq!(plateau_level(&ramp), Some(7.5));
        let t = trace_from_energy(&v).truncated_at_plateau();
        assert_eq!(t.len(), onset);
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let mut t = RunTrace::new(meta(), TraceSchema::Decentralized);
        t.push(TraceRow {
            iter: 1,
            consensus_error_l1: 0.25,
            energy: f64::NAN,
            fqac_rounds: 7,
            fqac_messages: 12,
            wall_time_us: 99,
            ..TraceRow::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,consensus_error_l1,energy,z_step_norm,dual_sum_norm,max_z_disagreement,fqac_rounds,fqac_messages,wall_time_us"));
        let back = RunTrace::read_csv(buf.as_slice(), meta()).unwrap();
        assert_eq!(back.schema(), TraceSchema::Decentralized);
        assert_eq!(back.rows()[0].fqac_messages, 12);
        assert_eq!(back.rows()[0].wall_time_us, 0);
        assert!(back.rows()[0].energy.is_nan());

        assert!(matches!(
            RunTrace::read_csv("iter,foo\n1,2\n".as_bytes(), meta()),
            Err(Error::Schema(_))
        ));
        assert!(RunTrace::read_csv("iter,consensus_error_l1\n2,1\n1,1\n".as_bytes(), meta()).is_err());
        assert!(t
            .push(TraceRow {
                iter: 1,
                ..TraceRow::default()
            })
            .is_err());
    }
}
