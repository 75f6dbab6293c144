//! JSON model files and plot-ready CSV dumps.
//!
//! Matrices are read either as one flat row-major array or as an array of
//! rows.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bsde::{DualTrajectory, PathEnsemble};
use crate::error::{Error, Result};
use crate::filters::{FilterState, KalmanState};
use crate::grid::TimeGrid;
use crate::hmm::{FiniteModel, ObservationPath};
use crate::lq::LGModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixData {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixData {
    pub fn to_matrix(&self, what: &'static str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let flat: Vec<f64> = match self {
            MatrixData::Flat(v) => v.clone(),
            MatrixData::Rows(r) => {
                if r.len() != rows {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: rows,
                        got: r.len(),
                    });
                }
                if let Some(bad) = r.iter().find(|row| row.len() != cols) {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: cols,
                        got: bad.len(),
                    });
                }
                r.concat()
            }
        };
        if flat.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what,
                expected: rows * cols,
                got: flat.len(),
            });
        }
        Ok(DMatrix::from_row_slice(rows, cols, &flat))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixData::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteModelFile {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: MatrixData,
    #[serde(rename = "H")]
    pub h: MatrixData,
    pub prior: Vec<f64>,
}

impl FiniteModelFile {
    pub fn to_model(&self) -> Result<FiniteModel> {
        let rate = self.a.to_matrix("rate matrix", self.d, self.d)?;
        let obs = self.h.to_matrix("observation matrix", self.d, self.m)?;
        FiniteModel::new(rate, obs, DVector::from_vec(self.prior.clone()))
    }

    pub fn from_model(model: &FiniteModel) -> Self {
        FiniteModelFile {
            d: model.d(),
            m: model.m(),
            a: MatrixData::from_matrix(&model.rate),
            h: MatrixData::from_matrix(&model.obs),
            prior: model.prior.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LGModelFile {
    pub d: usize,
    pub m: usize,
    /// Process-noise width; inferred from `sigma` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(rename = "A")]
    pub a: MatrixData,
    #[serde(rename = "H")]
    pub h: MatrixData,
    pub sigma: MatrixData,
    pub m0: Vec<f64>,
    #[serde(rename = "Sigma0")]
    pub sigma0: MatrixData,
}

impl LGModelFile {
    pub fn to_model(&self) -> Result<LGModel> {
        let p = match (self.p, &self.sigma) {
            (Some(p), _) => p,
            (None, MatrixData::Rows(r)) => r.first().map_or(0, Vec::len),
            (None, MatrixData::Flat(v)) => {
                if self.d == 0 || v.len() % self.d != 0 {
                    return Err(Error::Parse(format!(
                        "sigma has {} entries, not a multiple of d = {}",
                        v.len(),
                        self.d
                    )));
                }
                v.len() / self.d
            }
        };
        LGModel::new(
            self.a.to_matrix("drift matrix", self.d, self.d)?,
            self.h.to_matrix("observation matrix", self.d, self.m)?,
            self.sigma.to_matrix("noise loading", self.d, p)?,
            DVector::from_vec(self.m0.clone()),
            self.sigma0.to_matrix("prior covariance", self.d, self.d)?,
        )
    }

    pub fn from_model(lg: &LGModel) -> Self {
        LGModelFile {
            d: lg.d(),
            m: lg.m(),
            p: Some(lg.p()),
            a: MatrixData::from_matrix(&lg.a),
            h: MatrixData::from_matrix(&lg.h),
            sigma: MatrixData::from_matrix(&lg.sigma),
            m0: lg.m0.iter().copied().collect(),
            sigma0: MatrixData::from_matrix(&lg.sigma0),
        }
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn parse_finite_model(text: &str) -> Result<FiniteModel> {
    parse_json::<FiniteModelFile>(text)?.to_model()
}

pub fn load_finite_model(path: &Path) -> Result<FiniteModel> {
    parse_finite_model(&read_text(path)?)
}

pub fn parse_lg_model(text: &str) -> Result<LGModel> {
    parse_json::<LGModelFile>(text)?.to_model()
}

pub fn load_lg_model(path: &Path) -> Result<LGModel> {
    parse_lg_model(&read_text(path)?)
}

/// Parses `"0,1"` style vectors.
pub fn parse_vector(text: &str) -> Result<DVector<f64>> {
    let values = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("vector {text:?}")));
    }
    Ok(DVector::from_vec(values))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_rows<W: Write>(out: W, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

/// Columns `t, pi_1..pi_d`.
pub fn write_filter_csv<W: Write>(out: W, grid: &TimeGrid, states: &[FilterState]) -> Result<()> {
    if states.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch {
            expected: grid.steps() + 1,
            got: states.len(),
        });
    }
    let d = states.first().map_or(0, |s| s.pi.len());
    let header = std::iter::once("t".to_string()).chain(numbered("pi", d)).collect();
    write_rows(
        out,
        header,
        states.iter().enumerate().map(|(k, s)| {
            std::iter::once(fmt(grid.time(k))).chain(s.pi.iter().map(|&v| fmt(v))).collect()
        }),
    )
}

/// Columns `t, m_1..m_d, Sigma_11..Sigma_dd` with the covariance row-major.
pub fn write_kalman_csv<W: Write>(out: W, grid: &TimeGrid, states: &[KalmanState]) -> Result<()> {
    if states.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch {
            expected: grid.steps() + 1,
            got: states.len(),
        });
    }
    let d = states.first().map_or(0, |s| s.mean.len());
    let header = std::iter::once("t".to_string())
        .chain(numbered("m", d))
        .chain((1..=d).flat_map(|i| (1..=d).map(move |j| format!("Sigma_{i}{j}"))))
        .collect();
    write_rows(
        out,
        header,
        states.iter().enumerate().map(|(k, s)| {
            std::iter::once(fmt(grid.time(k)))
                .chain(s.mean.iter().map(|&v| fmt(v)))
                .chain(s.cov.transpose().iter().map(|&v| fmt(v)))
                .collect()
        }),
    )
}

/// Columns `t, Z_1..Z_m`: the cumulative observation path from `Z_0 = 0`.
pub fn write_observation_csv<W: Write>(out: W, grid: &TimeGrid, obs: &ObservationPath) -> Result<()> {
    obs.check_grid(grid)?;
    let m = obs.cumulative.ncols();
    let header = std::iter::once("t".to_string()).chain(numbered("Z", m)).collect();
    write_rows(
        out,
        header,
        (0..=grid.steps()).map(|k| {
            std::iter::once(fmt(grid.time(k)))
                .chain(obs.cumulative.row(k).iter().map(|&v| fmt(v)))
                .collect()
        }),
    )
}

/// Reads a `t, Z_1..Z_m` file on a uniform grid starting at 0. The Brownian
/// part of a recorded path is unknown, so `noise_increments` is left at zero.
pub fn read_observation_csv<R: Read>(input: R) -> Result<(TimeGrid, ObservationPath)> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers().map_err(csv_err)?.len();
    if cols < 2 {
        return Err(Error::Parse("observation file needs t and at least one Z column".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != cols {
            return Err(Error::Parse(format!("row {} has {} fields, expected {cols}", rows.len() + 2, row.len())));
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::Parse("observation file needs at least two rows".into()));
    }
    let k_steps = rows.len() - 1;
    let horizon = rows[k_steps][0];
    let grid = TimeGrid::new(horizon, k_steps)?;
    for (k, row) in rows.iter().enumerate() {
        if (row[0] - grid.time(k)).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Parse(format!("time column is not a uniform grid from 0 at row {}", k + 2)));
        }
    }
    let m = cols - 1;
    let cumulative = DMatrix::from_fn(k_steps + 1, m, |k, c| rows[k][c + 1]);
    if cumulative.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation path".into()));
    }
    let increments = DMatrix::from_fn(k_steps, m, |k, c| cumulative[(k + 1, c)] - cumulative[(k, c)]);
    Ok((
        grid,
        ObservationPath {
            increments,
            cumulative,
            noise_increments: DMatrix::zeros(k_steps, m),
        },
    ))
}

/// Columns `t, path_id, Y_1..Y_d, V_11..V_dm, U_1..U_m`; `V` and `U` are
/// left empty at the terminal time.
pub fn write_dual_trajectory_csv<W: Write>(
    out: W,
    traj: &DualTrajectory,
    ensemble: &PathEnsemble,
    paths: &[usize],
) -> Result<()> {
    let (d, m, k_steps) = (traj.d(), traj.m(), traj.grid.steps());
    if let Some(&bad) = paths.iter().find(|&&p| p >= ensemble.n_paths) {
        return Err(Error::InvalidArgument(format!(
            "path {bad} outside ensemble of {}",
            ensemble.n_paths
        )));
    }
    let header = ["t".to_string(), "path_id".to_string()]
        .into_iter()
        .chain(numbered("Y", d))
        .chain((1..=d).flat_map(|i| (1..=m).map(move |c| format!("V_{i}{c}"))))
        .chain(numbered("U", m))
        .collect();
    let rows = paths.iter().flat_map(|&p| {
        traj.materialize(ensemble, p).into_iter().enumerate().map(move |(k, v)| {
            let mut row = vec![fmt(traj.grid.time(k)), p.to_string()];
            row.extend(v.y.iter().map(|&x| fmt(x)));
            if k < k_steps {
                row.extend((0..d).flat_map(|i| (0..m).map(move |c| (i, c))).map(|(i, c)| fmt(v.v[c * d + i])));
                row.extend(v.u.iter().map(|&x| fmt(x)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d * m + m));
            }
            row
        })
    });
    write_rows(out, header, rows)
}
