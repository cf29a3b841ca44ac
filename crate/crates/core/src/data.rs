//! Observations `W = (Y, D, Z)`, the designated sub-vector `X` of `(D, Z)`
//! and the generated regressor `V = φ(D, Z, g)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Regressor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `D` is an endogenous regressor and `V = D - g(Z)` is a control function.
    ControlFunction,
    /// `D` is a selection indicator and `V = g(Z)` is the propensity score.
    Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub d: f64,
    pub z: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, d: f64, z: Vec<f64>) -> Self {
        Self { y, d, z }
    }

    /// Component `index` of the concatenation `(d, z)`.
    pub fn dz(&self, index: usize) -> f64 {
        if index == 0 {
            self.d
        } else {
            self.z[index - 1]
        }
    }
}

/// The generated regressor `V = φ(D, Z, g)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedRegressor {
    /// `v = d - g(z)`
    Residual,
    /// `v = g(z)`
    Prediction,
}

impl GeneratedRegressor {
    /// Sign of the Hadamard derivative: `D_φ g = s·g`.
    pub fn hadamard_sign(self) -> f64 {
        match self {
            GeneratedRegressor::Residual => -1.0,
            GeneratedRegressor::Prediction => 1.0,
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::ControlFunction => GeneratedRegressor::Residual,
            Mode::Selection => GeneratedRegressor::Prediction,
        }
    }

    /// Applies `φ` given `d` and the first-step prediction `g(z)`.
    #[inline]
    pub fn apply(self, d: f64, g_of_z: f64) -> f64 {
        match self {
            GeneratedRegressor::Residual => d - g_of_z,
            GeneratedRegressor::Prediction => g_of_z,
        }
    }
}

pub fn generated_regressor(
    spec: GeneratedRegressor,
    g: &dyn Regressor,
    obs: &Observation,
) -> Result<f64> {
    if g.input_dim() != obs.z.len() {
        return Err(Error::DimensionMismatch {
            expected: g.input_dim(),
            got: obs.z.len(),
        });
    }
    Ok(spec.apply(obs.d, g.predict(&obs.z)))
}

/// An immutable collection of observations with an explicit `X` designation.
///
/// Designation indices address the concatenation `(d, z)`: index 0 is `d`,
/// index `k >= 1` is `z_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    x_designation: Vec<usize>,
    mode: Mode,
    p: usize,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        x_designation: Vec<usize>,
        mode: Mode,
    ) -> Result<Self> {
        let p = observations.first().map(|o| o.z.len()).unwrap_or(0);
        if x_designation.is_empty() {
            return Err(Error::InvalidData("x designation is empty".into()));
        }
        for (pos, &idx) in x_designation.iter().enumerate() {
            if idx > p {
                return Err(Error::InvalidData(format!(
                    "x designation index {idx} out of range for (d, z1..z{p})"
                )));
            }
            if x_designation[..pos].contains(&idx) {
                return Err(Error::InvalidData(format!(
                    "x designation index {idx} repeated"
                )));
            }
            if mode == Mode::Selection && idx == 0 {
                return Err(Error::InvalidData(
                    "in selection mode X must be a sub-vector of z".into(),
                ));
            }
        }
        for (i, obs) in observations.iter().enumerate() {
            if obs.z.len() != p {
                return Err(Error::InvalidData(format!(
                    "observation {i} has {} z entries, expected {p}",
                    obs.z.len()
                )));
            }
            let finite = obs.y.is_finite() && obs.d.is_finite() && obs.z.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidData(format!(
                    "observation {i} has missing or non-finite entries"
                )));
            }
            if mode == Mode::Selection && obs.d != 0.0 && obs.d != 1.0 {
                return Err(Error::InvalidData(format!(
                    "observation {i}: selection indicator d = {} is not 0/1",
                    obs.d
                )));
            }
        }
        Ok(Self {
            observations,
            x_designation,
            mode,
            p,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Dimension of `z`.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn x_designation(&self) -> &[usize] {
        &self.x_designation
    }

    pub fn x_dim(&self) -> usize {
        self.x_designation.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn obs(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn extract_x(&self, obs: &Observation) -> Vec<f64> {
        self.x_designation.iter().map(|&k| obs.dz(k)).collect()
    }

    /// Writes `(x, v)` for an observation into `out` (length `x_dim + 1`).
    pub fn fill_xv(&self, obs: &Observation, v: f64, out: &mut [f64]) {
        for (slot, &k) in out.iter_mut().zip(&self.x_designation) {
            *slot = obs.dz(k);
        }
        out[self.x_designation.len()] = v;
    }

    /// Column labels of the designated `X`, e.g. `["d"]` or `["z1"]`.
    pub fn x_labels(&self) -> Vec<String> {
        self.x_designation.iter().map(|&k| column_label(k)).collect()
    }

    /// A dataset with the same designation and a subset of rows.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            observations: rows.iter().map(|&i| self.observations[i].clone()).collect(),
            x_designation: self.x_designation.clone(),
            mode: self.mode,
            p: self.p,
        }
    }

    pub fn from_csv(path: impl AsRef<Path>, x_columns: &[String], mode: Mode) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, x_columns, mode)
    }

    pub fn from_csv_reader<R: std::io::Read>(
        reader: R,
        x_columns: &[String],
        mode: Mode,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| Error::InvalidData("missing column `y`".into()))?;
        let d_col = find("d").ok_or_else(|| Error::InvalidData("missing column `d`".into()))?;
        let mut z_cols = Vec::new();
        while let Some(c) = find(&format!("z{}", z_cols.len() + 1)) {
            z_cols.push(c);
        }
        if z_cols.is_empty() {
            return Err(Error::InvalidData("missing column `z1`".into()));
        }
        for h in headers.iter() {
            let known = h == "y" || h == "d" || parse_z_label(h).is_some_and(|k| k <= z_cols.len());
            if !known {
                return Err(Error::InvalidData(format!(
                    "unexpected column `{h}` (z columns must be contiguous z1..zp)"
                )));
            }
        }
        let designation = x_columns
            .iter()
            .map(|label| {
                label_index(label).filter(|&k| k <= z_cols.len()).ok_or_else(|| {
                    Error::InvalidData(format!("x column `{label}` not present in data"))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut observations = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |c: usize| -> Result<f64> {
                let raw = record.get(c).unwrap_or("");
                raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::InvalidData(format!(
                        "row {}: column `{}` has missing or invalid value `{raw}`",
                        row + 1,
                        &headers[c]
                    ))
                })
            };
            let z = z_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
            observations.push(Observation::new(field(y_col)?, field(d_col)?, z));
        }
        if observations.is_empty() {
            return Err(Error::InvalidData("data file has no rows".into()));
        }
        Dataset::new(observations, designation, mode)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "d".to_string()];
        header.extend((1..=self.p).map(|k| format!("z{k}")));
        wtr.write_record(&header)?;
        for obs in &self.observations {
            let mut rec = vec![fmt_f64(obs.y), fmt_f64(obs.d)];
            rec.extend(obs.z.iter().map(|&v| fmt_f64(v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the identical `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn column_label(index: usize) -> String {
    if index == 0 {
        "d".to_string()
    } else {
        format!("z{index}")
    }
}

fn parse_z_label(label: &str) -> Option<usize> {
    label.strip_prefix('z')?.parse::<usize>().ok().filter(|&k| k >= 1)
}

/// Index into `(d, z)` for a column label.
pub fn label_index(label: &str) -> Option<usize> {
    if label == "d" {
        Some(0)
    } else {
        parse_z_label(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::FnRegressor;

    fn obs() -> Observation {
        Observation::new(0.0, 1.0, vec![2.0, 3.0])
    }

    fn dataset(designation: Vec<usize>) -> Dataset {
        Dataset::new(vec![obs()], designation, Mode::ControlFunction).unwrap()
    }

    #[test]
    fn extract_x_follows_designation_order() {
        assert_eq!(dataset(vec![0]).extract_x(&obs()), vec![1.0]);
        assert_eq!(dataset(vec![1, 2]).extract_x(&obs()), vec![2.0, 3.0]);
        assert_eq!(dataset(vec![2, 0]).extract_x(&obs()), vec![3.0, 1.0]);
    }

    #[test]
    fn generated_regressor_variants() {
        let zero = FnRegressor::new(2, |_| 0.0);
        let first = FnRegressor::new(2, |z| z[0]);
        let o = Observation::new(0.0, 2.0, vec![7.0, 1.0]);
        assert_eq!(generated_regressor(GeneratedRegressor::Residual, &zero, &o).unwrap(), 2.0);
        let o = Observation::new(0.0, 5.0, vec![3.0, 1.0]);
        assert_eq!(generated_regressor(GeneratedRegressor::Prediction, &first, &o).unwrap(), 3.0);
        assert_eq!(generated_regressor(GeneratedRegressor::Residual, &first, &o).unwrap(), 2.0);
        let wide = FnRegressor::new(3, |_| 0.0);
        assert!(matches!(
            generated_regressor(GeneratedRegressor::Residual, &wide, &o),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn hadamard_signs() {
        assert_eq!(GeneratedRegressor::Residual.hadamard_sign(), -1.0);
        assert_eq!(GeneratedRegressor::Prediction.hadamard_sign(), 1.0);
    }

    #[test]
    fn rejects_bad_designations_and_values() {
        let o = vec![obs()];
        assert!(Dataset::new(o.clone(), vec![3], Mode::ControlFunction).is_err());
        assert!(Dataset::new(o.clone(), vec![1, 1], Mode::ControlFunction).is_err());
        assert!(Dataset::new(o.clone(), vec![], Mode::ControlFunction).is_err());
        assert!(Dataset::new(o.clone(), vec![0], Mode::Selection).is_err());
        let nan = vec![Observation::new(f64::NAN, 1.0, vec![0.0])];
        assert!(Dataset::new(nan, vec![1], Mode::ControlFunction).is_err());
        let half = vec![Observation::new(0.0, 0.5, vec![0.0])];
        assert!(Dataset::new(half, vec![1], Mode::Selection).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let rows = vec![
            Observation::new(0.1, 1.0 / 3.0, vec![-2.5e-7, 3.0]),
            Observation::new(-1.0, 2.0, vec![1e10, -0.0]),
        ];
        let ds = Dataset::new(rows, vec![0], Mode::ControlFunction).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(&buf[..], &["d".into()], Mode::ControlFunction).unwrap();
        assert_eq!(back.observations(), ds.observations());
    }

    #[test]
    fn csv_errors() {
        let no_d = "y,z1\n1,2\n";
        assert!(Dataset::from_csv_reader(no_d.as_bytes(), &["z1".into()], Mode::ControlFunction).is_err());
        let missing = "y,d,z1\n1,,2\n";
        assert!(Dataset::from_csv_reader(missing.as_bytes(), &["d".into()], Mode::ControlFunction).is_err());
        let bad_x = "y,d,z1\n1,2,3\n";
        assert!(Dataset::from_csv_reader(bad_x.as_bytes(), &["z2".into()], Mode::ControlFunction).is_err());
    }
}
