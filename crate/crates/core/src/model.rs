//! Grouped datasets, model parameters and their unconstrained encoding,
//! vech/duplication-matrix algebra, and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One group's observations stored column-contiguously by predictor block.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: String,
    pub y: Vec<f64>,
    /// Row-major `n_i x d_a`.
    pub xa: Vec<f64>,
    /// Row-major `n_i x d_b`.
    pub xb: Vec<f64>,
    /// 1-based source row of each observation.
    pub rows: Vec<usize>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn xa_row(&self, j: usize, d_a: usize) -> &[f64] {
        &self.xa[j * d_a..(j + 1) * d_a]
    }

    #[inline]
    pub fn xb_row(&self, j: usize, d_b: usize) -> &[f64] {
        &self.xb[j * d_b..(j + 1) * d_b]
    }
}

/// A single observation (used for building datasets row by row).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub xa: Vec<f64>,
    pub xb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    groups: Vec<Group>,
    d_a: usize,
    d_b: usize,
}

impl Dataset {
    pub fn new(groups: Vec<Group>, d_a: usize, d_b: usize) -> Result<Self> {
        if d_a == 0 {
            return Err(Error::InvalidArgument(
                "at least one random-effect predictor is required".into(),
            ));
        }
        if groups.is_empty() {
            return Err(Error::InvalidArgument("dataset has no groups".into()));
        }
        for g in &groups {
            let n = g.y.len();
            if n == 0 {
                return Err(Error::Group {
                    group: g.id.clone(),
                    reason: "no observations".into(),
                });
            }
            if g.xa.len() != n * d_a || g.xb.len() != n * d_b || g.rows.len() != n {
                return Err(Error::Group {
                    group: g.id.clone(),
                    reason: format!("predictor dimensions disagree with d_a={d_a}, d_b={d_b}"),
                });
            }
            if let Some(j) = (0..n).find(|&j| {
                !g.y[j].is_finite()
                    || !g.xa_row(j, d_a).iter().all(|v| v.is_finite())
                    || !g.xb_row(j, d_b).iter().all(|v| v.is_finite())
            }) {
                return Err(Error::Group {
                    group: g.id.clone(),
                    reason: format!("non-finite value at row {}", g.rows[j]),
                });
            }
        }
        Ok(Dataset { groups, d_a, d_b })
    }

    /// Builds a dataset from `(group id, observation)` pairs, grouping by
    /// first appearance and keeping row order within groups.
    pub fn from_observations<I, S>(obs: I, d_a: usize, d_b: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Observation)>,
        S: Into<String>,
    {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<Group> = Vec::new();
        for (row, (id, o)) in obs.into_iter().enumerate() {
            let id = id.into();
            if o.xa.len() != d_a || o.xb.len() != d_b {
                return Err(Error::InvalidArgument(format!(
                    "row {}: expected {d_a} + {d_b} predictors",
                    row + 1
                )));
            }
            let k = *index.entry(id.clone()).or_insert_with(|| {
                groups.push(Group {
                    id,
                    y: Vec::new(),
                    xa: Vec::new(),
                    xb: Vec::new(),
                    rows: Vec::new(),
                });
                groups.len() - 1
            });
            let g = &mut groups[k];
            g.y.push(o.y);
            g.xa.extend_from_slice(&o.xa);
            g.xb.extend_from_slice(&o.xb);
            g.rows.push(row + 1);
        }
        Dataset::new(groups, d_a, d_b)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn d_b(&self) -> usize {
        self.d_b
    }

    /// Number of groups.
    pub fn m(&self) -> usize {
        self.groups.len()
    }

    /// Total number of observations.
    pub fn n_total(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    /// Average within-group sample size.
    pub fn n_bar(&self) -> f64 {
        self.n_total() as f64 / self.m() as f64
    }

    /// Iterates `(group index, group, observation index)` in storage order.
    pub fn observations(&self) -> impl Iterator<Item = (usize, &Group, usize)> + '_ {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| (0..g.len()).map(move |j| (i, g, j)))
    }

    /// Writes the dataset with columns `group,y,xa_1..,xb_1..`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let mut header = vec!["group".to_string(), "y".to_string()];
        header.extend((1..=self.d_a).map(|k| format!("xa_{k}")));
        header.extend((1..=self.d_b).map(|k| format!("xb_{k}")));
        w.write_record(&header)?;
        for (_, g, j) in self.observations() {
            let mut rec = vec![g.id.clone(), g.y[j].to_string()];
            rec.extend(g.xa_row(j, self.d_a).iter().map(f64::to_string));
            rec.extend(g.xb_row(j, self.d_b).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// The column schema matching [`Dataset::write_csv`].
    pub fn written_schema(&self) -> CsvSchema {
        CsvSchema {
            group_col: "group".into(),
            y_col: "y".into(),
            xa_cols: (1..=self.d_a).map(|k| format!("xa_{k}")).collect(),
            xb_cols: (1..=self.d_b).map(|k| format!("xb_{k}")).collect(),
            xa_intercept: false,
            xb_intercept: false,
            delimiter: b',',
        }
    }
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub group_col: String,
    pub y_col: String,
    pub xa_cols: Vec<String>,
    pub xb_cols: Vec<String>,
    /// Prepend a constant 1 to the random-effect predictors.
    pub xa_intercept: bool,
    /// Prepend a constant 1 to the fixed-only predictors.
    pub xb_intercept: bool,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            group_col: "group".into(),
            y_col: "y".into(),
            xa_cols: Vec::new(),
            xb_cols: Vec::new(),
            xa_intercept: true,
            xb_intercept: false,
            delimiter: b',',
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Schema("empty file: no header row".into()));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let g_idx = col(&schema.group_col)?;
    let y_idx = col(&schema.y_col)?;
    let xa_idx = schema
        .xa_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let xb_idx = schema
        .xb_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let d_a = xa_idx.len() + schema.xa_intercept as usize;
    let d_b = xb_idx.len() + schema.xb_intercept as usize;

    let mut obs = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let num = |idx: usize| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[idx].to_string(),
                    value: raw.to_string(),
                })
        };
        let mut xa = Vec::with_capacity(d_a);
        if schema.xa_intercept {
            xa.push(1.0);
        }
        for &i in &xa_idx {
            xa.push(num(i)?);
        }
        let mut xb = Vec::with_capacity(d_b);
        if schema.xb_intercept {
            xb.push(1.0);
        }
        for &i in &xb_idx {
            xb.push(num(i)?);
        }
        let id = rec.get(g_idx).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: schema.group_col.clone(),
                value: String::new(),
            });
        }
        obs.push((id, Observation { y: num(y_idx)?, xa, xb }));
    }
    if obs.is_empty() {
        return Err(Error::Schema("empty file: no data rows".into()));
    }
    Dataset::from_observations(obs, d_a, d_b)
}

/// Model parameters `(beta_A, beta_B, Sigma, phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub beta_a: DVector<f64>,
    pub beta_b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub phi: f64,
}

impl Parameters {
    pub fn new(
        beta_a: DVector<f64>,
        beta_b: DVector<f64>,
        sigma: DMatrix<f64>,
        phi: f64,
    ) -> Result<Self> {
        let d = beta_a.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::InvalidArgument(format!(
                "Sigma must be {d}x{d}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidArgument(format!("phi must be positive, got {phi}")));
        }
        let p = Parameters {
            beta_a,
            beta_b,
            sigma,
            phi,
        };
        p.sigma_cholesky()?;
        Ok(p)
    }

    /// Scalar random-intercept convenience constructor.
    pub fn scalar(beta0: f64, beta_b: &[f64], sigma2: f64, phi: f64) -> Result<Self> {
        Parameters::new(
            DVector::from_element(1, beta0),
            DVector::from_column_slice(beta_b),
            DMatrix::from_element(1, 1, sigma2),
            phi,
        )
    }

    pub fn d_a(&self) -> usize {
        self.beta_a.len()
    }

    pub fn d_b(&self) -> usize {
        self.beta_b.len()
    }

    /// Lower Cholesky factor of Sigma; errors unless Sigma is symmetric positive definite.
    pub fn sigma_cholesky(&self) -> Result<DMatrix<f64>> {
        let s = &self.sigma;
        let scale = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if (s - s.transpose()).amax() > 1e-12 * scale.max(1.0) {
            return Err(Error::NotPositiveDefinite("Sigma is not symmetric".into()));
        }
        nalgebra::Cholesky::new(s.clone())
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))
    }

    /// Flattened `[beta_A, beta_B, vech(Sigma), phi]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta_a.iter().chain(self.beta_b.iter()).copied().collect();
        v.extend(vech(&self.sigma).iter());
        v.push(self.phi);
        v
    }

    pub fn n_free(&self) -> usize {
        unconstrained_len(self.d_a(), self.d_b())
    }
}

pub fn unconstrained_len(d_a: usize, d_b: usize) -> usize {
    d_a + d_b + d_a * (d_a + 1) / 2 + 1
}

/// Parameters mapped to `R^k`: betas raw, Sigma by log-Cholesky in vech
/// order, phi by its log.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub theta: Vec<f64>,
    pub d_a: usize,
    pub d_b: usize,
}

pub fn to_unconstrained(p: &Parameters) -> Result<UnconstrainedParams> {
    let l = p.sigma_cholesky()?;
    let d = p.d_a();
    let mut theta: Vec<f64> = p.beta_a.iter().chain(p.beta_b.iter()).copied().collect();
    for c in 0..d {
        for r in c..d {
            theta.push(if r == c { l[(r, c)].ln() } else { l[(r, c)] });
        }
    }
    theta.push(p.phi.ln());
    Ok(UnconstrainedParams {
        theta,
        d_a: d,
        d_b: p.d_b(),
    })
}

pub fn from_unconstrained(u: &UnconstrainedParams) -> Result<Parameters> {
    let (d_a, d_b) = (u.d_a, u.d_b);
    if u.theta.len() != unconstrained_len(d_a, d_b) {
        return Err(Error::InvalidArgument(format!(
            "expected {} unconstrained coordinates, got {}",
            unconstrained_len(d_a, d_b),
            u.theta.len()
        )));
    }
    if let Some(v) = u.theta.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite coordinate {v}")));
    }
    let t = &u.theta;
    let beta_a = DVector::from_column_slice(&t[..d_a]);
    let beta_b = DVector::from_column_slice(&t[d_a..d_a + d_b]);
    let mut l = DMatrix::zeros(d_a, d_a);
    let mut k = d_a + d_b;
    for c in 0..d_a {
        for r in c..d_a {
            l[(r, c)] = if r == c { t[k].exp() } else { t[k] };
            k += 1;
        }
    }
    let sigma = &l * l.transpose();
    let phi = t[k].exp();
    if !(phi > 0.0 && phi.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("coordinates overflow".into()));
    }
    Ok(Parameters {
        beta_a,
        beta_b,
        sigma,
        phi,
    })
}

/// Column-major lower-triangle stacking of a square matrix.
pub fn vech(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    let mut v = Vec::with_capacity(d * (d + 1) / 2);
    for c in 0..d {
        for r in c..d {
            v.push(a[(r, c)]);
        }
    }
    DVector::from_vec(v)
}

/// Column-major stacking.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// The `d^2 x d(d+1)/2` 0/1 matrix with `D vech(A) = vec(A)` for symmetric A.
pub fn duplication_matrix(d: usize) -> DMatrix<f64> {
    let mut dm = DMatrix::zeros(d * d, d * (d + 1) / 2);
    let mut k = 0;
    for c in 0..d {
        for r in c..d {
            dm[(c * d + r, k)] = 1.0;
            dm[(r * d + c, k)] = 1.0;
            k += 1;
        }
    }
    dm
}

/// Moore-Penrose inverse `(D'D)^{-1} D'` of the duplication matrix.
pub fn dup_pinv(d: usize) -> DMatrix<f64> {
    let dm = duplication_matrix(d);
    // D'D is diagonal: 1 for diagonal entries, 2 for off-diagonal ones.
    let dtd = dm.transpose() * &dm;
    let mut out = dm.transpose();
    for k in 0..out.nrows() {
        let s = 1.0 / dtd[(k, k)];
        out.row_mut(k).scale_mut(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_csv() -> &'static str {
        "school,y,ses\nA,1.5,0.1\nB,2.0,0.3\nA,0.5,-0.2\n"
    }

    #[test]
    fn load_groups_and_intercepts() {
        let schema = CsvSchema {
            group_col: "school".into(),
            xa_cols: vec!["ses".into()],
            xb_intercept: false,
            ..CsvSchema::default()
        };
        let ds = read_csv(toy_csv().as_bytes(), &schema).unwrap();
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.groups()[0].len(), 2);
        assert_eq!(ds.groups()[1].len(), 1);
        assert_eq!(ds.d_a(), 2);
        assert_eq!(ds.d_b(), 0);
        assert_eq!(ds.groups()[0].xa, vec![1.0, 0.1, 1.0, -0.2]);
        assert_eq!(ds.groups()[0].rows, vec![1, 3]);
        assert_eq!(ds.n_bar(), 1.5);
    }

    #[test]
    fn math_achievement_shape() {
        let text = "School,MathAch,SES,isMale,isMinority\n\
                    1224,5.876,-1.528,0,0\n1224,19.708,-0.588,0,0\n1288,20.349,0.332,1,0\n";
        let schema = CsvSchema {
            group_col: "School".into(),
            y_col: "MathAch".into(),
            xa_cols: vec!["SES".into()],
            xb_cols: vec!["isMale".into(), "isMinority".into()],
            xa_intercept: true,
            xb_intercept: false,
            delimiter: b',',
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!((ds.d_a(), ds.d_b(), ds.m()), (2, 2, 2));
    }

    #[test]
    fn missing_column_is_named() {
        let schema = CsvSchema {
            y_col: "MathAch".into(),
            group_col: "school".into(),
            ..CsvSchema::default()
        };
        let err = read_csv(toy_csv().as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("MathAch"), "{err}");
    }

    #[test]
    fn bad_cell_reports_row() {
        let schema = CsvSchema {
            group_col: "school".into(),
            ..CsvSchema::default()
        };
        let err = read_csv("school,y\nA,1\nB,\n".as_bytes(), &schema).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(read_csv("".as_bytes(), &schema).is_err());
        assert!(read_csv("school,y\n".as_bytes(), &schema).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::from_observations(
            vec![
                ("g1", Observation { y: 0.1, xa: vec![1.0], xb: vec![0.25, 1.0 / 3.0] }),
                ("g1", Observation { y: 3.0, xa: vec![1.0], xb: vec![0.1, 0.2] }),
                ("g2", Observation { y: -2.5e-7, xa: vec![1.0], xb: vec![0.5, 0.75] }),
            ],
            1,
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, &ds.written_schema()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unconstrained_identity_cases() {
        let p = Parameters::new(
            DVector::from_vec(vec![0.5, -1.0]),
            DVector::from_vec(vec![2.0]),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let u = to_unconstrained(&p).unwrap();
        assert_eq!(&u.theta[3..], &[0.0, 0.0, 0.0, 0.0]);
        let p = Parameters::scalar(0.0, &[], 1.0, std::f64::consts::E).unwrap();
        let u = to_unconstrained(&p).unwrap();
        assert!((u.theta.last().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_spd_sigma_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = Parameters::new(DVector::zeros(2), DVector::zeros(0), sigma, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn duplication_small_cases() {
        assert_eq!(duplication_matrix(1), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(dup_pinv(1), DMatrix::from_element(1, 1, 1.0));
        let a = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 5.0]);
        assert_eq!(duplication_matrix(2) * vech(&a), vec(&a));
        for d in 1..=3 {
            let prod = dup_pinv(d) * duplication_matrix(d);
            let k = d * (d + 1) / 2;
            assert!((prod - DMatrix::<f64>::identity(k, k)).amax() < 1e-15);
        }
    }

    fn spd_from(entries: &[f64], d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(d, d, &entries[..d * d]);
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    }

    proptest! {
        #[test]
        fn unconstrained_round_trip(
            entries in prop::collection::vec(-2.0f64..2.0, 9),
            betas in prop::collection::vec(-5.0f64..5.0, 5),
            log_phi in -3.0f64..3.0,
            d in 1usize..=3,
        ) {
            let sigma = spd_from(&entries, d);
            let p = Parameters::new(
                DVector::from_column_slice(&betas[..d]),
                DVector::from_column_slice(&betas[d..]),
                sigma.clone(),
                log_phi.exp(),
            ).unwrap();
            let back = from_unconstrained(&to_unconstrained(&p).unwrap()).unwrap();
            prop_assert!((back.sigma - sigma).amax() < 1e-12);
            prop_assert!((back.phi - p.phi).abs() < 1e-12 * p.phi);
            prop_assert_eq!(back.beta_a, p.beta_a);
            prop_assert_eq!(back.beta_b, p.beta_b);
        }

        #[test]
        fn vech_via_pinv(entries in prop::collection::vec(-3.0f64..3.0, 9), d in 1usize..=3) {
            let m = DMatrix::from_row_slice(d, d, &entries[..d * d]);
            let a = &m + m.transpose();
            let via = dup_pinv(d) * vec(&a);
            prop_assert!((via - vech(&a)).amax() < 1e-14);
        }
    }
}
