//! Datasets, CSV ingestion and seeded sample splitting.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VitlError};
use crate::real::Real;

/// Row-aligned response `y`, covariate of interest `x` and remaining covariates `z`.
///
/// `z` is stored row-major with `dz` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    y: Vec<T>,
    x: Vec<T>,
    z: Vec<T>,
    dz: usize,
    response_name: String,
    interest_name: String,
    z_names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(y: Vec<T>, x: Vec<T>, z: Vec<T>, dz: usize) -> Result<Self> {
        let names = (1..=dz).map(|j| format!("z{j}")).collect();
        Self::with_names(y, x, z, dz, "y".into(), "x".into(), names)
    }

    pub fn with_names(
        y: Vec<T>,
        x: Vec<T>,
        z: Vec<T>,
        dz: usize,
        response_name: String,
        interest_name: String,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n || z.len() != n * dz || z_names.len() != dz {
            return Err(VitlError::Size(format!(
                "column lengths disagree: y={}, x={}, z={} (expected {}x{dz})",
                n,
                x.len(),
                z.len(),
                n
            )));
        }
        if n < 3 {
            return Err(VitlError::Size(format!("need at least 3 rows, got {n}")));
        }
        for i in 0..n {
            let finite = y[i].is_finite()
                && x[i].is_finite()
                && z[i * dz..(i + 1) * dz].iter().all(|v| v.is_finite());
            if !finite {
                return Err(VitlError::Ingestion {
                    row: i + 1,
                    column: "*".into(),
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(Self { y, x, z, dz, response_name, interest_name, z_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Total covariate dimension (`X` plus `Z`).
    pub fn d(&self) -> usize {
        self.dz + 1
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }

    pub fn z_row(&self, i: usize) -> &[T] {
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    pub fn z_flat(&self) -> &[T] {
        &self.z
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn interest_name(&self) -> &str {
        &self.interest_name
    }

    /// Rows at `idx`, in the given order. Unlike [`Dataset::new`] this allows fewer than 3 rows.
    pub fn subset(&self, idx: &[usize]) -> Dataset<T> {
        let mut z = Vec::with_capacity(idx.len() * self.dz);
        for &i in idx {
            z.extend_from_slice(self.z_row(i));
        }
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: idx.iter().map(|&i| self.x[i]).collect(),
            z,
            dz: self.dz,
            response_name: self.response_name.clone(),
            interest_name: self.interest_name.clone(),
            z_names: self.z_names.clone(),
        }
    }
}

/// Reads a comma-separated file with a header row. Every column other than the
/// response and the covariate of interest becomes part of `Z`, in file order.
pub fn load_csv<T: Real>(path: impl AsRef<Path>, response_col: &str, interest_col: &str) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| VitlError::MissingColumn(name.to_string()))
    };
    let yi = find(response_col)?;
    let xi = find(interest_col)?;
    let zcols: Vec<usize> = (0..headers.len()).filter(|&c| c != yi && c != xi).collect();

    let (mut y, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cell = |c: usize| -> Result<T> {
            let raw = rec.get(c).unwrap_or("");
            let v: T = raw.parse().map_err(|_| VitlError::Ingestion {
                row,
                column: headers[c].clone(),
                reason: format!("not numeric: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(VitlError::Ingestion {
                    row,
                    column: headers[c].clone(),
                    reason: format!("non-finite value {raw:?}"),
                });
            }
            Ok(v)
        };
        y.push(cell(yi)?);
        x.push(cell(xi)?);
        for &c in &zcols {
            z.push(cell(c)?);
        }
    }
    Dataset::with_names(
        y,
        x,
        z,
        zcols.len(),
        response_col.to_string(),
        interest_col.to_string(),
        zcols.iter().map(|&c| headers[c].clone()).collect(),
    )
}

/// Writes `data` as CSV (response, interest, then Z columns) with full round-trip precision.
pub fn write_csv<T: Real>(data: &Dataset<T>, out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![data.response_name.clone(), data.interest_name.clone()];
    header.extend(data.z_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![format!("{:?}", data.y[i]), format!("{:?}", data.x[i])];
        rec.extend(data.z_row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Balanced fold assignment produced by a seeded permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    folds: Vec<usize>,
    k: usize,
    seed: u64,
}

impl SplitPlan {
    /// Builds a plan from an explicit assignment; every fold must be nonempty.
    pub fn from_assignment(folds: Vec<usize>, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(VitlError::Parameter(format!("need K >= 2 folds, got {k}")));
        }
        let mut counts = vec![0usize; k];
        for &f in &folds {
            if f >= k {
                return Err(VitlError::Parameter(format!("fold id {f} out of range for K={k}")));
            }
            counts[f] += 1;
        }
        if counts.contains(&0) {
            return Err(VitlError::Size("every fold must be nonempty".into()));
        }
        Ok(Self { folds, k, seed })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.folds
    }

    /// Row indices of fold `f`, ascending.
    pub fn fold(&self, f: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(_, &g)| g == f)
            .map(|(i, _)| i)
            .collect()
    }

    /// Union of the listed folds, ascending.
    pub fn folds_union(&self, fs: &[usize]) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(_, g)| fs.contains(g))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits `0..n` into `k` folds whose sizes differ by at most one.
pub fn make_split(n: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(VitlError::Parameter(format!("need K >= 2 folds, got {k}")));
    }
    if n < k {
        return Err(VitlError::Size(format!("cannot split {n} rows into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0usize; n];
    for (pos, &row) in perm.iter().enumerate() {
        folds[row] = pos % k;
    }
    SplitPlan::from_assignment(folds, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_rows() {
        let f = tmp_csv("y,x,z1\n1,2,3\n4,5,6\n7,8,9\n1.5,2.5,3.5\n");
        let d: Dataset<f64> = load_csv(f.path(), "y", "x").unwrap();
        assert_eq!((d.n(), d.d()), (4, 2));
        assert_eq!(d.z_row(3), &[3.5]);
        assert_eq!(d.z_names(), &["z1".to_string()]);
    }

    #[test]
    fn z_column_order_preserved() {
        let f = tmp_csv("b,y,a,x\n1,2,3,4\n5,6,7,8\n9,10,11,12\n");
        let d: Dataset<f64> = load_csv(f.path(), "y", "x").unwrap();
        assert_eq!(d.z_names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(d.z_row(1), &[5.0, 7.0]);
    }

    #[test]
    fn missing_column_named() {
        let f = tmp_csv("y,w,z1\n1,2,3\n4,5,6\n7,8,9\n");
        match load_csv::<f64>(f.path(), "y", "x") {
            Err(VitlError::MissingColumn(c)) => assert_eq!(c, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_cites_row() {
        let f = tmp_csv("y,x,z1\n1,2,3\nNaN,5,6\n7,8,9\n");
        match load_csv::<f64>(f.path(), "y", "x") {
            Err(VitlError::Ingestion { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cites_row() {
        let f = tmp_csv("y,x,z1\n1,2,3\n4,5,6\n7,abc,9\n");
        assert!(matches!(
            load_csv::<f64>(f.path(), "y", "x"),
            Err(VitlError::Ingestion { row: 3, .. })
        ));
    }

    #[test]
    fn round_trip_full_precision() {
        let d = Dataset::new(
            vec![0.1, 1.0 / 3.0, -2.5e-300],
            vec![std::f64::consts::PI, 2.0, 1e10],
            vec![1.0 / 7.0, 0.0, -0.0],
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let f = tmp_csv(std::str::from_utf8(&buf).unwrap());
        let back: Dataset<f64> = load_csv(f.path(), "y", "x").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn split_examples() {
        let p = make_split(6, 3, 7).unwrap();
        assert!((0..3).all(|f| p.fold(f).len() == 2));
        let p = make_split(7, 3, 7).unwrap();
        let mut sizes: Vec<usize> = (0..3).map(|f| p.fold(f).len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert!(matches!(make_split(2, 3, 7), Err(VitlError::Size(_))));
    }

    proptest::proptest! {
        #[test]
        fn split_is_deterministic_balanced_partition(n in 2usize..300, k in 2usize..8, seed: u64) {
            proptest::prop_assume!(n >= k);
            let a = make_split(n, k, seed).unwrap();
            let b = make_split(n, k, seed).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            let sizes: Vec<usize> = (0..k).map(|f| a.fold(f).len()).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            proptest::prop_assert!(lo >= 1 && hi - lo <= 1);
            proptest::prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }
}
