//! Long-format observation tables.

use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {msg}")]
    Parse { row: usize, column: String, msg: String },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}, column `{column}`: level `{value}` is not in the declared vocabulary")]
    UnknownLevel { row: usize, column: String, value: String },
    #[error("column `{column}` has {got} levels, expected {expected}")]
    LevelMismatch { column: String, expected: usize, got: usize },
    #[error("column `{column}` has {got} rows, expected {expected}")]
    LengthMismatch { column: String, expected: usize, got: usize },
    #[error("column `{0}` has the wrong type")]
    WrongType(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Real(Vec<f64>),
    Categorical(Categorical),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Real(v) => v.len(),
            Column::Categorical(c) => c.codes.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Real(v) => Column::Real(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(c) => Column::Categorical(Categorical {
                levels: c.levels.clone(),
                codes: rows.iter().map(|&r| c.codes[r]).collect(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    columns: IndexMap<String, Column>,
    n_obs: usize,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(|k| k.as_str())
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.get(name)
    }

    fn push(&mut self, name: &str, col: Column) -> Result<(), DataError> {
        if !self.columns.is_empty() && col.len() != self.n_obs {
            return Err(DataError::LengthMismatch {
                column: name.to_string(),
                expected: self.n_obs,
                got: col.len(),
            });
        }
        self.n_obs = col.len();
        self.columns.insert(name.to_string(), col);
        Ok(())
    }

    pub fn add_real(&mut self, name: &str, values: Vec<f64>) -> Result<(), DataError> {
        self.push(name, Column::Real(values))
    }

    pub fn add_categorical(
        &mut self,
        name: &str,
        levels: Vec<String>,
        codes: Vec<usize>,
    ) -> Result<(), DataError> {
        if let Some((row, &c)) = codes.iter().enumerate().find(|(_, &c)| c >= levels.len()) {
            return Err(DataError::UnknownLevel {
                row,
                column: name.to_string(),
                value: c.to_string(),
            });
        }
        self.push(name, Column::Categorical(Categorical { levels, codes }))
    }

    /// Categorical column whose levels are `0..n_levels` rendered as text.
    pub fn add_indexed(&mut self, name: &str, n_levels: usize, codes: Vec<usize>) -> Result<(), DataError> {
        let width = n_levels.saturating_sub(1).to_string().len();
        let levels = (0..n_levels).map(|i| format!("{i:0width$}")).collect();
        self.add_categorical(name, levels, codes)
    }

    pub fn real(&self, name: &str) -> Result<&[f64], DataError> {
        match self.columns.get(name) {
            Some(Column::Real(v)) => Ok(v),
            Some(_) => Err(DataError::WrongType(name.to_string())),
            None => Err(DataError::MissingColumn(name.to_string())),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&Categorical, DataError> {
        match self.columns.get(name) {
            Some(Column::Categorical(c)) => Ok(c),
            Some(_) => Err(DataError::WrongType(name.to_string())),
            None => Err(DataError::MissingColumn(name.to_string())),
        }
    }

    pub fn replace_real(&mut self, name: &str, values: Vec<f64>) -> Result<(), DataError> {
        self.real(name)?;
        self.push(name, Column::Real(values))
    }

    /// The rows sorted by every column in turn: categorical codes, then
    /// real values. Equal keys mean identical rows, so any reordering of
    /// the same rows maps to the same sequence.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.n_obs).collect();
        rows.sort_by(|&a, &b| {
            self.columns
                .values()
                .map(|c| match c {
                    Column::Categorical(c) => c.codes[a].cmp(&c.codes[b]),
                    Column::Real(v) => v[a].total_cmp(&v[b]),
                })
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        rows
    }

    /// Rows in the given order (may repeat or drop rows).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self
                .columns
                .iter()
                .map(|(k, c)| (k.clone(), c.select(rows)))
                .collect(),
            n_obs: rows.len(),
        }
    }
}

/// Which columns to read and how.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub real: Vec<String>,
    /// Categorical columns with an optional fixed level vocabulary; without
    /// one the sorted distinct values are used.
    pub categorical: IndexMap<String, Option<Vec<String>>>,
}

impl CsvSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn real(mut self, name: &str) -> Self {
        self.real.push(name.to_string());
        self
    }

    pub fn categorical(mut self, name: &str, levels: Option<Vec<String>>) -> Self {
        self.categorical.insert(name.to_string(), levels);
        self
    }
}

/// Reads a long-format CSV. Row numbers in errors are 1-based data rows.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let real_idx: Vec<usize> = schema.real.iter().map(|n| index(n)).collect::<Result<_, _>>()?;
    let cat_idx: Vec<usize> = schema.categorical.keys().map(|n| index(n)).collect::<Result<_, _>>()?;

    let mut reals: Vec<Vec<f64>> = vec![Vec::new(); real_idx.len()];
    let mut cats: Vec<Vec<String>> = vec![Vec::new(); cat_idx.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        for (k, &ci) in real_idx.iter().enumerate() {
            let cell = rec.get(ci).unwrap_or("");
            let column = &schema.real[k];
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                return Err(DataError::MissingValue { row, column: column.clone() });
            }
            let v: f64 = cell.parse().map_err(|e| DataError::Parse {
                row,
                column: column.clone(),
                msg: format!("{e}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse { row, column: column.clone(), msg: "non-finite".into() });
            }
            reals[k].push(v);
        }
        for (k, &ci) in cat_idx.iter().enumerate() {
            let cell = rec.get(ci).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                let column = schema.categorical.get_index(k).unwrap().0.clone();
                return Err(DataError::MissingValue { row, column });
            }
            cats[k].push(cell.to_string());
        }
    }

    let mut ds = Dataset::new();
    for (name, v) in schema.real.iter().zip(reals) {
        ds.add_real(name, v)?;
    }
    for ((name, vocab), raw) in schema.categorical.iter().zip(cats) {
        let levels = match vocab {
            Some(l) => l.clone(),
            None => {
                let mut l = raw.clone();
                l.sort();
                l.dedup();
                l
            }
        };
        let lookup: std::collections::HashMap<&str, usize> =
            levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut codes = Vec::with_capacity(raw.len());
        for (r, v) in raw.iter().enumerate() {
            match lookup.get(v.as_str()) {
                Some(&c) => codes.push(c),
                None => {
                    return Err(DataError::UnknownLevel {
                        row: r + 1,
                        column: name.clone(),
                        value: v.clone(),
                    })
                }
            }
        }
        ds.add_categorical(name, levels, codes)?;
    }
    Ok(ds)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ds.columns.keys())?;
    for r in 0..ds.n_obs {
        let rec: Vec<String> = ds
            .columns
            .values()
            .map(|c| match c {
                Column::Real(v) => format!("{}", v[r]),
                Column::Categorical(c) => c.levels[c.codes[r]].clone(),
            })
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy_schema() -> CsvSchema {
        CsvSchema::new()
            .real("y")
            .categorical("PT", None)
            .categorical("SM", None)
            .categorical("Am", None)
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_toy() {
        let f = write("y,PT,SM,Am\n1.5,p1,s1,a\n2,p1,s2,b\n-0.25,p2,s1,b\n3,p2,s2,a\n");
        let ds = ingest_csv(f.path(), &toy_schema()).unwrap();
        assert_eq!(ds.n_obs(), 4);
        assert_eq!(ds.real("y").unwrap(), &[1.5, 2.0, -0.25, 3.0]);
        let am = ds.categorical("Am").unwrap();
        assert_eq!(am.levels, ["a", "b"]);
        assert_eq!(am.codes, [0, 1, 1, 0]);
    }

    #[test]
    fn missing_response_cell() {
        let f = write("y,PT,SM,Am\n1.5,p1,s1,a\n,p1,s2,b\n");
        match ingest_csv(f.path(), &toy_schema()).unwrap_err() {
            DataError::MissingValue { row, column } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn declared_vocabulary_is_enforced() {
        let f = write("y,PT,SM,Am\n1,p1,s1,c\n");
        let schema = toy_schema().categorical("Am", Some(vec!["a".into(), "b".into()]));
        assert!(matches!(
            ingest_csv(f.path(), &schema).unwrap_err(),
            DataError::UnknownLevel { row: 1, .. }
        ));
    }

    #[test]
    fn bad_number_and_missing_column() {
        let f = write("y,PT,SM,Am\nabc,p1,s1,a\n");
        assert!(matches!(ingest_csv(f.path(), &toy_schema()).unwrap_err(), DataError::Parse { .. }));
        let f = write("y,PT,Am\n1,p1,a\n");
        assert!(matches!(ingest_csv(f.path(), &toy_schema()).unwrap_err(), DataError::MissingColumn(_)));
    }

    #[test]
    fn write_then_ingest_round_trips() {
        let mut ds = Dataset::new();
        ds.add_real("y", vec![0.1, 1e-17, -3.25]).unwrap();
        ds.add_indexed("PT", 2, vec![0, 1, 1]).unwrap();
        ds.add_indexed("SM", 3, vec![2, 0, 1]).unwrap();
        ds.add_indexed("Am", 2, vec![1, 1, 0]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        assert_eq!(ingest_csv(f.path(), &toy_schema()).unwrap(), ds);
    }

    #[test]
    fn select_rows_and_length_checks() {
        let mut ds = Dataset::new();
        ds.add_real("y", vec![1.0, 2.0]).unwrap();
        assert!(ds.add_real("z", vec![1.0]).is_err());
        let s = ds.select_rows(&[1, 0, 1]);
        assert_eq!(s.real("y").unwrap(), &[2.0, 1.0, 2.0]);
    }

    #[test]
    fn canonical_order_ignores_input_order() {
        let mut ds = Dataset::new();
        ds.add_indexed("g", 2, vec![1, 0, 1, 0]).unwrap();
        ds.add_real("y", vec![0.5, 3.0, -1.0, 3.0]).unwrap();
        let a = ds.select_rows(&ds.canonical_order());
        let shuffled = ds.select_rows(&[2, 3, 0, 1]);
        let b = shuffled.select_rows(&shuffled.canonical_order());
        assert_eq!(a, b);
        assert_eq!(a.real("y").unwrap(), &[3.0, 3.0, -1.0, 0.5]);
    }
}
