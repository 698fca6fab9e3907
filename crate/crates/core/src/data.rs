//! In-memory column table. Missing values are `NaN`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl DataTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Validation(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::Validation(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::Validation(format!("duplicate column `{name}`")));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|j| self.column(j))
    }

    /// Keep the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            let j = self
                .index_of(name)
                .ok_or_else(|| Error::Validation(format!("data has no column `{name}`")))?;
            cols.push(self.columns[j].clone());
        }
        Self::new(names.to_vec(), cols)
    }

    /// Listwise deletion: drop every row with a missing value.
    pub fn complete_cases(&self) -> Self {
        let keep: Vec<usize> = (0..self.n_rows())
            .filter(|&i| self.columns.iter().all(|c| !c[i].is_nan()))
            .collect();
        self.rows(&keep)
    }

    /// Rows by index; indices may repeat (bootstrap resampling).
    pub fn rows(&self, idx: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|c| idx.iter().map(|&i| c[i]).collect())
            .collect();
        Self {
            names: self.names.clone(),
            columns,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| c.iter().any(|v| v.is_nan()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> DataTable {
        DataTable::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, f64::NAN, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap()
    }

    #[test]
    fn listwise_deletion() {
        let t = table().complete_cases();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.column(0), &[1.0, 3.0]);
        assert_eq!(t.column(1), &[4.0, 6.0]);
    }

    #[test]
    fn select_reorders_and_rejects_unknown() {
        let t = table();
        let s = t.select(&["b".into(), "a".into()]).unwrap();
        assert_eq!(s.names(), &["b".to_string(), "a".to_string()]);
        assert!(t.select(&["zz".into()]).is_err());
    }

    #[test]
    fn ragged_columns_rejected() {
        assert!(DataTable::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![]]).is_err());
    }
}
