//! Column-oriented numeric dataset shared by the fitters and the CLI.

use crate::error::{Error, Result};

/// Named numeric columns of equal length. Factors are carried as numeric
/// level codes; the smooth constructors map distinct values to levels.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if let Some(first) = self.cols.first() {
            if values.len() != first.len() {
                return Err(Error::DimensionMismatch(format!(
                    "column '{}' has {} rows, expected {}",
                    name,
                    values.len(),
                    first.len()
                )));
            }
        }
        if self.names.iter().any(|n| *n == name) {
            return Err(Error::Invalid(format!("duplicate column '{name}'")));
        }
        self.names.push(name);
        self.cols.push(values);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.cols[i].as_slice())
            .ok_or_else(|| Error::MissingCovariate(name.to_string()))
    }

    /// Column with every entry checked finite.
    pub fn finite_column(&self, name: &str) -> Result<&[f64]> {
        let col = self.column(name)?;
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(name.to_string()));
        }
        Ok(col)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_duplicate_columns() {
        let mut d = Dataset::new();
        d.push_column("a", vec![1.0, 2.0]).unwrap();
        assert!(d.push_column("b", vec![1.0]).is_err());
        assert!(d.push_column("a", vec![3.0, 4.0]).is_err());
    }

    #[test]
    fn finite_column_catches_nan() {
        let mut d = Dataset::new();
        d.push_column("a", vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            d.finite_column("a"),
            Err(Error::NonFiniteData(_))
        ));
        assert!(matches!(d.column("zz"), Err(Error::MissingCovariate(_))));
    }
}
