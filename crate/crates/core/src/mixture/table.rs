use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Numeric,
    Count,
    /// Categories are the integers `1..=q`.
    Nominal(usize),
}

impl ColumnType {
    pub fn accepts(&self, v: f64) -> bool {
        match self {
            ColumnType::Numeric => v.is_finite(),
            ColumnType::Count => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
            ColumnType::Nominal(q) => v >= 1.0 && v <= *q as f64 && v.fract() == 0.0,
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnType::Numeric => f.write_str("numeric"),
            ColumnType::Count => f.write_str("count"),
            ColumnType::Nominal(q) => write!(f, "nominal({q})"),
        }
    }
}

impl FromStr for ColumnType {
    type Err = TableError;

    /// Bare `nominal` parses with arity 0, meaning "infer from the data".
    fn from_str(s: &str) -> Result<Self, TableError> {
        let s = s.trim();
        match s {
            "numeric" => Ok(ColumnType::Numeric),
            "count" => Ok(ColumnType::Count),
            "nominal" => Ok(ColumnType::Nominal(0)),
            _ => s
                .strip_prefix("nominal(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|q| q.trim().parse().ok())
                .filter(|&q| q >= 2)
                .map(ColumnType::Nominal)
                .ok_or_else(|| TableError::Header(format!("unknown column type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    columns: Vec<Column>,
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("header: {0}")]
    Header(String),
    #[error("line {line}, column {column} (`{name}`): {msg}")]
    Cell {
        line: usize,
        column: usize,
        name: String,
        msg: String,
    },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Width { line: usize, expected: usize, found: usize },
    #[error("table has no rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TableSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self, TableError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() || c.name.contains([',', ':']) {
                return Err(TableError::Header(format!("invalid column name `{}`", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TableError::Header(format!("duplicate column name `{}`", c.name)));
            }
            if let ColumnType::Nominal(q) = c.ty {
                if q < 2 {
                    return Err(TableError::Header(format!("nominal column `{}` needs at least 2 categories", c.name)));
                }
            }
        }
        if columns.is_empty() {
            return Err(TableError::Header("no columns".into()));
        }
        Ok(TableSchema { columns })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn ty(&self, col: usize) -> ColumnType {
        self.columns[col].ty
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Compact one-line form `name:type,name:type`.
    pub fn to_compact(&self) -> String {
        self.columns
            .iter()
            .map(|c| format!("{}:{}", c.name, c.ty))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_compact(s: &str) -> Result<Self, TableError> {
        let columns = s
            .split(',')
            .map(|part| {
                let (name, ty) = part
                    .split_once(':')
                    .ok_or_else(|| TableError::Header(format!("expected `name:type`, found `{part}`")))?;
                Ok(Column {
                    name: name.trim().to_string(),
                    ty: ty.parse()?,
                })
            })
            .collect::<Result<Vec<_>, TableError>>()?;
        TableSchema::new(columns)
    }
}

/// A partially observed row: `None` marks a missing cell.
pub type Row = Vec<Option<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: TableSchema,
    rows: Vec<Row>,
}

impl Table {
    pub fn new(schema: TableSchema, rows: Vec<Row>) -> Result<Self, TableError> {
        if rows.is_empty() {
            return Err(TableError::Empty);
        }
        for (r, row) in rows.iter().enumerate() {
            check_row(&schema, row, r + 1)?;
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.rows.iter().map(move |r| r[col])
    }

    /// Read CSV with a two-line header: names, then types. `?` or an empty
    /// field is a missing cell.
    pub fn from_csv(text: &str) -> Result<Self, TableError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let names = records
            .next()
            .ok_or_else(|| TableError::Header("missing column-name line".into()))??;
        let types = records
            .next()
            .ok_or_else(|| TableError::Header("missing column-type line".into()))??;
        if names.len() != types.len() {
            return Err(TableError::Header(format!(
                "{} column names but {} column types",
                names.len(),
                types.len()
            )));
        }
        let mut tys: Vec<ColumnType> = types.iter().map(str::parse).collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != names.len() {
                return Err(TableError::Width {
                    line,
                    expected: names.len(),
                    found: rec.len(),
                });
            }
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if cell.is_empty() || cell == "?" {
                        return Ok(None);
                    }
                    cell.parse::<f64>().map(Some).map_err(|_| TableError::Cell {
                        line,
                        column: c + 1,
                        name: names[c].to_string(),
                        msg: format!("`{cell}` is not a number"),
                    })
                })
                .collect::<Result<Row, _>>()?;
            rows.push((line, row));
        }
        for (c, ty) in tys.iter_mut().enumerate() {
            if *ty == ColumnType::Nominal(0) {
                let max = rows.iter().filter_map(|(_, r)| r[c]).fold(0.0f64, f64::max);
                *ty = ColumnType::Nominal((max as usize).max(2));
            }
        }
        let schema = TableSchema::new(
            names
                .iter()
                .zip(tys)
                .map(|(name, ty)| Column {
                    name: name.to_string(),
                    ty,
                })
                .collect(),
        )?;
        for (line, row) in &rows {
            check_row(&schema, row, *line)?;
        }
        Table::new(schema, rows.into_iter().map(|(_, r)| r).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.schema.columns.iter().map(|c| c.name.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        let types: Vec<String> = self.schema.columns.iter().map(|c| c.ty.to_string()).collect();
        out.push_str(&types.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        out
    }
}

pub fn format_row(row: &[Option<f64>]) -> String {
    row.iter()
        .map(|v| match v {
            Some(x) => format!("{x}"),
            None => "?".to_string(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn check_row(schema: &TableSchema, row: &[Option<f64>], line: usize) -> Result<(), TableError> {
    if row.len() != schema.len() {
        return Err(TableError::Width {
            line,
            expected: schema.len(),
            found: row.len(),
        });
    }
    for (c, v) in row.iter().enumerate() {
        if let Some(v) = v {
            let col = &schema.columns[c];
            if !col.ty.accepts(*v) {
                return Err(TableError::Cell {
                    line,
                    column: c + 1,
                    name: col.name.clone(),
                    msg: format!("{v} is not a valid {} value", col.ty),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_missing_cells() {
        let text = "a,b,c\nnumeric,count,nominal(3)\n0.5,2,1\n?,0,3\n-1.25,?,?\n";
        let t = Table::from_csv(text).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.rows()[1], vec![None, Some(0.0), Some(3.0)]);
        assert_eq!(t.to_csv(), text);
    }

    #[test]
    fn bare_nominal_infers_arity() {
        let t = Table::from_csv("x\nnominal\n1\n4\n2\n").unwrap();
        assert_eq!(t.schema().ty(0), ColumnType::Nominal(4));
    }

    #[test]
    fn cell_errors_carry_positions() {
        let err = Table::from_csv("a,b\nnumeric,count\n1,2\n3,-1\n").unwrap_err();
        match err {
            TableError::Cell { line, column, name, .. } => {
                assert_eq!((line, column, name.as_str()), (4, 2, "b"));
            }
            other => panic!("{other}"),
        }
        let err = Table::from_csv("a,b\nnumeric,numeric\n1,x\n").unwrap_err();
        assert!(err.to_string().contains("line 3, column 2"), "{err}");
        assert!(matches!(
            Table::from_csv("a,b\nnumeric,numeric\n1\n"),
            Err(TableError::Width { line: 3, .. })
        ));
    }

    #[test]
    fn schema_checks() {
        assert!(Table::from_csv("a,a\nnumeric,numeric\n1,2\n").is_err());
        assert!(Table::from_csv("a\nfloat\n1\n").is_err());
        assert!(matches!(Table::from_csv("a\nnumeric\n"), Err(TableError::Empty)));
        let s = TableSchema::from_compact("x:numeric,y:nominal(3),z:count").unwrap();
        assert_eq!(TableSchema::from_compact(&s.to_compact()).unwrap(), s);
    }
}
