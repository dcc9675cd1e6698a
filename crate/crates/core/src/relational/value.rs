//! Typed values, schemas and the columnar row relation.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Int,
    Float,
    #[serde(alias = "str")]
    String,
}

impl DataType {
    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::Int | DataType::Float)
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::Int => "int",
            DataType::Float => "float",
            DataType::String => "string",
        })
    }
}

impl std::str::FromStr for DataType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int" | "integer" => Ok(DataType::Int),
            "float" | "double" | "real" => Ok(DataType::Float),
            "string" | "str" | "text" => Ok(DataType::String),
            other => Err(Error::invalid(format!("unknown type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn data_type(&self) -> DataType {
        match self {
            Value::Int(_) => DataType::Int,
            Value::Float(_) => DataType::Float,
            Value::Str(_) => DataType::String,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(v) => Some(v as f64),
            Value::Float(v) => Some(v),
            Value::Str(_) => None,
        }
    }

    /// Compares two values; ints and floats compare numerically, strings
    /// lexicographically. Mixed string/number comparisons are `None`.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (a, b) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

/// Hashable, totally ordered form of a value used for join and group keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyValue {
    Int(i64),
    Float(OrderedBits),
    Str(String),
}

impl From<KeyValue> for Value {
    fn from(k: KeyValue) -> Value {
        match k {
            KeyValue::Int(v) => Value::Int(v),
            KeyValue::Float(v) => Value::Float(v.0),
            KeyValue::Str(s) => Value::Str(s),
        }
    }
}

/// An `f64` ordered by `total_cmp` and hashed by its bits (`-0.0` folded
/// onto `0.0`).
#[derive(Debug, Clone, Copy)]
pub struct OrderedBits(pub f64);

impl OrderedBits {
    fn canonical(self) -> u64 {
        if self.0 == 0.0 {
            0
        } else {
            self.0.to_bits()
        }
    }
}

impl PartialEq for OrderedBits {
    fn eq(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}

impl Eq for OrderedBits {}

impl std::hash::Hash for OrderedBits {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical().hash(state)
    }
}

impl PartialOrd for OrderedBits {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedBits {
    fn cmp(&self, other: &Self) -> Ordering {
        if self == other {
            Ordering::Equal
        } else {
            self.0.total_cmp(&other.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub dtype: DataType,
}

impl Field {
    pub fn new(name: impl Into<String>, dtype: DataType) -> Self {
        Field {
            name: name.into(),
            dtype,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Self {
        Schema { fields }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, i: usize) -> &Field {
        &self.fields[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int(Vec<i64>),
    Float(Vec<f64>),
    Str(Vec<String>),
}

impl Column {
    pub fn empty(dtype: DataType) -> Self {
        match dtype {
            DataType::Int => Column::Int(Vec::new()),
            DataType::Float => Column::Float(Vec::new()),
            DataType::String => Column::Str(Vec::new()),
        }
    }

    pub fn dtype(&self) -> DataType {
        match self {
            Column::Int(_) => DataType::Int,
            Column::Float(_) => DataType::Float,
            Column::Str(_) => DataType::String,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Int(v) => v.len(),
            Column::Float(v) => v.len(),
            Column::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, i: usize) -> Value {
        match self {
            Column::Int(v) => Value::Int(v[i]),
            Column::Float(v) => Value::Float(v[i]),
            Column::Str(v) => Value::Str(v[i].clone()),
        }
    }

    pub fn key(&self, i: usize) -> KeyValue {
        match self {
            Column::Int(v) => KeyValue::Int(v[i]),
            Column::Float(v) => KeyValue::Float(OrderedBits(v[i])),
            Column::Str(v) => KeyValue::Str(v[i].clone()),
        }
    }

    /// Numeric value of row `i`, `None` for strings.
    pub fn f64_at(&self, i: usize) -> Option<f64> {
        match self {
            Column::Int(v) => Some(v[i] as f64),
            Column::Float(v) => Some(v[i]),
            Column::Str(_) => None,
        }
    }

    pub fn push(&mut self, v: Value) -> Result<()> {
        match (self, v) {
            (Column::Int(c), Value::Int(x)) => c.push(x),
            (Column::Float(c), Value::Float(x)) => c.push(x),
            (Column::Float(c), Value::Int(x)) => c.push(x as f64),
            (Column::Str(c), Value::Str(x)) => c.push(x),
            (c, v) => {
                return Err(Error::invalid(format!(
                    "value {v:?} does not fit a {} column",
                    c.dtype()
                )))
            }
        }
        Ok(())
    }

    pub fn gather(&self, idx: &[usize]) -> Column {
        match self {
            Column::Int(v) => Column::Int(idx.iter().map(|&i| v[i]).collect()),
            Column::Float(v) => Column::Float(idx.iter().map(|&i| v[i]).collect()),
            Column::Str(v) => Column::Str(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    pub fn extend_from(&mut self, other: &Column) -> Result<()> {
        match (self, other) {
            (Column::Int(a), Column::Int(b)) => a.extend_from_slice(b),
            (Column::Float(a), Column::Float(b)) => a.extend_from_slice(b),
            (Column::Str(a), Column::Str(b)) => a.extend(b.iter().cloned()),
            _ => return Err(Error::invalid("column type mismatch")),
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Column {
        match self {
            Column::Int(v) => Column::Int(v[start..end].to_vec()),
            Column::Float(v) => Column::Float(v[start..end].to_vec()),
            Column::Str(v) => Column::Str(v[start..end].to_vec()),
        }
    }

    /// Approximate in-memory footprint.
    pub fn size_bytes(&self) -> u64 {
        match self {
            Column::Int(v) => v.len() as u64 * 8,
            Column::Float(v) => v.len() as u64 * 8,
            Column::Str(v) => v.iter().map(|s| s.len() as u64 + 24).sum(),
        }
    }
}

/// Columnar relation: a schema, one column per field, and optional unique
/// key columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRelation {
    schema: Schema,
    columns: Vec<Column>,
    keys: Vec<usize>,
    len: usize,
}

impl RowRelation {
    pub fn new(schema: Schema, columns: Vec<Column>, keys: Vec<usize>) -> Result<Self> {
        if schema.len() != columns.len() {
            return Err(Error::invalid(format!(
                "schema has {} fields but {} columns were given",
                schema.len(),
                columns.len()
            )));
        }
        let len = columns.first().map_or(0, Column::len);
        for (f, c) in schema.fields.iter().zip(&columns) {
            if c.dtype() != f.dtype {
                return Err(Error::invalid(format!(
                    "column `{}` declared {} but holds {}",
                    f.name,
                    f.dtype,
                    c.dtype()
                )));
            }
            if c.len() != len {
                return Err(Error::invalid(format!("column `{}` has ragged length", f.name)));
            }
        }
        let rel = RowRelation {
            schema,
            columns,
            keys,
            len,
        };
        rel.check_keys()?;
        Ok(rel)
    }

    pub fn empty(schema: Schema) -> Self {
        let columns = schema.fields.iter().map(|f| Column::empty(f.dtype)).collect();
        RowRelation {
            schema,
            columns,
            keys: Vec::new(),
            len: 0,
        }
    }

    pub fn from_rows(schema: Schema, rows: Vec<Vec<Value>>) -> Result<Self> {
        let mut columns: Vec<Column> = schema.fields.iter().map(|f| Column::empty(f.dtype)).collect();
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::invalid(format!(
                    "row {i} has {} values, schema has {}",
                    row.len(),
                    schema.len()
                )));
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(v)?;
            }
        }
        Self::new(schema, columns, Vec::new())
    }

    fn check_keys(&self) -> Result<()> {
        if self.keys.is_empty() {
            return Ok(());
        }
        if let Some(&k) = self.keys.iter().find(|&&k| k >= self.schema.len()) {
            return Err(Error::invalid(format!("key column {k} out of range")));
        }
        let mut seen = HashSet::with_capacity(self.len);
        for i in 0..self.len {
            let key: Vec<KeyValue> = self.keys.iter().map(|&k| self.columns[k].key(i)).collect();
            if !seen.insert(key) {
                return Err(Error::invalid(format!("duplicate key at row {i}")));
            }
        }
        Ok(())
    }

    pub fn with_keys(mut self, keys: Vec<usize>) -> Result<Self> {
        self.keys = keys;
        self.check_keys()?;
        Ok(self)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value(&self, row: usize, col: usize) -> Value {
        self.columns[col].value(row)
    }

    pub fn row(&self, i: usize) -> Vec<Value> {
        self.columns.iter().map(|c| c.value(i)).collect()
    }

    pub fn row_ref(&self, i: usize) -> RowRef<'_> {
        RowRef { rel: self, idx: i }
    }

    pub fn rename(mut self, f: impl Fn(&str) -> String) -> Self {
        for field in &mut self.schema.fields {
            field.name = f(&field.name);
        }
        self
    }

    /// Rows `idx` in the given order. Keys are kept only when `idx` cannot
    /// repeat a row, which the caller asserts with `keep_keys`.
    pub fn gather(&self, idx: &[usize], keep_keys: bool) -> RowRelation {
        RowRelation {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.gather(idx)).collect(),
            keys: if keep_keys { self.keys.clone() } else { Vec::new() },
            len: idx.len(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> RowRelation {
        RowRelation {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.slice(start, end)).collect(),
            keys: self.keys.clone(),
            len: end - start,
        }
    }

    /// Appends the rows of `other`, which must share the schema.
    pub fn append(&mut self, other: &RowRelation) -> Result<()> {
        if other.schema != self.schema {
            return Err(Error::invalid("append with a different schema"));
        }
        for (a, b) in self.columns.iter_mut().zip(&other.columns) {
            a.extend_from(b)?;
        }
        self.len += other.len;
        Ok(())
    }

    /// Side-by-side concatenation of two equally long relations.
    pub fn hconcat(left: RowRelation, right: RowRelation) -> Result<RowRelation> {
        if left.len != right.len {
            return Err(Error::invalid("hconcat of relations with different lengths"));
        }
        let mut fields = left.schema.fields;
        fields.extend(right.schema.fields);
        let mut columns = left.columns;
        columns.extend(right.columns);
        Ok(RowRelation {
            schema: Schema::new(fields),
            columns,
            keys: Vec::new(),
            len: left.len,
        })
    }

    /// Keeps only the listed columns, in that order.
    pub fn project(&self, cols: &[usize]) -> RowRelation {
        RowRelation {
            schema: Schema::new(cols.iter().map(|&c| self.schema.fields[c].clone()).collect()),
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
            keys: Vec::new(),
            len: self.len,
        }
    }

    pub fn size_bytes(&self) -> u64 {
        self.columns.iter().map(Column::size_bytes).sum()
    }
}

/// Borrowed view of one row.
#[derive(Clone, Copy)]
pub struct RowRef<'a> {
    rel: &'a RowRelation,
    idx: usize,
}

impl<'a> RowRef<'a> {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self, col: usize) -> Value {
        self.rel.columns[col].value(self.idx)
    }

    pub fn f64(&self, col: usize) -> Option<f64> {
        self.rel.columns[col].f64_at(self.idx)
    }

    pub fn values(&self) -> Vec<Value> {
        self.rel.row(self.idx)
    }
}
