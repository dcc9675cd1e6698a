//! CSV ingestion with schema inference.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::relational::{BufferPool, Column, DataType, Field, RowRelation, Schema, StoredTable, TableWriter, BATCH_ROWS};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOptions {
    /// Column types that override inference.
    pub schema: Vec<(String, DataType)>,
    /// Unique key columns.
    pub keys: Vec<String>,
}

impl IngestOptions {
    /// Parses `name:type,name:type`.
    pub fn parse_schema(spec: &str) -> Result<Vec<(String, DataType)>> {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|item| {
                let (name, ty) = item
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("schema entry `{item}` is not name:type")))?;
                Ok((name.trim().to_string(), ty.trim().parse()?))
            })
            .collect()
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Ingest {
            row: 0,
            message: e.to_string(),
        })
}

fn csv_error(row: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Ingest {
            row,
            message: format!("{other:?}"),
        },
    }
}

/// Infers a type per column: int if every value parses as an integer,
/// else float if every value parses as a float, else string. Returns the
/// header and the data row count.
fn infer(path: &Path) -> Result<(Vec<String>, Vec<DataType>, usize)> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(0, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Ingest {
            row: 0,
            message: "missing header row".into(),
        });
    }
    let mut types = vec![DataType::Int; header.len()];
    let mut rows = 0;
    for rec in rdr.records() {
        rows += 1;
        let rec = rec.map_err(|e| csv_error(rows, e))?;
        if rec.len() != header.len() {
            return Err(Error::Ingest {
                row: rows,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        for (t, v) in types.iter_mut().zip(rec.iter()) {
            if *t == DataType::Int && v.parse::<i64>().is_err() {
                *t = DataType::Float;
            }
            if *t == DataType::Float && v.parse::<f64>().is_err() {
                *t = DataType::String;
            }
        }
    }
    Ok((header, types, rows))
}

/// Loads a headed CSV file into the pool in row batches.
pub fn ingest_csv(pool: &Arc<BufferPool>, path: &Path, opts: &IngestOptions) -> Result<StoredTable> {
    let (header, mut types, _) = infer(path)?;
    for (i, name) in header.iter().enumerate() {
        if header[..i].contains(name) {
            return Err(Error::Ingest {
                row: 0,
                message: format!("duplicate column `{name}`"),
            });
        }
    }
    for (name, ty) in &opts.schema {
        let i = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("schema override for unknown column `{name}`")))?;
        types[i] = *ty;
    }
    let keys = opts
        .keys
        .iter()
        .map(|k| {
            header
                .iter()
                .position(|h| h == k)
                .ok_or_else(|| Error::invalid(format!("key column `{k}` is not in the file")))
        })
        .collect::<Result<Vec<_>>>()?;
    let schema = Schema::new(header.iter().zip(&types).map(|(n, t)| Field::new(n.clone(), *t)).collect());

    let mut writer = TableWriter::new(pool, schema.clone(), keys.clone());
    let empty = || types.iter().map(|t| Column::empty(*t)).collect::<Vec<_>>();
    let mut columns = empty();
    let mut pending = 0;
    let mut rdr = reader(path)?;
    let mut row = 0;
    for rec in rdr.records() {
        row += 1;
        let rec = rec.map_err(|e| csv_error(row, e))?;
        if rec.len() != header.len() {
            return Err(Error::Ingest {
                row,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        for ((col, v), name) in columns.iter_mut().zip(rec.iter()).zip(&header) {
            let bad = |ty: &str| Error::Ingest {
                row,
                message: format!("`{v}` in column `{name}` is not {ty}"),
            };
            match col {
                Column::Int(c) => c.push(v.parse().map_err(|_| bad("an int"))?),
                Column::Float(c) => c.push(v.parse().map_err(|_| bad("a float"))?),
                Column::Str(c) => c.push(v.to_string()),
            }
        }
        pending += 1;
        if pending == BATCH_ROWS {
            let batch = RowRelation::new(schema.clone(), std::mem::replace(&mut columns, empty()), Vec::new())?;
            writer.push_batch(batch)?;
            pending = 0;
        }
    }
    if pending > 0 {
        writer.push_batch(RowRelation::new(schema, columns, Vec::new())?)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn ingest(text: &str, opts: &IngestOptions) -> Result<StoredTable> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, text).unwrap();
        let pool = Arc::new(BufferPool::temporary(1 << 20).unwrap());
        ingest_csv(&pool, &path, opts)
    }

    #[test]
    fn infers_int_float_string() {
        let t = ingest("a,b,c\n1,2.5,x\n3,4,\"y, \"\"z\"\"\"\n", &IngestOptions::default()).unwrap();
        let types: Vec<DataType> = t.schema().fields.iter().map(|f| f.dtype).collect();
        assert_eq!(types, [DataType::Int, DataType::Float, DataType::String]);
        assert_eq!(t.row_count(), 2);
        let rows = t.scan().unwrap();
        assert_eq!(rows.value(1, 2), crate::relational::Value::Str("y, \"z\"".into()));
    }

    #[test]
    fn header_only_gives_empty_table() {
        let t = ingest("a,b,c\n", &IngestOptions::default()).unwrap();
        assert_eq!(t.row_count(), 0);
        assert_eq!(t.schema().len(), 3);
    }

    #[test]
    fn ragged_row_is_reported() {
        match ingest("a,b,c\n1,2,3\n4,5\n", &IngestOptions::default()) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn declared_type_violation_names_row() {
        let opts = IngestOptions {
            schema: vec![("a".into(), DataType::Int)],
            keys: vec![],
        };
        match ingest("a\n1\n2\nx\n", &opts) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_and_keys() {
        let opts = IngestOptions {
            schema: IngestOptions::parse_schema("b:float").unwrap(),
            keys: vec!["a".into()],
        };
        let t = ingest("a,b\n1,2\n2,3\n", &opts).unwrap();
        assert_eq!(t.schema().field(1).dtype, DataType::Float);
        assert_eq!(t.keys(), &[0]);
        assert!(matches!(ingest("a,b\n1,2\n1,3\n", &opts), Err(Error::Ingest { row: 2, .. })));
    }

    #[test]
    fn batches_of_4096_rows() {
        let mut text = String::from("id,v\n");
        for i in 0..10_000 {
            text.push_str(&format!("{i},{}\n", i as f64 * 0.5));
        }
        let t = ingest(&text, &IngestOptions::default()).unwrap();
        assert_eq!(t.row_count(), 10_000);
        assert_eq!(t.num_batches(), 3);
    }
}
