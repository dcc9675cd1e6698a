//! Name resolution against the catalog.

use std::sync::Arc;

use super::ast::{CmpOp, Comparison, Literal, Name, Operand, Query, SelectList};
use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::ir::{Predicate, PREDICTION};
use crate::model::Model;
use crate::relational::{DataType, Schema, StoredTable};

#[derive(Debug, Clone)]
pub struct BoundTable {
    pub name: String,
    /// Schema with `table.column` names.
    pub schema: Schema,
    pub keys: Vec<String>,
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Count { group_by: Option<String> },
    Predict { keep: Vec<String> },
    Columns(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct BoundQuery {
    pub tables: Vec<BoundTable>,
    /// Qualified join columns of the first and second table.
    pub join: Option<(String, String)>,
    /// Predicates over a single table, applied right after its scan.
    pub table_filters: Vec<Vec<Predicate>>,
    /// Predicates spanning both tables, applied after the join.
    pub join_filters: Vec<Predicate>,
    /// Predicates over the prediction.
    pub prediction_filters: Vec<Predicate>,
    pub model: Option<Arc<Model>>,
    /// Model input columns of each table, in schema order.
    pub features: Vec<Vec<String>>,
    pub output: Output,
}

impl BoundQuery {
    pub fn table_of(&self, column: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.schema.index_of(column).is_some())
    }
}

fn qualify(table: &str, stored: &StoredTable) -> Schema {
    let mut schema = stored.schema().clone();
    for f in &mut schema.fields {
        f.name = format!("{table}.{}", f.name);
    }
    schema
}

struct Scope<'a> {
    tables: &'a [BoundTable],
}

impl Scope<'_> {
    /// Resolves a name to `(table index, qualified name, type)`.
    fn resolve(&self, n: &Name) -> Result<(usize, String, DataType)> {
        let mut hits = Vec::new();
        for (ti, t) in self.tables.iter().enumerate() {
            if n.qualifier.as_deref().is_some_and(|q| q != t.name) {
                continue;
            }
            let full = format!("{}.{}", t.name, n.name);
            if let Some(i) = t.schema.index_of(&full) {
                hits.push((ti, full, t.schema.field(i).dtype));
            }
        }
        match hits.len() {
            1 => Ok(hits.pop().unwrap()),
            0 => match &n.qualifier {
                Some(q) if !self.tables.iter().any(|t| &t.name == q) => {
                    Err(Error::Bind(format!("table `{q}` is not in the FROM clause")))
                }
                _ => Err(Error::Bind(format!("unknown column `{n}`"))),
            },
            _ => Err(Error::Bind(format!("column `{n}` is ambiguous"))),
        }
    }
}

fn check_literal(column: &str, dtype: DataType, lit: &Literal) -> Result<()> {
    let ok = match lit {
        Literal::Str(_) => dtype == DataType::String,
        _ => dtype.is_numeric(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Bind(format!("cannot compare {dtype} column `{column}` with {lit}")))
    }
}

pub fn bind(q: &Query, catalog: &Catalog) -> Result<BoundQuery> {
    let mut tables = Vec::new();
    for name in &q.from {
        if tables.iter().any(|t: &BoundTable| &t.name == name) {
            return Err(Error::Bind(format!("table `{name}` listed twice")));
        }
        let stored = catalog.table(name).map_err(|_| Error::Bind(format!("unknown table `{name}`")))?;
        let schema = qualify(name, &stored);
        let keys = stored.keys().iter().map(|&k| schema.field(k).name.clone()).collect();
        tables.push(BoundTable {
            name: name.clone(),
            schema,
            keys,
            rows: stored.row_count() as u64,
        });
    }
    let scope = Scope { tables: &tables };

    let mut models: Vec<&String> = Vec::new();
    if let SelectList::Predict(m) = &q.select {
        models.push(m);
    }
    let mut join = None;
    let mut table_filters = vec![Vec::new(); tables.len()];
    let mut join_filters = Vec::new();
    let mut prediction_filters = Vec::new();
    for Comparison { left, op, right } in &q.filters {
        match (left, right) {
            (Operand::Column(a), Operand::Column(b)) => {
                let (ta, a, da) = scope.resolve(a)?;
                let (tb, b, db) = scope.resolve(b)?;
                if da.is_numeric() != db.is_numeric() {
                    return Err(Error::Bind(format!("cannot compare {da} `{a}` with {db} `{b}`")));
                }
                if ta == tb {
                    table_filters[ta].push(Predicate::Columns { left: a, op: *op, right: b });
                } else if *op == CmpOp::Eq && join.is_none() {
                    if da != db {
                        return Err(Error::Bind(format!("join columns `{a}` ({da}) and `{b}` ({db}) differ in type")));
                    }
                    join = Some(if ta == 0 { (a, b) } else { (b, a) });
                } else {
                    join_filters.push(Predicate::Columns { left: a, op: *op, right: b });
                }
            }
            (Operand::Column(c), Operand::Literal(l)) | (Operand::Literal(l), Operand::Column(c)) => {
                let op = if matches!(left, Operand::Literal(_)) { op.flip() } else { *op };
                let (t, col, dtype) = scope.resolve(c)?;
                check_literal(&col, dtype, l)?;
                table_filters[t].push(Predicate::Literal {
                    column: col,
                    op,
                    value: l.to_value(),
                });
            }
            (Operand::Predict(m), Operand::Literal(l)) | (Operand::Literal(l), Operand::Predict(m)) => {
                let op = if matches!(left, Operand::Literal(_)) { op.flip() } else { *op };
                if matches!(l, Literal::Str(_)) {
                    return Err(Error::Bind(format!("cannot compare {m}.predict(*) with a string")));
                }
                models.push(m);
                prediction_filters.push(Predicate::Literal {
                    column: PREDICTION.to_string(),
                    op,
                    value: l.to_value(),
                });
            }
            (Operand::Literal(_), Operand::Literal(_)) => {
                return Err(Error::Bind("comparison between two literals".into()));
            }
            _ => return Err(Error::Bind("predict(*) can only be compared with a literal".into())),
        }
    }
    if tables.len() == 2 && join.is_none() {
        return Err(Error::Bind("a two-table query needs an equality condition between the tables".into()));
    }

    models.sort();
    models.dedup();
    let model = match models.as_slice() {
        [] => None,
        [m] => {
            // Shape-only models bind so they can be planned and explained;
            // running one is rejected by the engine.
            Some(catalog.model(m).map_err(|_| Error::Bind(format!("unknown model `{m}`")))?)
        }
        _ => return Err(Error::Bind("a query may apply only one model".into())),
    };

    let group_by = match &q.group_by {
        Some(g) => {
            if q.select != SelectList::CountStar {
                return Err(Error::Bind("GROUP BY needs count(*) in the select list".into()));
            }
            Some(scope.resolve(g)?.1)
        }
        None => None,
    };

    let output = match &q.select {
        SelectList::CountStar => Output::Count {
            group_by: group_by.clone(),
        },
        SelectList::Predict(_) => Output::Predict {
            keep: tables.iter().flat_map(|t| t.keys.iter().cloned()).collect(),
        },
        SelectList::Columns(cols) => Output::Columns(
            cols.iter()
                .map(|c| scope.resolve(c).map(|r| r.1))
                .collect::<Result<Vec<_>>>()?,
        ),
    };

    let features = tables
        .iter()
        .map(|t| {
            t.schema
                .fields
                .iter()
                .filter(|f| f.dtype.is_numeric())
                .map(|f| f.name.clone())
                .filter(|n| !t.keys.contains(n) && Some(n) != group_by.as_ref())
                .filter(|n| join.as_ref().is_none_or(|(a, b)| n != a && n != b))
                .collect()
        })
        .collect();

    Ok(BoundQuery {
        tables,
        join,
        table_filters,
        join_filters,
        prediction_filters,
        model,
        features,
        output,
    })
}

