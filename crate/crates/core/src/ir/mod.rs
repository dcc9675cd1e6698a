//! The plan IR shared by the optimizer and the executor.
//!
//! A [`Plan`] is a DAG of [`PlanNode`]s stored in topological order. Every
//! node records the shape of the value it produces (rows, feature width and
//! layout), so edge sizes are read off the producer. Linear-algebra nodes
//! carry a representation once [`optimize::select_representation`] ran.

pub mod build;
pub mod estimate;
pub mod exec;
pub mod lower;
pub mod optimize;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Representation;
use crate::model::{Layer, Model, Shape};
use crate::relational::{RowRelation, Value};
use crate::sql::CmpOp;
use crate::tensor::ActivationKind;

pub use build::{build_ir, model_plan};
pub use exec::{execute, ExecOutput};
pub use lower::{lower_plan, parse_explain, ExecPlan, ExplainLine};
pub use optimize::{fuse_udf_subgraphs, optimize, pushdown_rewrite, select_representation, OptimizerConfig};

pub type NodeId = usize;

/// Name of the class-label column added by prediction.
pub const PREDICTION: &str = "prediction";

/// Physical form of a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Dense,
    Blocked { rows: usize, cols: usize },
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Dense => f.write_str("dense"),
            Layout::Blocked { rows, cols } => write!(f, "blocked({rows}x{cols})"),
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dense" {
            return Ok(Layout::Dense);
        }
        let inner = s
            .strip_prefix("blocked(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::invalid(format!("bad layout `{s}`")))?;
        let (r, c) = inner.split_once('x').ok_or_else(|| Error::invalid(format!("bad layout `{s}`")))?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("bad layout `{s}`")));
        Ok(Layout::Blocked { rows: parse(r)?, cols: parse(c)? })
    }
}

/// Reference to one layer of a model.
#[derive(Clone)]
pub struct LayerRef {
    pub model: Arc<Model>,
    pub index: usize,
}

impl LayerRef {
    pub fn layer(&self) -> &Layer {
        &self.model.layers()[self.index]
    }

    pub fn input_shape(&self) -> Shape {
        self.model.shapes()[self.index]
    }

    pub fn output_shape(&self) -> Shape {
        self.model.shapes()[self.index + 1]
    }
}

impl fmt::Debug for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.model.name, self.index)
    }
}

impl PartialEq for LayerRef {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.model, &other.model) && self.index == other.index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Literal { column: String, op: CmpOp, value: Value },
    Columns { left: String, op: CmpOp, right: String },
}

impl Predicate {
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Predicate::Literal { column, .. } => vec![column],
            Predicate::Columns { left, right, .. } => vec![left, right],
        }
    }

    /// Row indices of `rel` satisfying every predicate, in order.
    pub fn select_rows(preds: &[Predicate], rel: &RowRelation) -> Result<Vec<usize>> {
        let col = |name: &str| {
            rel.schema()
                .index_of(name)
                .ok_or_else(|| Error::Plan(format!("filter column `{name}` is not available")))
        };
        let compiled = preds
            .iter()
            .map(|p| match p {
                Predicate::Literal { column, op, value } => Ok((col(column)?, *op, Ok(value.clone()))),
                Predicate::Columns { left, op, right } => Ok((col(left)?, *op, Err(col(right)?))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::relational::filter_rows(rel, |row| {
            compiled.iter().all(|(c, op, rhs)| {
                let lhs = row.value(*c);
                let ord = match rhs {
                    Ok(v) => lhs.compare(v),
                    Err(rc) => lhs.compare(&row.value(*rc)),
                };
                ord.is_some_and(|o| op.holds(o))
            })
        }))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Literal { column, op, value } => match value {
                Value::Str(s) => write!(f, "{column} {} '{s}'", op.as_str()),
                v => write!(f, "{column} {} {v}", op.as_str()),
            },
            Predicate::Columns { left, op, right } => write!(f, "{left} {} {right}", op.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinCombine {
    /// Left features followed by right features.
    Concat,
    /// Elementwise sum of left and right features.
    AddFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectSpec {
    /// Keeps the `keep` columns and builds the feature matrix from
    /// `features`.
    Features { keep: Vec<String>, features: Vec<String> },
    /// Replaces the features with a class-label column and, when `outputs`
    /// is set, one `out_i` column per model output.
    Prediction { keep: Vec<String>, outputs: bool },
    /// Final column selection.
    Columns(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    TableScan { table: String },
    Filter { predicates: Vec<Predicate> },
    Project(ProjectSpec),
    EquiJoin { left_key: String, right_key: String, combine: JoinCombine },
    GroupAggregate { group_by: Option<String> },
    /// A fused chain of linear-algebra operators run as one dense UDF.
    MapUdf { ops: Vec<NodeKind> },
    /// `X W^T` for a dense layer; `cols` restricts `W` to a column range.
    MatMul { layer: LayerRef, cols: Option<(usize, usize)> },
    AddBias { layer: LayerRef },
    Activation { kind: ActivationKind },
    Conv2D { layer: LayerRef },
    Flatten,
    EmbeddingLookup { layer: LayerRef },
    Reblock { target: Layout },
    ModelApply { model: Arc<Model> },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::TableScan { .. } => "TableScan",
            NodeKind::Filter { .. } => "Filter",
            NodeKind::Project(_) => "Project",
            NodeKind::EquiJoin { .. } => "EquiJoin",
            NodeKind::GroupAggregate { .. } => "GroupAggregate",
            NodeKind::MapUdf { .. } => "MapUDF",
            NodeKind::MatMul { .. } => "MatMul",
            NodeKind::AddBias { .. } => "AddBias",
            NodeKind::Activation { .. } => "Activation",
            NodeKind::Conv2D { .. } => "Conv2D",
            NodeKind::Flatten => "Flatten",
            NodeKind::EmbeddingLookup { .. } => "EmbeddingLookup",
            NodeKind::Reblock { .. } => "Reblock",
            NodeKind::ModelApply { .. } => "ModelApply",
        }
    }

    /// Operators that take a representation.
    pub fn is_linalg(&self) -> bool {
        matches!(
            self,
            NodeKind::MatMul { .. }
                | NodeKind::AddBias { .. }
                | NodeKind::Activation { .. }
                | NodeKind::Conv2D { .. }
                | NodeKind::Flatten
                | NodeKind::EmbeddingLookup { .. }
        )
    }

    /// Parameter elements the operator reads besides its inputs.
    pub fn param_elements(&self) -> u64 {
        match self {
            NodeKind::MatMul { layer, cols } => {
                let Layer::Dense(d) = layer.layer() else { return 0 };
                let k = cols.map_or(d.in_dim, |(_, len)| len);
                (d.units * k) as u64
            }
            NodeKind::AddBias { layer } => layer.output_shape().len() as u64,
            NodeKind::Conv2D { layer } => match layer.layer() {
                Layer::Conv2D(c) => (c.out_channels * c.kernel_h * c.kernel_w * c.in_channels + c.out_channels) as u64,
                _ => 0,
            },
            NodeKind::EmbeddingLookup { layer } => match layer.layer() {
                Layer::Embedding(e) => (e.dict_size * e.dim) as u64,
                _ => 0,
            },
            NodeKind::MapUdf { ops } => ops.iter().map(NodeKind::param_elements).sum(),
            _ => 0,
        }
    }
}

/// Shape of the value a node produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutInfo {
    /// Estimated row count.
    pub rows: u64,
    /// Feature width; 0 when the value carries no features.
    pub width: usize,
    pub layout: Layout,
}

impl OutInfo {
    pub fn elements(&self) -> u64 {
        self.rows.saturating_mul(self.width as u64)
    }

    pub fn bytes(&self) -> u64 {
        self.elements().saturating_mul(estimate::ELEMENT_BYTES)
    }
}

impl fmt::Display for OutInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}", self.rows, self.width, self.layout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub repr: Option<Representation>,
    pub out: OutInfo,
    pub est_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub nodes: Vec<PlanNode>,
}

impl Plan {
    pub fn new() -> Self {
        Plan::default()
    }

    /// Appends a node; its estimate is computed from its inputs.
    pub fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, out: OutInfo) -> NodeId {
        let id = self.nodes.len();
        let input_elems: u64 = inputs.iter().map(|&i| self.nodes[i].out.elements()).sum();
        let est = (input_elems + kind.param_elements() + out.elements()).saturating_mul(estimate::ELEMENT_BYTES);
        self.nodes.push(PlanNode {
            id,
            kind,
            inputs,
            repr: None,
            out,
            est_bytes: est,
        });
        id
    }

    pub fn root(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn node(&self, id: NodeId) -> &PlanNode {
        &self.nodes[id]
    }

    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                out[i].push(n.id);
            }
        }
        out
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.kind.name()).collect()
    }

    /// Linear-algebra nodes with their representation.
    pub fn representations(&self) -> Vec<(NodeId, &'static str, Option<Representation>)> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_linalg() || matches!(n.kind, NodeKind::MapUdf { .. }))
            .map(|n| (n.id, n.kind.name(), n.repr))
            .collect()
    }

    /// One line per node: `id  kind  representation  est_bytes  out_shape`.
    pub fn explain(&self) -> String {
        self.nodes
            .iter()
            .map(|n| {
                ExplainLine {
                    id: n.id,
                    kind: n.kind.name().to_string(),
                    repr: n.repr.map_or("-".into(), |r| r.to_string()),
                    est_bytes: n.est_bytes,
                    out_shape: n.out.to_string(),
                }
                .to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}
