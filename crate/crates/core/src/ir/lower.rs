//! Lowering an optimized plan to executable steps, and EXPLAIN text.

use std::fmt;

use super::{JoinCombine, LayerRef, Layout, NodeId, NodeKind, OutInfo, Plan, Predicate, ProjectSpec};
use crate::error::{Error, Result};
use crate::linalg::{BlockSize, Representation};
use crate::tensor::ActivationKind;

#[derive(Debug, Clone, PartialEq)]
pub enum ExecOp {
    Scan { table: String },
    Filter { predicates: Vec<Predicate> },
    Project(ProjectSpec),
    Join { left_key: String, right_key: String, combine: JoinCombine },
    Aggregate { group_by: Option<String> },
    /// Fused chain of dense operators.
    FusedUdf { ops: Vec<NodeKind> },
    /// One dense operator outside any fused chain.
    Dense(NodeKind),
    /// Dense features to a block relation.
    Partition { rows: usize, cols: usize },
    /// Block relation back to dense features.
    Reassemble,
    Repartition { rows: usize, cols: usize },
    /// Pairs input blocks with blocks of `W^T` on the inner block id.
    BlockJoin { layer: LayerRef, cols: Option<(usize, usize)> },
    /// Sums the pair products per output block.
    BlockAggregate,
    /// Tiles the bias over the input grid and adds it block by block.
    BlockAdd { layer: LayerRef },
    BlockMap { kind: ActivationKind },
    ConvRelation { layer: LayerRef, block: BlockSize },
    EmbeddingRelation { layer: LayerRef, block_rows: usize },
    FlattenRelation,
    /// Answers rows from the inference cache; only misses flow on.
    CacheProbe,
    /// Stores fresh predictions and restores the probed row order.
    CacheMerge,
}

impl ExecOp {
    pub fn name(&self) -> String {
        match self {
            ExecOp::Scan { .. } => "Scan".into(),
            ExecOp::Filter { .. } => "Filter".into(),
            ExecOp::Project(_) => "Project".into(),
            ExecOp::Join { .. } => "Join".into(),
            ExecOp::Aggregate { .. } => "GroupAggregate".into(),
            ExecOp::FusedUdf { .. } => "MapUDF".into(),
            ExecOp::Dense(k) => k.name().into(),
            ExecOp::Partition { .. } => "Partition".into(),
            ExecOp::Reassemble => "Reassemble".into(),
            ExecOp::Repartition { .. } => "Repartition".into(),
            ExecOp::BlockJoin { .. } => "BlockJoin".into(),
            ExecOp::BlockAggregate => "BlockAggregate".into(),
            ExecOp::BlockAdd { .. } => "BlockAdd".into(),
            ExecOp::BlockMap { .. } => "BlockMap".into(),
            ExecOp::ConvRelation { .. } => "ConvRelation".into(),
            ExecOp::EmbeddingRelation { .. } => "EmbeddingRelation".into(),
            ExecOp::FlattenRelation => "Flatten".into(),
            ExecOp::CacheProbe => "CacheProbe".into(),
            ExecOp::CacheMerge => "CacheMerge".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecStep {
    pub id: usize,
    pub op: ExecOp,
    pub inputs: Vec<usize>,
    pub repr: Option<Representation>,
    pub est_bytes: u64,
    pub out: OutInfo,
    /// Plan node this step came from.
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecPlan {
    pub steps: Vec<ExecStep>,
}

impl ExecPlan {
    pub fn names(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.op.name()).collect()
    }

    pub fn explain_lines(&self) -> Vec<ExplainLine> {
        self.steps
            .iter()
            .map(|s| ExplainLine {
                id: s.id,
                kind: s.op.name(),
                repr: s.repr.map_or("-".into(), |r| r.to_string()),
                est_bytes: s.est_bytes,
                out_shape: s.out.to_string(),
            })
            .collect()
    }

    pub fn explain(&self) -> String {
        self.explain_lines().iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
    }
}

/// One EXPLAIN row: `id  kind  representation  est_bytes  out_shape`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplainLine {
    pub id: usize,
    pub kind: String,
    pub repr: String,
    pub est_bytes: u64,
    pub out_shape: String,
}

impl fmt::Display for ExplainLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.id, self.kind, self.repr, self.est_bytes, self.out_shape)
    }
}

pub fn parse_explain(text: &str) -> Result<Vec<ExplainLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = |what: &str| Error::invalid(format!("explain line {}: {what}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [id, kind, repr, est, shape] = f.as_slice() else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            if *repr != "-" {
                repr.parse::<Representation>().map_err(|_| bad("bad representation"))?;
            }
            let (_, layout) = shape.split_once('@').ok_or_else(|| bad("bad shape"))?;
            layout.parse::<Layout>().map_err(|_| bad("bad layout"))?;
            Ok(ExplainLine {
                id: id.parse().map_err(|_| bad("bad id"))?,
                kind: kind.to_string(),
                repr: repr.to_string(),
                est_bytes: est.parse().map_err(|_| bad("bad byte estimate"))?,
                out_shape: shape.to_string(),
            })
        })
        .collect()
}

/// Options that are fixed at lowering time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowerOptions {
    /// Block size for relation-centric convolution and embedding tables.
    pub block: BlockSize,
    /// Wrap the model in a cache probe and merge.
    pub cache: bool,
}

impl Default for LowerOptions {
    fn default() -> Self {
        LowerOptions {
            block: BlockSize::new(1000, 1000),
            cache: false,
        }
    }
}

fn is_model_op(kind: &NodeKind) -> bool {
    kind.is_linalg() || matches!(kind, NodeKind::MapUdf { .. } | NodeKind::Reblock { .. })
}

/// Binds every plan node to an executable step. Relation-centric products
/// become a block join followed by a block aggregate; layout changes become
/// partition, reassemble or repartition steps.
pub fn lower_plan(plan: &Plan, opts: LowerOptions) -> Result<ExecPlan> {
    let consumers = plan.consumers();
    let mut steps: Vec<ExecStep> = Vec::new();
    let mut map = vec![usize::MAX; plan.nodes.len()];
    let mut probe = None;
    for n in &plan.nodes {
        let mut inputs: Vec<usize> = n.inputs.iter().map(|&i| map[i]).collect();
        let push = |steps: &mut Vec<ExecStep>, op: ExecOp, inputs: Vec<usize>, repr, est_bytes, out| {
            let id = steps.len();
            steps.push(ExecStep {
                id,
                op,
                inputs,
                repr,
                est_bytes,
                out,
                node: n.id,
            });
            id
        };
        if n.kind.is_linalg() && n.repr.is_none() {
            return Err(Error::Plan(format!("node {} ({}) has no representation", n.id, n.kind.name())));
        }
        let relation = n.repr == Some(Representation::Relation);

        if let NodeKind::Project(ProjectSpec::Prediction { .. }) = n.kind {
            if let Some(p) = probe {
                let src = inputs[0];
                let out = steps[src].out;
                let merged = push(&mut steps, ExecOp::CacheMerge, vec![p, src], None, 0, out);
                inputs = vec![merged];
            }
        }

        let op = match &n.kind {
            NodeKind::ModelApply { model } => {
                return Err(Error::Plan(format!("model `{}` was not expanded", model.name)));
            }
            NodeKind::TableScan { table } => ExecOp::Scan { table: table.clone() },
            NodeKind::Filter { predicates } => ExecOp::Filter {
                predicates: predicates.clone(),
            },
            NodeKind::Project(spec) => ExecOp::Project(spec.clone()),
            NodeKind::EquiJoin {
                left_key,
                right_key,
                combine,
            } => ExecOp::Join {
                left_key: left_key.clone(),
                right_key: right_key.clone(),
                combine: *combine,
            },
            NodeKind::GroupAggregate { group_by } => ExecOp::Aggregate {
                group_by: group_by.clone(),
            },
            NodeKind::MapUdf { ops } => ExecOp::FusedUdf { ops: ops.clone() },
            NodeKind::Reblock { target } => {
                let src = plan.node(n.inputs[0]).out.layout;
                match (src, target) {
                    (Layout::Dense, Layout::Blocked { rows, cols }) => ExecOp::Partition { rows: *rows, cols: *cols },
                    (Layout::Blocked { .. }, Layout::Dense) => ExecOp::Reassemble,
                    (Layout::Blocked { .. }, Layout::Blocked { rows, cols }) => ExecOp::Repartition { rows: *rows, cols: *cols },
                    (Layout::Dense, Layout::Dense) => ExecOp::Dense(NodeKind::Flatten),
                }
            }
            NodeKind::MatMul { layer, cols } if relation => {
                let join = push(
                    &mut steps,
                    ExecOp::BlockJoin {
                        layer: layer.clone(),
                        cols: *cols,
                    },
                    inputs,
                    n.repr,
                    n.est_bytes,
                    n.out,
                );
                inputs = vec![join];
                ExecOp::BlockAggregate
            }
            NodeKind::AddBias { layer } if relation => ExecOp::BlockAdd { layer: layer.clone() },
            NodeKind::Activation { kind } if relation => ExecOp::BlockMap { kind: *kind },
            NodeKind::Conv2D { layer } if relation => ExecOp::ConvRelation {
                layer: layer.clone(),
                block: opts.block,
            },
            NodeKind::EmbeddingLookup { layer } if relation => ExecOp::EmbeddingRelation {
                layer: layer.clone(),
                block_rows: opts.block.rows,
            },
            NodeKind::Flatten if relation => ExecOp::FlattenRelation,
            kind => ExecOp::Dense(kind.clone()),
        };
        let id = push(&mut steps, op, inputs, n.repr, n.est_bytes, n.out);
        map[n.id] = id;

        // The probe goes right where rows enter the model.
        let feeds_model = consumers[n.id].iter().any(|&c| is_model_op(&plan.node(c).kind));
        if opts.cache && probe.is_none() && !is_model_op(&n.kind) && feeds_model {
            let p = push(&mut steps, ExecOp::CacheProbe, vec![id], None, 0, n.out);
            map[n.id] = p;
            probe = Some(p);
        }
    }
    Ok(ExecPlan { steps })
}
