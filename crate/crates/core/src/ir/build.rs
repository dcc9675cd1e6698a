//! Bound query to plan.

use std::sync::Arc;

use super::{JoinCombine, LayerRef, Layout, NodeId, NodeKind, OutInfo, Plan, ProjectSpec};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::sql::{BoundQuery, Output};

fn dense(rows: u64, width: usize) -> OutInfo {
    OutInfo {
        rows,
        width,
        layout: Layout::Dense,
    }
}

/// Builds the logical plan of a bound query with the model expanded into
/// its operators. Linear-algebra nodes come out unassigned.
pub fn build_ir(q: &BoundQuery) -> Result<Plan> {
    let mut plan = Plan::new();
    let group_by = match &q.output {
        Output::Count { group_by } => group_by.clone(),
        _ => None,
    };
    let mut needed: Vec<String> = Vec::new();
    let mut need = |c: &str| {
        if !needed.iter().any(|n| n == c) {
            needed.push(c.to_string());
        }
    };
    match &q.output {
        Output::Columns(cols) => cols.iter().for_each(|c| need(c)),
        Output::Predict { keep } => keep.iter().for_each(|c| need(c)),
        Output::Count { .. } => {}
    }
    if let Some(g) = &group_by {
        need(g);
    }
    for p in &q.join_filters {
        p.columns().into_iter().for_each(&mut need);
    }
    if let Some((a, b)) = &q.join {
        need(a);
        need(b);
    }

    let mut branches = Vec::new();
    for (i, t) in q.tables.iter().enumerate() {
        let mut id = plan.push(NodeKind::TableScan { table: t.name.clone() }, vec![], dense(t.rows, 0));
        if !q.table_filters[i].is_empty() {
            id = plan.push(
                NodeKind::Filter {
                    predicates: q.table_filters[i].clone(),
                },
                vec![id],
                dense(t.rows, 0),
            );
        }
        let keep: Vec<String> = needed.iter().filter(|c| t.schema.index_of(c).is_some()).cloned().collect();
        let features = if q.model.is_some() { q.features[i].clone() } else { Vec::new() };
        let width = features.len();
        id = plan.push(
            NodeKind::Project(ProjectSpec::Features { keep, features }),
            vec![id],
            dense(t.rows, width),
        );
        branches.push(id);
    }

    let mut id = match (&q.join, branches.as_slice()) {
        (Some((l, r)), [a, b]) => {
            let (na, nb) = (plan.node(*a).out, plan.node(*b).out);
            plan.push(
                NodeKind::EquiJoin {
                    left_key: l.clone(),
                    right_key: r.clone(),
                    combine: JoinCombine::Concat,
                },
                vec![*a, *b],
                dense(na.rows.max(nb.rows), na.width + nb.width),
            )
        }
        (None, [a]) => *a,
        _ => return Err(Error::Plan("unsupported table combination".into())),
    };
    if !q.join_filters.is_empty() {
        let out = plan.node(id).out;
        id = plan.push(
            NodeKind::Filter {
                predicates: q.join_filters.clone(),
            },
            vec![id],
            out,
        );
    }

    if let Some(model) = &q.model {
        let width = plan.node(id).out.width;
        if width != model.input().len() {
            return Err(Error::Plan(format!(
                "model `{}` expects {} inputs, the query provides {width} feature columns",
                model.name,
                model.input().len()
            )));
        }
        id = expand_model(&mut plan, model, id);
        let rows = plan.node(id).out.rows;
        id = plan.push(
            NodeKind::Project(ProjectSpec::Prediction {
                keep: needed.clone(),
                outputs: matches!(q.output, Output::Predict { .. }),
            }),
            vec![id],
            dense(rows, 0),
        );
        if !q.prediction_filters.is_empty() {
            id = plan.push(
                NodeKind::Filter {
                    predicates: q.prediction_filters.clone(),
                },
                vec![id],
                dense(rows, 0),
            );
        }
    }

    let rows = plan.node(id).out.rows;
    match &q.output {
        Output::Count { group_by } => {
            plan.push(
                NodeKind::GroupAggregate {
                    group_by: group_by.clone(),
                },
                vec![id],
                dense(rows, 0),
            );
        }
        Output::Columns(cols) => {
            plan.push(NodeKind::Project(ProjectSpec::Columns(cols.clone())), vec![id], dense(rows, 0));
        }
        Output::Predict { .. } => {}
    }
    Ok(plan)
}

/// Appends the operators of `model` after `input`; returns the last one.
pub fn expand_model(plan: &mut Plan, model: &Arc<Model>, input: NodeId) -> NodeId {
    let rows = plan.node(input).out.rows;
    let mut id = input;
    for (index, layer) in model.layers().iter().enumerate() {
        let lr = LayerRef {
            model: Arc::clone(model),
            index,
        };
        let width = lr.output_shape().len();
        match layer {
            Layer::Dense(d) => {
                id = plan.push(NodeKind::MatMul { layer: lr.clone(), cols: None }, vec![id], dense(rows, width));
                id = plan.push(NodeKind::AddBias { layer: lr }, vec![id], dense(rows, width));
                id = plan.push(NodeKind::Activation { kind: d.activation }, vec![id], dense(rows, width));
            }
            Layer::Conv2D(_) => id = plan.push(NodeKind::Conv2D { layer: lr }, vec![id], dense(rows, width)),
            Layer::Flatten => id = plan.push(NodeKind::Flatten, vec![id], dense(rows, width)),
            Layer::Embedding(_) => id = plan.push(NodeKind::EmbeddingLookup { layer: lr }, vec![id], dense(rows, width)),
        }
    }
    id
}

/// Feature column names used by [`model_plan`].
pub fn input_columns(width: usize) -> Vec<String> {
    (0..width).map(|i| format!("x{i}")).collect()
}

/// Plan applying `model` to `batch` rows of a table named `input` whose
/// columns are `x0, x1, ...`, ending with the model output.
pub fn model_plan(model: &Arc<Model>, batch: u64) -> Plan {
    let mut plan = Plan::new();
    let width = model.input().len();
    let scan = plan.push(
        NodeKind::TableScan {
            table: "input".into(),
        },
        vec![],
        dense(batch, 0),
    );
    let features = input_columns(width)
        .into_iter()
        .map(|c| format!("input.{c}"))
        .collect();
    let project = plan.push(
        NodeKind::Project(ProjectSpec::Features {
            keep: Vec::new(),
            features,
        }),
        vec![scan],
        dense(batch, width),
    );
    expand_model(&mut plan, model, project);
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ActivationKind, DenseTensor};

    fn fc(dims: &[usize]) -> Arc<Model> {
        let layers = dims
            .windows(2)
            .map(|w| {
                (
                    DenseTensor::zeros(vec![w[1], w[0]]).unwrap(),
                    DenseTensor::zeros(vec![w[1]]).unwrap(),
                    ActivationKind::Relu,
                )
            })
            .collect();
        Arc::new(Model::dense("m", layers).unwrap())
    }

    #[test]
    fn fraud_layer_one_estimate() {
        let plan = model_plan(&fc(&[28, 256, 2]), 1000);
        assert_eq!(
            plan.kinds(),
            ["TableScan", "Project", "MatMul", "AddBias", "Activation", "MatMul", "AddBias", "Activation"]
        );
        assert_eq!(plan.node(2).est_bytes, 2_329_344);
    }

    #[test]
    fn unit_matmul_estimate() {
        let plan = model_plan(&fc(&[1, 1]), 1);
        assert_eq!(plan.node(2).est_bytes, 24);
    }
}
