//! Rule-based rewrites: push-down, representation selection and fusion.

use super::{JoinCombine, Layout, NodeId, NodeKind, OutInfo, Plan, ProjectSpec};
use crate::linalg::{BlockSize, Representation};
use crate::model::Layer;
use crate::tensor::ActivationKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Operators whose estimate exceeds this run relation-centric.
    pub memory_threshold_bytes: u64,
    pub block: BlockSize,
    pub pushdown_enabled: bool,
    /// Push-down applies when output width `<= ratio * (f1 + f2)`.
    pub pushdown_width_ratio: f64,
    pub fusion_enabled: bool,
}

pub const DEFAULT_THRESHOLD: u64 = 2 << 30;

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory_threshold_bytes: DEFAULT_THRESHOLD,
            block: BlockSize::new(1000, 1000),
            pushdown_enabled: true,
            pushdown_width_ratio: 1.0,
            fusion_enabled: true,
        }
    }
}

impl OptimizerConfig {
    /// Settings that are allowed but unusual.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.pushdown_width_ratio > 1.0 {
            out.push(format!(
                "push-down width ratio {} > 1 applies the rewrite even when it widens the join",
                self.pushdown_width_ratio
            ));
        }
        out
    }
}

/// Runs the passes in order: push-down, representation selection, fusion.
pub fn optimize(plan: &Plan, cfg: &OptimizerConfig) -> Plan {
    let mut p = if cfg.pushdown_enabled {
        pushdown_rewrite(plan, cfg)
    } else {
        plan.clone()
    };
    p = select_representation(&p, cfg);
    if cfg.fusion_enabled {
        p = fuse_udf_subgraphs(&p, cfg);
    }
    p
}

/// Copies `plan` node by node. `f` sees each node with its inputs already
/// remapped and returns the id standing in for it.
fn rebuild(plan: &Plan, mut f: impl FnMut(&mut Plan, NodeId, Vec<NodeId>) -> NodeId) -> Plan {
    let mut out = Plan::new();
    let mut map = vec![usize::MAX; plan.nodes.len()];
    for n in &plan.nodes {
        let inputs = n.inputs.iter().map(|&i| map[i]).collect();
        map[n.id] = f(&mut out, n.id, inputs);
    }
    out
}

fn copy_node(out: &mut Plan, plan: &Plan, id: NodeId, inputs: Vec<NodeId>) -> NodeId {
    let n = plan.node(id);
    let new = out.push(n.kind.clone(), inputs, n.out);
    out.nodes[new].repr = n.repr;
    new
}

struct PushdownSite {
    matmul: NodeId,
    join: NodeId,
    f1: usize,
    f2: usize,
}

fn pushdown_sites(plan: &Plan, cfg: &OptimizerConfig) -> Vec<PushdownSite> {
    let consumers = plan.consumers();
    let is_features = |id: NodeId| matches!(plan.node(id).kind, NodeKind::Project(ProjectSpec::Features { .. }));
    plan.nodes
        .iter()
        .filter_map(|n| {
            let NodeKind::MatMul { layer, cols: None } = &n.kind else { return None };
            let Layer::Dense(d) = layer.layer() else { return None };
            let &[j] = n.inputs.as_slice() else { return None };
            let join = plan.node(j);
            if !matches!(join.kind, NodeKind::EquiJoin { combine: JoinCombine::Concat, .. }) || consumers[j].len() != 1 {
                return None;
            }
            let &[a, b] = join.inputs.as_slice() else { return None };
            if !is_features(a) || !is_features(b) {
                return None;
            }
            let (f1, f2) = (plan.node(a).out.width, plan.node(b).out.width);
            let ok = f1 > 0
                && f2 > 0
                && f1 + f2 == d.in_dim
                && d.units as f64 <= cfg.pushdown_width_ratio * (f1 + f2) as f64;
            ok.then_some(PushdownSite { matmul: n.id, join: j, f1, f2 })
        })
        .collect()
}

/// Splits `MatMul(D1 ⋈ D2)` over concatenated features into a join of the
/// two partial products, summed per joined pair. Returns the plan unchanged
/// when the pattern is absent.
pub fn pushdown_rewrite(plan: &Plan, cfg: &OptimizerConfig) -> Plan {
    let sites = pushdown_sites(plan, cfg);
    if sites.is_empty() {
        return plan.clone();
    }
    let mut out = Plan::new();
    let mut map = vec![usize::MAX; plan.nodes.len()];
    for n in &plan.nodes {
        if sites.iter().any(|s| s.join == n.id) {
            continue;
        }
        let inputs = n.inputs.iter().map(|&i| map[i]).collect();
        let Some(s) = sites.iter().find(|s| s.matmul == n.id) else {
            map[n.id] = copy_node(&mut out, plan, n.id, inputs);
            continue;
        };
        let join = plan.node(s.join);
        let NodeKind::MatMul { layer, .. } = &n.kind else { unreachable!() };
        let NodeKind::EquiJoin { left_key, right_key, .. } = &join.kind else { unreachable!() };
        let mut side = |input: NodeId, cols: (usize, usize)| {
            let rows = plan.node(input).out.rows;
            out.push(
                NodeKind::MatMul {
                    layer: layer.clone(),
                    cols: Some(cols),
                },
                vec![map[input]],
                OutInfo {
                    rows,
                    width: n.out.width,
                    layout: Layout::Dense,
                },
            )
        };
        let left = side(join.inputs[0], (0, s.f1));
        let right = side(join.inputs[1], (s.f1, s.f2));
        map[n.id] = out.push(
            NodeKind::EquiJoin {
                left_key: left_key.clone(),
                right_key: right_key.clone(),
                combine: JoinCombine::AddFeatures,
            },
            vec![left, right],
            n.out,
        );
    }
    out
}

fn blocked(rows: usize, cols: usize) -> Layout {
    Layout::Blocked { rows, cols }
}

/// Input layout a node needs and the layout it produces.
fn layouts(kind: &NodeKind, repr: Option<Representation>, input: Layout, width: usize, cfg: &OptimizerConfig) -> (Layout, Layout) {
    let (br, bc) = (cfg.block.rows, cfg.block.cols);
    let keep_grid = match input {
        Layout::Blocked { .. } => input,
        Layout::Dense => blocked(br, bc),
    };
    match (kind, repr) {
        (NodeKind::MatMul { .. }, Some(Representation::Relation)) => (blocked(br, bc), blocked(br, bc)),
        (NodeKind::AddBias { .. }, Some(Representation::Relation)) => (keep_grid, keep_grid),
        (NodeKind::Activation { kind }, Some(Representation::Relation)) => {
            if *kind == ActivationKind::Softmax {
                let rows = match input {
                    Layout::Blocked { rows, .. } => rows,
                    Layout::Dense => br,
                };
                (blocked(rows, width), blocked(rows, width))
            } else {
                (keep_grid, keep_grid)
            }
        }
        _ => (Layout::Dense, Layout::Dense),
    }
}

/// Marks every linear-algebra node UDF or RELATION by its estimate and
/// inserts `Reblock` adapters where the value layout has to change.
pub fn select_representation(plan: &Plan, cfg: &OptimizerConfig) -> Plan {
    rebuild(plan, |out, id, inputs| {
        let n = plan.node(id);
        let repr = n.kind.is_linalg().then(|| {
            if n.est_bytes > cfg.memory_threshold_bytes {
                Representation::Relation
            } else {
                Representation::Udf
            }
        });
        let repr = if matches!(n.kind, NodeKind::MapUdf { .. }) { Some(Representation::Udf) } else { repr.or(n.repr) };
        let mut produced = Layout::Dense;
        let adapted = inputs
            .into_iter()
            .map(|i| {
                let src = out.node(i).out;
                let width = if n.kind.is_linalg() { src.width } else { n.out.width };
                let (need, prod) = layouts(&n.kind, repr, src.layout, width, cfg);
                produced = prod;
                if src.layout == need {
                    i
                } else {
                    out.push(NodeKind::Reblock { target: need }, vec![i], OutInfo { layout: need, ..src })
                }
            })
            .collect();
        let new = out.push(n.kind.clone(), adapted, OutInfo { layout: produced, ..n.out });
        out.nodes[new].repr = repr;
        new
    })
}

/// Collapses chains of UDF linear-algebra nodes into `MapUdf` nodes. A
/// chain grows while its tail has a single consumer that is itself a
/// single-input UDF node and the edge between them is smaller than the
/// threshold.
pub fn fuse_udf_subgraphs(plan: &Plan, cfg: &OptimizerConfig) -> Plan {
    let consumers = plan.consumers();
    let fusable = |id: NodeId| {
        let n = plan.node(id);
        n.kind.is_linalg() && n.repr == Some(Representation::Udf) && n.inputs.len() == 1
    };
    // group[i] = head of the chain node i belongs to.
    let mut head = vec![None; plan.nodes.len()];
    let mut tail_of = vec![usize::MAX; plan.nodes.len()];
    for n in &plan.nodes {
        if !fusable(n.id) {
            continue;
        }
        let prev = n.inputs[0];
        let extend = head[prev].is_some()
            && tail_of[head[prev].unwrap()] == prev
            && consumers[prev].len() == 1
            && plan.node(prev).out.bytes() < cfg.memory_threshold_bytes;
        let h = if extend { head[prev].unwrap() } else { n.id };
        head[n.id] = Some(h);
        tail_of[h] = n.id;
    }
    let mut remap = vec![usize::MAX; plan.nodes.len()];
    let mut out = Plan::new();
    for n in &plan.nodes {
        let inputs: Vec<NodeId> = n.inputs.iter().map(|&i| remap[i]).collect();
        let Some(h) = head[n.id] else {
            remap[n.id] = copy_node(&mut out, plan, n.id, inputs);
            continue;
        };
        if tail_of[h] != n.id {
            continue;
        }
        let mut chain = vec![n.id];
        while *chain.last().unwrap() != h {
            chain.push(plan.node(*chain.last().unwrap()).inputs[0]);
        }
        chain.reverse();
        let ops = chain.iter().map(|&i| plan.node(i).kind.clone()).collect();
        let ins = vec![remap[plan.node(h).inputs[0]]];
        let new = out.push(NodeKind::MapUdf { ops }, ins, n.out);
        out.nodes[new].repr = Some(Representation::Udf);
        for &i in &chain {
            remap[i] = new;
        }
    }
    out
}
