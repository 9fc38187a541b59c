//! The compiled dataflow graph and its dependency-driven evaluation.
//!
//! Every node becomes a task spawned with its argument cells as
//! dependencies; a node shared by several parents (a `define` binding) is
//! spawned once and its cell is reused, so it evaluates exactly once per
//! tree evaluation.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Result, RuntimeError};
use crate::exec::future::{when_all, FutureCell};
use crate::resilience::run_resilient;
use crate::runtime::Env;
use crate::value::Value;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum NodeKind {
    Literal(f64),
    /// A registered primitive applied to argument nodes.
    Prim { name: String, args: Vec<NodeId> },
    /// Evaluate all forms; the value is the last one's.
    Block { forms: Vec<NodeId> },
    /// Re-evaluable region executed under the configured fault policy.
    Resilient { body: NodeId },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
}

/// A compiled program: nodes in topological order (arguments precede users).
#[derive(Debug, Clone)]
pub struct ExecutionTree {
    pub nodes: Vec<Node>,
    pub root: NodeId,
}

impl ExecutionTree {
    /// Node ids reachable from the root (ascending).
    pub fn reachable(&self) -> Vec<NodeId> {
        self.collect_reachable(true)
    }

    /// Reachable ids for task spawning: a resilient region is a leaf, its
    /// body is re-evaluated inside the policy wrapper rather than scheduled
    /// as dataflow tasks.
    pub fn spawn_reachable(&self) -> Vec<NodeId> {
        self.collect_reachable(false)
    }

    fn collect_reachable(&self, through_resilient: bool) -> Vec<NodeId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            match &self.nodes[id].kind {
                NodeKind::Literal(_) => {}
                NodeKind::Prim { args, .. } => stack.extend(args.iter().copied()),
                NodeKind::Block { forms } => stack.extend(forms.iter().copied()),
                NodeKind::Resilient { body } => {
                    if through_resilient {
                        stack.push(*body);
                    }
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| seen[i]).collect()
    }

    /// True if the subtree under `id` applies any distributed primitive.
    pub fn subtree_is_distributed(&self, id: NodeId, registry: &Registry) -> Option<String> {
        match &self.nodes[id].kind {
            NodeKind::Literal(_) => None,
            NodeKind::Prim { name, args } => {
                if registry.get(name).map(|p| p.distributed).unwrap_or(false) {
                    return Some(name.clone());
                }
                args.iter().find_map(|&a| self.subtree_is_distributed(a, registry))
            }
            NodeKind::Block { forms } => {
                forms.iter().find_map(|&f| self.subtree_is_distributed(f, registry))
            }
            NodeKind::Resilient { body } => self.subtree_is_distributed(*body, registry),
        }
    }
}

/// Evaluator signature for a registered primitive.
pub type PrimFn = dyn Fn(&Env, NodeId, &[Value]) -> Result<Value> + Send + Sync;

pub struct PrimitiveDef {
    pub name: &'static str,
    pub min_args: usize,
    pub max_args: Option<usize>,
    /// Performs inter-locality communication; such primitives are rejected
    /// inside resilient regions.
    pub distributed: bool,
    pub eval: Arc<PrimFn>,
}

/// Name -> (arity range, evaluator) map, fixed at startup and identical on
/// every locality.
#[derive(Default)]
pub struct Registry {
    prims: HashMap<&'static str, Arc<PrimitiveDef>>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register(
        &mut self,
        name: &'static str,
        min_args: usize,
        max_args: Option<usize>,
        distributed: bool,
        eval: impl Fn(&Env, NodeId, &[Value]) -> Result<Value> + Send + Sync + 'static,
    ) {
        self.prims.insert(
            name,
            Arc::new(PrimitiveDef { name, min_args, max_args, distributed, eval: Arc::new(eval) }),
        );
    }

    pub fn get(&self, name: &str) -> Option<&Arc<PrimitiveDef>> {
        self.prims.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.prims.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self.prims.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

fn apply_prim(env: &Env, prim: &Arc<PrimitiveDef>, id: NodeId, args: &[Value]) -> Result<Value> {
    let t0 = Instant::now();
    let out = (prim.eval)(env, id, args);
    env.counters.record_prim(prim.name, t0.elapsed());
    out.map_err(|e| e.at_node(id, prim.name))
}

/// Turn every reachable node into a spawned task and return the root cell.
pub fn evaluate(tree: &Arc<ExecutionTree>, env: &Arc<Env>) -> FutureCell<Value> {
    let mut cells: HashMap<NodeId, FutureCell<Value>> = HashMap::new();
    for id in tree.spawn_reachable() {
        let cell = match &tree.nodes[id].kind {
            NodeKind::Literal(x) => FutureCell::ready(Value::Scalar(*x)),
            NodeKind::Prim { name, args } => {
                let deps: Vec<_> = args.iter().map(|a| cells[a].clone()).collect();
                match env.registry.get(name) {
                    Some(p) => {
                        let prim = Arc::clone(p);
                        let env2 = Arc::clone(env);
                        match env.scheduler.spawn(deps, move |vals| apply_prim(&env2, &prim, id, &vals)) {
                            Ok(c) => c,
                            Err(e) => FutureCell::failed(e),
                        }
                    }
                    // compile() rejects unknown heads; reaching this means the
                    // tree and registry are out of sync.
                    None => FutureCell::failed(RuntimeError::Type(format!(
                        "unregistered primitive `{name}`"
                    ))),
                }
            }
            NodeKind::Block { forms } => {
                let deps: Vec<_> = forms.iter().map(|f| cells[f].clone()).collect();
                let joined = when_all(&deps);
                let out = FutureCell::pending();
                let out2 = out.clone();
                joined.on_ready(move |vals| match vals {
                    Ok(vs) => out2.resolve(Ok(vs.last().cloned().unwrap_or(Value::Scalar(0.0)))),
                    Err(e) => out2.resolve(Err(e.clone())),
                });
                out
            }
            NodeKind::Resilient { body } => {
                let body = *body;
                let tree2 = Arc::clone(tree);
                let env2 = Arc::clone(env);
                match env.scheduler.spawn(vec![], move |_| {
                    let policy = env2.resilience.clone().unwrap_or_default();
                    run_resilient(&policy, env2.injector.as_deref(), &mut || {
                        evaluate_sequential(&tree2, body, &env2)
                    })
                }) {
                    Ok(c) => c,
                    Err(e) => FutureCell::failed(e),
                }
            }
        };
        cells.insert(id, cell);
    }
    cells.remove(&tree.root).expect("root cell")
}

/// Direct recursive evaluation of a subtree, used for re-executable resilient
/// regions. Shared nodes are still evaluated once per call via the memo.
pub fn evaluate_sequential(tree: &Arc<ExecutionTree>, root: NodeId, env: &Arc<Env>) -> Result<Value> {
    fn go(
        tree: &Arc<ExecutionTree>,
        id: NodeId,
        env: &Arc<Env>,
        memo: &mut HashMap<NodeId, Value>,
    ) -> Result<Value> {
        if let Some(v) = memo.get(&id) {
            return Ok(v.clone());
        }
        let value = match &tree.nodes[id].kind {
            NodeKind::Literal(x) => Value::Scalar(*x),
            NodeKind::Prim { name, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for &a in args {
                    vals.push(go(tree, a, env, memo)?);
                }
                let prim = env
                    .registry
                    .get(name)
                    .ok_or_else(|| RuntimeError::Type(format!("unregistered primitive `{name}`")))?;
                apply_prim(env, prim, id, &vals)?
            }
            NodeKind::Block { forms } => {
                let mut last = Value::Scalar(0.0);
                for &f in forms {
                    last = go(tree, f, env, memo)?;
                }
                last
            }
            NodeKind::Resilient { body } => {
                let policy = env.resilience.clone().unwrap_or_default();
                let body = *body;
                let tree2 = Arc::clone(tree);
                let env2 = Arc::clone(env);
                run_resilient(&policy, env.injector.as_deref(), &mut || {
                    evaluate_sequential(&tree2, body, &env2)
                })?
            }
        };
        memo.insert(id, value.clone());
        Ok(value)
    }
    go(tree, root, env, &mut HashMap::new())
}
