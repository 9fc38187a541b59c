//! Compilation of an AST into the dataflow execution tree.
//!
//! Each call becomes a task node whose inputs are child nodes; `define`
//! binds a node in a compile-time environment, so later uses share the node
//! (a DAG, evaluated once). Node ids are assigned bottom-up: arguments
//! always precede their users.

use std::collections::HashMap;

use thiserror::Error;

use crate::exec::graph::{ExecutionTree, Node, NodeId, NodeKind, Registry};
use crate::lang::parser::ExprAst;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CompileError {
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("unbound identifier `{0}`")]
    UnboundIdentifier(String),
    #[error("`{name}` takes {expected} argument(s), got {found}")]
    Arity { name: String, expected: String, found: usize },
    #[error("define is only allowed at the top level")]
    DefineNotTopLevel,
    #[error("resilient region calls distributed primitive `{0}`")]
    ResilientDistributed(String),
}

struct Compiler<'r> {
    registry: &'r Registry,
    nodes: Vec<Node>,
    bindings: HashMap<String, NodeId>,
}

impl<'r> Compiler<'r> {
    fn push(&mut self, kind: NodeKind) -> NodeId {
        self.nodes.push(Node { kind });
        self.nodes.len() - 1
    }

    fn expr(&mut self, ast: &ExprAst) -> Result<NodeId, CompileError> {
        match ast {
            ExprAst::Literal(x) => Ok(self.push(NodeKind::Literal(*x))),
            ExprAst::Ident(name) => self
                .bindings
                .get(name)
                .copied()
                .ok_or_else(|| CompileError::UnboundIdentifier(name.clone())),
            ExprAst::Define { .. } => Err(CompileError::DefineNotTopLevel),
            ExprAst::Block(_) => Err(CompileError::DefineNotTopLevel),
            ExprAst::Call { head, args } => {
                if head == "resilient" {
                    if args.len() != 1 {
                        return Err(CompileError::Arity {
                            name: "resilient".into(),
                            expected: "1".into(),
                            found: args.len(),
                        });
                    }
                    let body = self.expr(&args[0])?;
                    return Ok(self.push(NodeKind::Resilient { body }));
                }
                let prim = self
                    .registry
                    .get(head)
                    .ok_or_else(|| CompileError::UnknownPrimitive(head.clone()))?;
                let ok = args.len() >= prim.min_args
                    && prim.max_args.map(|m| args.len() <= m).unwrap_or(true);
                if !ok {
                    let expected = match prim.max_args {
                        Some(m) if m == prim.min_args => format!("{m}"),
                        Some(m) => format!("{}..{}", prim.min_args, m),
                        None => format!(">={}", prim.min_args),
                    };
                    return Err(CompileError::Arity {
                        name: head.clone(),
                        expected,
                        found: args.len(),
                    });
                }
                let arg_ids: Vec<NodeId> =
                    args.iter().map(|a| self.expr(a)).collect::<Result<_, _>>()?;
                Ok(self.push(NodeKind::Prim { name: head.clone(), args: arg_ids }))
            }
        }
    }

    fn top_form(&mut self, ast: &ExprAst) -> Result<NodeId, CompileError> {
        match ast {
            ExprAst::Define { name, value } => {
                let id = self.expr(value)?;
                self.bindings.insert(name.clone(), id);
                Ok(id)
            }
            other => self.expr(other),
        }
    }
}

/// Compile an AST against the primitive registry. Every call head must be
/// registered and every identifier defined before use.
pub fn compile(ast: &ExprAst, registry: &Registry) -> Result<ExecutionTree, CompileError> {
    let mut c = Compiler { registry, nodes: Vec::new(), bindings: HashMap::new() };
    let root = match ast {
        ExprAst::Block(forms) => {
            let ids: Vec<NodeId> =
                forms.iter().map(|f| c.top_form(f)).collect::<Result<_, _>>()?;
            c.push(NodeKind::Block { forms: ids })
        }
        single => c.top_form(single)?,
    };
    let tree = ExecutionTree { nodes: c.nodes, root };
    // Resilient regions are re-executed locally; a collective inside one
    // could desynchronize the SPMD tag sequence across localities.
    for id in tree.reachable() {
        if let NodeKind::Resilient { body } = &tree.nodes[id].kind {
            if let Some(name) = tree.subtree_is_distributed(*body, registry) {
                return Err(CompileError::ResilientDistributed(name));
            }
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::lexer::tokenize;
    use crate::lang::parser::parse;

    fn test_registry() -> Registry {
        let mut r = Registry::new();
        r.register("add", 2, Some(2), false, |_, _, _| Ok(crate::value::Value::Scalar(0.0)));
        r.register("mul", 2, Some(2), false, |_, _, _| Ok(crate::value::Value::Scalar(0.0)));
        r.register("all-reduce", 1, Some(1), true, |_, _, _| Ok(crate::value::Value::Scalar(0.0)));
        r
    }

    fn compile_src(src: &str) -> Result<ExecutionTree, CompileError> {
        compile(&parse(&tokenize(src).unwrap()).unwrap(), &test_registry())
    }

    #[test]
    fn call_becomes_prim_node_with_literal_children() {
        let tree = compile_src("(add 1 2)").unwrap();
        assert_eq!(tree.nodes.len(), 3);
        match &tree.nodes[tree.root].kind {
            NodeKind::Prim { name, args } => {
                assert_eq!(name, "add");
                assert_eq!(args.len(), 2);
                assert!(args.iter().all(|&a| matches!(tree.nodes[a].kind, NodeKind::Literal(_))));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_head_is_named_in_the_error() {
        match compile_src("(frobnicate 1)") {
            Err(CompileError::UnknownPrimitive(name)) => assert_eq!(name, "frobnicate"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_identifier_is_named() {
        match compile_src("(add x 1)") {
            Err(CompileError::UnboundIdentifier(name)) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn define_shares_one_node_across_uses() {
        let tree = compile_src("(define x (mul 2 3)) (add x x)").unwrap();
        // The `add` node's two arguments are the same node id.
        let add = tree
            .nodes
            .iter()
            .find_map(|n| match &n.kind {
                NodeKind::Prim { name, args } if name == "add" => Some(args.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(add[0], add[1]);
    }

    #[test]
    fn arity_is_checked_at_compile_time() {
        match compile_src("(add 1)") {
            Err(CompileError::Arity { name, found, .. }) => {
                assert_eq!(name, "add");
                assert_eq!(found, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn args_precede_users_topologically() {
        let tree = compile_src("(add (mul 1 2) (mul 3 4))").unwrap();
        for (id, node) in tree.nodes.iter().enumerate() {
            if let NodeKind::Prim { args, .. } = &node.kind {
                assert!(args.iter().all(|&a| a < id));
            }
        }
    }

    #[test]
    fn resilient_region_rejects_collectives() {
        match compile_src("(resilient (all-reduce 1))") {
            Err(CompileError::ResilientDistributed(name)) => assert_eq!(name, "all-reduce"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(compile_src("(resilient (add 1 2))").is_ok());
    }
}
