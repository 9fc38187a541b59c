//! Expression frontend: lexer, s-expression parser, and compilation of the
//! AST into a futurized execution tree.

pub mod compiler;
pub mod lexer;
pub mod parser;

pub use compiler::{compile, CompileError};
pub use lexer::{tokenize, LexError, Token, TokenKind};
pub use parser::{parse, pretty, ExprAst, ParseError};

use thiserror::Error;

/// Any frontend failure, with source position where applicable.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum FrontendError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("compile error: {0}")]
    Compile(#[from] CompileError),
}

/// Tokenize, parse, and compile a script in one step.
pub fn compile_source(
    source: &str,
    registry: &crate::exec::Registry,
) -> Result<crate::exec::ExecutionTree, FrontendError> {
    let tokens = tokenize(source)?;
    let ast = parse(&tokens)?;
    Ok(compile(&ast, registry)?)
}
