//! S-expression parser and pretty-printer.
//!
//! Grammar:
//!
//!   program = form+                      (two or more -> Block)
//!   form    = Number
//!           | Identifier
//!           | '(' 'define' Identifier form ')'
//!           | '(' Identifier form* ')'

use thiserror::Error;

use crate::lang::lexer::{Token, TokenKind};

#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Literal(f64),
    Ident(String),
    Call { head: String, args: Vec<ExprAst> },
    Define { name: String, value: Box<ExprAst> },
    Block(Vec<ExprAst>),
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at {line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err_at(&self, token: Option<&Token>, message: impl Into<String>) -> ParseError {
        let (line, col) = match token.or_else(|| self.tokens.last()) {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        };
        ParseError { line, col, message: message.into() }
    }

    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn form(&mut self) -> Result<ExprAst, ParseError> {
        let tok = match self.next() {
            Some(t) => t,
            None => return Err(self.err_at(None, "unexpected end of input")),
        };
        match tok.kind {
            TokenKind::Number => {
                let x: f64 = tok.text.parse().expect("lexer validated number");
                Ok(ExprAst::Literal(x))
            }
            TokenKind::Identifier => Ok(ExprAst::Ident(tok.text.clone())),
            TokenKind::StringLit => {
                Err(self.err_at(Some(tok), "string literals have no expression form"))
            }
            TokenKind::RParen => Err(self.err_at(Some(tok), "unbalanced `)`")),
            TokenKind::LParen => {
                let head = match self.next() {
                    None => return Err(self.err_at(Some(tok), "unclosed `(` at end of input")),
                    Some(h) if h.kind == TokenKind::RParen => {
                        return Err(self.err_at(Some(h), "empty call `()`"))
                    }
                    Some(h) if h.kind == TokenKind::Identifier => h,
                    Some(h) => {
                        return Err(self.err_at(Some(h), "call head must be an identifier"))
                    }
                };
                let mut args = Vec::new();
                loop {
                    match self.peek() {
                        None => return Err(self.err_at(Some(tok), "unclosed `(`")),
                        Some(t) if t.kind == TokenKind::RParen => {
                            self.next();
                            break;
                        }
                        Some(_) => args.push(self.form()?),
                    }
                }
                if head.text == "define" {
                    if args.len() != 2 {
                        return Err(self.err_at(Some(head), "define takes a name and one expression"));
                    }
                    let mut it = args.into_iter();
                    let name = match it.next().unwrap() {
                        ExprAst::Ident(n) => n,
                        _ => return Err(self.err_at(Some(head), "define name must be an identifier")),
                    };
                    Ok(ExprAst::Define { name, value: Box::new(it.next().unwrap()) })
                } else {
                    Ok(ExprAst::Call { head: head.text.clone(), args })
                }
            }
        }
    }
}

/// Parse a token stream into one expression; a program of several top-level
/// forms becomes a `Block`.
pub fn parse(tokens: &[Token]) -> Result<ExprAst, ParseError> {
    let mut p = Parser { tokens, pos: 0 };
    let mut forms = Vec::new();
    while p.peek().is_some() {
        forms.push(p.form()?);
    }
    match forms.len() {
        0 => Err(ParseError { line: 1, col: 1, message: "empty program".into() }),
        1 => Ok(forms.pop().unwrap()),
        _ => Ok(ExprAst::Block(forms)),
    }
}

/// Render an AST back to source. `parse(tokenize(pretty(ast)))` reproduces
/// the AST exactly.
pub fn pretty(ast: &ExprAst) -> String {
    match ast {
        ExprAst::Literal(x) => format!("{x}"),
        ExprAst::Ident(name) => name.clone(),
        ExprAst::Call { head, args } => {
            let mut s = format!("({head}");
            for a in args {
                s.push(' ');
                s.push_str(&pretty(a));
            }
            s.push(')');
            s
        }
        ExprAst::Define { name, value } => format!("(define {name} {})", pretty(value)),
        ExprAst::Block(forms) => {
            forms.iter().map(pretty).collect::<Vec<_>>().join("\n")
        }
    }
}
