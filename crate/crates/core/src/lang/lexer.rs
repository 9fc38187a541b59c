//! Tokenizer for `.tla` scripts.
//!
//! Whitespace separates tokens; `;` starts a comment running to end of line.
//! Numbers must parse as finite 64-bit floats. Identifiers match
//! `[A-Za-z_][A-Za-z0-9_-]*`.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    LParen,
    RParen,
    Identifier,
    Number,
    StringLit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// 1-based source line.
    pub line: u32,
    /// 1-based source column.
    pub col: u32,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("lex error at {line}:{col}: {message}")]
pub struct LexError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, LexError> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let (tok_line, tok_col) = (line, col);
        match c {
            '\n' | ' ' | '\t' | '\r' => {
                bump!();
            }
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '(' => {
                bump!();
                tokens.push(Token { kind: TokenKind::LParen, text: "(".into(), line: tok_line, col: tok_col });
            }
            ')' => {
                bump!();
                tokens.push(Token { kind: TokenKind::RParen, text: ")".into(), line: tok_line, col: tok_col });
            }
            '"' => {
                bump!();
                let mut text = String::new();
                loop {
                    match bump!() {
                        None => {
                            return Err(LexError {
                                line: tok_line,
                                col: tok_col,
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some('"') => break,
                        Some('\\') => match bump!() {
                            Some('n') => text.push('\n'),
                            Some('t') => text.push('\t'),
                            Some('"') => text.push('"'),
                            Some('\\') => text.push('\\'),
                            other => {
                                return Err(LexError {
                                    line,
                                    col,
                                    message: format!("bad escape {other:?} in string literal"),
                                })
                            }
                        },
                        Some(c) => text.push(c),
                    }
                }
                tokens.push(Token { kind: TokenKind::StringLit, text, line: tok_line, col: tok_col });
            }
            c if is_ident_start(c) => {
                let mut text = String::new();
                while let Some(&c) = chars.peek() {
                    if is_ident_continue(c) {
                        text.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                tokens.push(Token { kind: TokenKind::Identifier, text, line: tok_line, col: tok_col });
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut text = String::new();
                text.push(c);
                bump!();
                // Sign or dot must introduce a number, not stand alone.
                while let Some(&c) = chars.peek() {
                    let exponent_sign = (c == '-' || c == '+')
                        && matches!(text.chars().last(), Some('e') | Some('E'));
                    if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exponent_sign {
                        text.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                let parsed: Option<f64> = text.parse().ok().filter(|x: &f64| x.is_finite());
                match parsed {
                    Some(_) => tokens.push(Token {
                        kind: TokenKind::Number,
                        text,
                        line: tok_line,
                        col: tok_col,
                    }),
                    None => {
                        return Err(LexError {
                            line: tok_line,
                            col: tok_col,
                            message: format!("`{text}` is not a finite number"),
                        })
                    }
                }
            }
            other => {
                return Err(LexError {
                    line: tok_line,
                    col: tok_col,
                    message: format!("illegal character `{other}`"),
                })
            }
        }
    }
    Ok(tokens)
}
