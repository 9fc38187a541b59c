//! Frontend corpus: round-trip identity over the script corpus and
//! diagnostics with positions on every error path.

mod common;

use common::{CORPUS, DIST_CORPUS};
use tla_core::lang::{compile, parse, pretty, tokenize, CompileError, ExprAst};
use tla_core::runtime::default_registry;

#[test]
fn corpus_round_trips_through_print_and_reparse() {
    let mut checked = 0;
    for src in CORPUS.iter().chain(DIST_CORPUS) {
        let ast = parse(&tokenize(src).unwrap()).unwrap();
        let printed = pretty(&ast);
        let reparsed = parse(&tokenize(&printed).unwrap()).unwrap();
        assert_eq!(reparsed, ast, "round-trip failed for `{src}`");
        checked += 1;
    }
    assert!(checked >= 25, "corpus too small: {checked}");
}

#[test]
fn corpus_compiles_against_the_default_registry() {
    let registry = default_registry();
    for src in CORPUS.iter().chain(DIST_CORPUS) {
        let ast = parse(&tokenize(src).unwrap()).unwrap();
        compile(&ast, &registry).unwrap_or_else(|e| panic!("`{src}`: {e}"));
    }
}

#[test]
fn tokenize_reconstructs_significant_content() {
    // Concatenating token texts with whitespace reproduces the script
    // modulo comments and spacing.
    let src = "(add 1 2) ; gone\n(mul 3 4)";
    let tokens = tokenize(src).unwrap();
    let mut rebuilt = String::new();
    for t in &tokens {
        rebuilt.push_str(&t.text);
        rebuilt.push(' ');
    }
    assert!(!rebuilt.contains("gone"));
    let reparsed = parse(&tokenize(&rebuilt).unwrap()).unwrap();
    assert_eq!(reparsed, parse(&tokens).unwrap());
}

#[test]
fn lex_errors_carry_line_and_col() {
    let cases = [
        ("(add 1 @)", 1, 8),
        ("\n\n  #", 3, 3),
        ("(x 1e999)", 1, 4),
        ("\"open", 1, 1),
    ];
    for (src, line, col) in cases {
        let err = tokenize(src).unwrap_err();
        assert_eq!((err.line, err.col), (line, col), "{src}");
    }
}

#[test]
fn parse_errors_carry_line_and_col() {
    for src in ["(add 1", "add)", "()", "(1 2)", "(define 3 4)", "\"str\""] {
        let err = parse(&tokenize(src).unwrap()).unwrap_err();
        assert!(err.line >= 1 && err.col >= 1, "{src}: {err}");
        assert!(!err.message.is_empty());
    }
}

#[test]
fn compile_errors_name_the_offender() {
    let registry = default_registry();
    let compile_src = |src: &str| compile(&parse(&tokenize(src).unwrap()).unwrap(), &registry);
    match compile_src("(frobnicate 1)") {
        Err(CompileError::UnknownPrimitive(n)) => assert_eq!(n, "frobnicate"),
        other => panic!("unexpected {other:?}"),
    }
    match compile_src("(add y 1)") {
        Err(CompileError::UnboundIdentifier(n)) => assert_eq!(n, "y"),
        other => panic!("unexpected {other:?}"),
    }
    match compile_src("(resilient (all-reduce 1))") {
        Err(CompileError::ResilientDistributed(n)) => assert_eq!(n, "all-reduce"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn block_and_define_shapes() {
    let ast = parse(&tokenize("(define x 1) (define y 2) (add x y)").unwrap()).unwrap();
    match &ast {
        ExprAst::Block(forms) => assert_eq!(forms.len(), 3),
        other => panic!("unexpected {other:?}"),
    }
}
