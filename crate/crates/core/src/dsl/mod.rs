//! The expression language and the `.scene` configuration format.

pub mod ast;
pub mod catalog;
pub mod config;
pub mod dual;
pub mod program;

pub use ast::{parse, Expr, ParseError, ParseErrorKind, Pos};
pub use config::{parse_scene, ConfigError, SceneConfig};
pub use dual::{Dual, Dual2, Scalar};
pub use program::{compile_str, EvalError, EvalFlags, NamedFn, Program, Symbols};
