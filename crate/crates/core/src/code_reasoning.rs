//! Code-driven reasoning: numeric questions are answered by a small program
//! the model writes, executed here in a sandboxed expression language.
//!
//! The language (grammar in `grammar/sandbox.ebnf`) is a single expression
//! over named bindings: arithmetic, comparisons, boolean logic, vector
//! components and a handful of helpers (`sqrt`, `abs`, `min`, `max`, `dist`,
//! `norm`, `dot`, `if`). Evaluation is plain IEEE-754 double arithmetic with
//! exact comparisons, and runs under a step and wall-clock budget.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world_state::{Value, DIMENSIONLESS};

pub const GRAMMAR: &str = include_str!("../grammar/sandbox.ebnf");

const MAX_SOURCE_LEN: usize = 4096;
const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputType {
    Boolean,
    Number,
    Vector,
}

/// A sandbox program plus the values its names are bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub source: String,
    pub bindings: BTreeMap<String, Value>,
    pub expected_output: OutputType,
}

#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub max_steps: u64,
    pub max_time: Duration,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_steps: 10_000, max_time: Duration::from_millis(50) }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SandboxError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unbound name `{0}`")]
    UnboundName(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("program returned {found}, expected {expected:?}")]
    WrongOutput { expected: OutputType, found: String },
}

/// True iff any crucial state is numeric (a number or a 3-vector).
pub fn needs_code(values: &[Value]) -> bool {
    values.iter().any(Value::is_numeric)
}

/// Runs a program with the default budget.
pub fn execute(program: &Program) -> Result<Value, SandboxError> {
    execute_with_budget(program, Budget::default())
}

pub fn execute_with_budget(program: &Program, budget: Budget) -> Result<Value, SandboxError> {
    let expr = parse(&program.source)?;
    let mut env = BTreeMap::new();
    for (name, value) in &program.bindings {
        let v = match value {
            Value::Number { value, .. } => Val::Num(*value),
            Value::Vector { xyz, .. } => Val::Vec(*xyz),
            Value::Bool(b) => Val::Bool(*b),
            Value::Text(_) => {
                return Err(SandboxError::Type(format!("binding `{name}` is a string; only numbers, vectors and booleans can be bound")))
            }
        };
        env.insert(name.as_str(), v);
    }
    let mut ev = Evaluator { env: &env, steps: 0, budget, start: Instant::now() };
    let out = ev.eval(&expr)?;
    let found = out.type_name();
    match (program.expected_output, out) {
        (OutputType::Boolean, Val::Bool(b)) => Ok(Value::Bool(b)),
        (OutputType::Number, Val::Num(v)) => Ok(Value::Number { value: v, unit: DIMENSIONLESS.into() }),
        (OutputType::Vector, Val::Vec(xyz)) => Ok(Value::Vector { xyz, unit: DIMENSIONLESS.into() }),
        (expected, _) => Err(SandboxError::WrongOutput { expected, found: found.to_string() }),
    }
}

/// Parses without evaluating; used for syntax checks on model output.
pub fn check_syntax(source: &str) -> Result<(), SandboxError> {
    parse(source).map(|_| ())
}

/// Parses and returns every name the program reads.
pub fn referenced_names(source: &str) -> Result<BTreeSet<String>, SandboxError> {
    fn walk(e: &Expr, out: &mut BTreeSet<String>) {
        match e {
            Expr::Num(_) | Expr::Bool(_) => {}
            Expr::Name(n) => {
                out.insert(n.clone());
            }
            Expr::Vec3(parts) => parts.iter().for_each(|p| walk(p, out)),
            Expr::Neg(x) | Expr::Not(x) | Expr::Component(x, _) => walk(x, out),
            Expr::Bin(_, a, b) => {
                walk(a, out);
                walk(b, out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
        }
    }
    let mut out = BTreeSet::new();
    walk(&parse(source)?, &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    End,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, SandboxError> {
    if src.len() > MAX_SOURCE_LEN {
        return Err(SandboxError::BudgetExceeded(format!("source longer than {MAX_SOURCE_LEN} bytes")));
    }
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    const OPS: [&str; 20] = [
        "<=", ">=", "==", "!=", "&&", "||", "<", ">", "+", "-", "*", "/", "(", ")", "[", "]", ",", ".", "!", "=",
    ];
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| SandboxError::Syntax { pos: start, message: format!("bad number `{text}`") })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let rest = &src[i..];
            let op = OPS.iter().find(|op| rest.starts_with(**op)).ok_or_else(|| SandboxError::Syntax {
                pos: i,
                message: format!("unexpected character `{}`", rest.chars().next().unwrap_or('?')),
            })?;
            if *op == "=" {
                return Err(SandboxError::Syntax { pos: i, message: "assignment is not allowed; use `==`".into() });
            }
            out.push((Tok::Op(op), i));
            i += op.len();
        }
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Bool(bool),
    Name(String),
    Vec3(Box<[Expr; 3]>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Component(Box<Expr>, usize),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sqrt,
    Abs,
    Min,
    Max,
    Dist,
    Norm,
    Dot,
    If,
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

fn parse(src: &str) -> Result<Expr, SandboxError> {
    let mut p = Parser { toks: lex(src)?, pos: 0, depth: 0 };
    let e = p.expr()?;
    match p.peek() {
        Tok::End => Ok(e),
        other => Err(p.err(format!("unexpected `{}` after expression", show(other)))),
    }
}

fn show(t: &Tok) -> String {
    match t {
        Tok::Num(v) => v.to_string(),
        Tok::Ident(s) => s.clone(),
        Tok::Op(o) => o.to_string(),
        Tok::End => "end of input".into(),
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn at(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn err(&self, message: String) -> SandboxError {
        SandboxError::Syntax { pos: self.at(), message }
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Tok::Op(o) if *o == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_word(&mut self, word: &str) -> bool {
        if matches!(self.peek(), Tok::Ident(w) if w == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), SandboxError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{op}`, found `{}`", show(self.peek()))))
        }
    }

    fn nested<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, SandboxError>) -> Result<T, SandboxError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(SandboxError::BudgetExceeded(format!("nesting deeper than {MAX_DEPTH}")));
        }
        let r = f(self);
        self.depth -= 1;
        r
    }

    fn expr(&mut self) -> Result<Expr, SandboxError> {
        self.nested(|p| p.or_expr())
    }

    fn or_expr(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.and_expr()?;
        while self.eat_op("||") || self.eat_word("or") {
            let rhs = self.and_expr()?;
            lhs = Expr::Bin(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.not_expr()?;
        while self.eat_op("&&") || self.eat_word("and") {
            let rhs = self.not_expr()?;
            lhs = Expr::Bin(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, SandboxError> {
        if self.eat_op("!") || self.eat_word("not") {
            let inner = self.nested(|p| p.not_expr())?;
            return Ok(Expr::Not(Box::new(inner)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SandboxError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Tok::Op("<") => BinOp::Lt,
            Tok::Op("<=") => BinOp::Le,
            Tok::Op(">") => BinOp::Gt,
            Tok::Op(">=") => BinOp::Ge,
            Tok::Op("==") => BinOp::Eq,
            Tok::Op("!=") => BinOp::Ne,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        if matches!(self.peek(), Tok::Op("<" | "<=" | ">" | ">=" | "==" | "!=")) {
            return Err(self.err("comparisons cannot be chained; combine them with `&&`".into()));
        }
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat_op("+") {
                BinOp::Add
            } else if self.eat_op("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat_op("*") {
                BinOp::Mul
            } else if self.eat_op("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, SandboxError> {
        if self.eat_op("-") {
            let inner = self.nested(|p| p.unary())?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, SandboxError> {
        let mut e = self.primary()?;
        while self.eat_op(".") {
            let axis = match self.bump() {
                Tok::Ident(s) if s == "x" => 0,
                Tok::Ident(s) if s == "y" => 1,
                Tok::Ident(s) if s == "z" => 2,
                other => return Err(self.err(format!("expected `x`, `y` or `z` after `.`, found `{}`", show(&other)))),
            };
            e = Expr::Component(Box::new(e), axis);
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, SandboxError> {
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op("(") => {
                let e = self.expr()?;
                self.expect_op(")")?;
                Ok(e)
            }
            Tok::Op("[") => {
                let x = self.expr()?;
                self.expect_op(",")?;
                let y = self.expr()?;
                self.expect_op(",")?;
                let z = self.expr()?;
                self.expect_op("]")?;
                Ok(Expr::Vec3(Box::new([x, y, z])))
            }
            Tok::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                _ if matches!(self.peek(), Tok::Op("(")) => {
                    let func = match name.as_str() {
                        "sqrt" => Func::Sqrt,
                        "abs" => Func::Abs,
                        "min" => Func::Min,
                        "max" => Func::Max,
                        "dist" => Func::Dist,
                        "norm" => Func::Norm,
                        "dot" => Func::Dot,
                        "if" => Func::If,
                        _ => return Err(self.err(format!("unknown function `{name}`"))),
                    };
                    self.pos += 1;
                    let mut args = Vec::new();
                    if !self.eat_op(")") {
                        loop {
                            args.push(self.expr()?);
                            if self.eat_op(")") {
                                break;
                            }
                            self.expect_op(",")?;
                        }
                    }
                    Ok(Expr::Call(func, args))
                }
                _ => Ok(Expr::Name(name)),
            },
            other => Err(self.err(format!("unexpected `{}`", show(&other)))),
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Val {
    Num(f64),
    Bool(bool),
    Vec([f64; 3]),
}

impl Val {
    fn type_name(&self) -> &'static str {
        match self {
            Val::Num(_) => "number",
            Val::Bool(_) => "boolean",
            Val::Vec(_) => "3-vector",
        }
    }
}

struct Evaluator<'a> {
    env: &'a BTreeMap<&'a str, Val>,
    steps: u64,
    budget: Budget,
    start: Instant,
}

fn finite(v: f64, what: &str) -> Result<f64, SandboxError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SandboxError::Domain(format!("{what} produced a non-finite result")))
    }
}

fn vfinite(v: [f64; 3], what: &str) -> Result<Val, SandboxError> {
    for c in v {
        finite(c, what)?;
    }
    Ok(Val::Vec(v))
}

/// Euclidean distance with a fixed evaluation order.
fn euclid(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl Evaluator<'_> {
    fn tick(&mut self) -> Result<(), SandboxError> {
        self.steps += 1;
        if self.steps > self.budget.max_steps {
            return Err(SandboxError::BudgetExceeded(format!("more than {} evaluation steps", self.budget.max_steps)));
        }
        if self.steps % 256 == 0 && self.start.elapsed() > self.budget.max_time {
            return Err(SandboxError::BudgetExceeded(format!("ran longer than {:?}", self.budget.max_time)));
        }
        Ok(())
    }

    fn num(&mut self, e: &Expr, ctx: &str) -> Result<f64, SandboxError> {
        match self.eval(e)? {
            Val::Num(v) => Ok(v),
            other => Err(SandboxError::Type(format!("{ctx} expects a number, got {}", other.type_name()))),
        }
    }

    fn vec(&mut self, e: &Expr, ctx: &str) -> Result<[f64; 3], SandboxError> {
        match self.eval(e)? {
            Val::Vec(v) => Ok(v),
            other => Err(SandboxError::Type(format!("{ctx} expects a 3-vector, got {}", other.type_name()))),
        }
    }

    fn boolean(&mut self, e: &Expr, ctx: &str) -> Result<bool, SandboxError> {
        match self.eval(e)? {
            Val::Bool(b) => Ok(b),
            other => Err(SandboxError::Type(format!("{ctx} expects a boolean, got {}", other.type_name()))),
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<Val, SandboxError> {
        self.tick()?;
        match e {
            Expr::Num(v) => Ok(Val::Num(*v)),
            Expr::Bool(b) => Ok(Val::Bool(*b)),
            Expr::Name(n) => self.env.get(n.as_str()).copied().ok_or_else(|| SandboxError::UnboundName(n.clone())),
            Expr::Vec3(parts) => {
                let x = self.num(&parts[0], "vector literal")?;
                let y = self.num(&parts[1], "vector literal")?;
                let z = self.num(&parts[2], "vector literal")?;
                Ok(Val::Vec([x, y, z]))
            }
            Expr::Neg(inner) => match self.eval(inner)? {
                Val::Num(v) => Ok(Val::Num(-v)),
                Val::Vec(v) => Ok(Val::Vec([-v[0], -v[1], -v[2]])),
                Val::Bool(_) => Err(SandboxError::Type("cannot negate a boolean; use `!`".into())),
            },
            Expr::Not(inner) => Ok(Val::Bool(!self.boolean(inner, "`!`")?)),
            Expr::Component(inner, axis) => Ok(Val::Num(self.vec(inner, "component access")?[*axis])),
            Expr::Bin(op, a, b) => self.binary(*op, a, b),
            Expr::Call(f, args) => self.call(*f, args),
        }
    }

    fn binary(&mut self, op: BinOp, a: &Expr, b: &Expr) -> Result<Val, SandboxError> {
        // Both operands are always evaluated so type errors surface regardless of values.
        let (l, r) = (self.eval(a)?, self.eval(b)?);
        use BinOp::*;
        match (op, l, r) {
            (And, Val::Bool(x), Val::Bool(y)) => Ok(Val::Bool(x && y)),
            (Or, Val::Bool(x), Val::Bool(y)) => Ok(Val::Bool(x || y)),
            (Add, Val::Num(x), Val::Num(y)) => Ok(Val::Num(finite(x + y, "+")?)),
            (Sub, Val::Num(x), Val::Num(y)) => Ok(Val::Num(finite(x - y, "-")?)),
            (Mul, Val::Num(x), Val::Num(y)) => Ok(Val::Num(finite(x * y, "*")?)),
            (Div, Val::Num(_), Val::Num(y)) if y == 0.0 => Err(SandboxError::Domain("division by zero".into())),
            (Div, Val::Num(x), Val::Num(y)) => Ok(Val::Num(finite(x / y, "/")?)),
            (Add, Val::Vec(x), Val::Vec(y)) => vfinite([x[0] + y[0], x[1] + y[1], x[2] + y[2]], "+"),
            (Sub, Val::Vec(x), Val::Vec(y)) => vfinite([x[0] - y[0], x[1] - y[1], x[2] - y[2]], "-"),
            (Mul, Val::Vec(v), Val::Num(s)) | (Mul, Val::Num(s), Val::Vec(v)) => {
                vfinite([v[0] * s, v[1] * s, v[2] * s], "*")
            }
            (Div, Val::Vec(_), Val::Num(s)) if s == 0.0 => Err(SandboxError::Domain("division by zero".into())),
            (Div, Val::Vec(v), Val::Num(s)) => vfinite([v[0] / s, v[1] / s, v[2] / s], "/"),
            (Lt, Val::Num(x), Val::Num(y)) => Ok(Val::Bool(x < y)),
            (Le, Val::Num(x), Val::Num(y)) => Ok(Val::Bool(x <= y)),
            (Gt, Val::Num(x), Val::Num(y)) => Ok(Val::Bool(x > y)),
            (Ge, Val::Num(x), Val::Num(y)) => Ok(Val::Bool(x >= y)),
            (Eq, x, y) if x.type_name() == y.type_name() => Ok(Val::Bool(x == y)),
            (Ne, x, y) if x.type_name() == y.type_name() => Ok(Val::Bool(x != y)),
            (op, x, y) => Err(SandboxError::Type(format!(
                "operator {op:?} is not defined for {} and {}",
                x.type_name(),
                y.type_name()
            ))),
        }
    }

    fn call(&mut self, f: Func, args: &[Expr]) -> Result<Val, SandboxError> {
        let arity = |n: usize, name: &str| {
            if args.len() == n {
                Ok(())
            } else {
                Err(SandboxError::Type(format!("{name} takes {n} argument(s), got {}", args.len())))
            }
        };
        match f {
            Func::Sqrt => {
                arity(1, "sqrt")?;
                let x = self.num(&args[0], "sqrt")?;
                if x < 0.0 {
                    return Err(SandboxError::Domain(format!("sqrt of negative number {x}")));
                }
                Ok(Val::Num(x.sqrt()))
            }
            Func::Abs => {
                arity(1, "abs")?;
                Ok(Val::Num(self.num(&args[0], "abs")?.abs()))
            }
            Func::Min | Func::Max => {
                let name = if f == Func::Min { "min" } else { "max" };
                if args.is_empty() {
                    return Err(SandboxError::Type(format!("{name} needs at least one argument")));
                }
                let mut acc = self.num(&args[0], name)?;
                for a in &args[1..] {
                    let v = self.num(a, name)?;
                    acc = if f == Func::Min { acc.min(v) } else { acc.max(v) };
                }
                Ok(Val::Num(acc))
            }
            Func::Dist => {
                arity(2, "dist")?;
                let a = self.vec(&args[0], "dist")?;
                let b = self.vec(&args[1], "dist")?;
                Ok(Val::Num(finite(euclid(a, b), "dist")?))
            }
            Func::Norm => {
                arity(1, "norm")?;
                let v = self.vec(&args[0], "norm")?;
                Ok(Val::Num(finite(euclid(v, [0.0; 3]), "norm")?))
            }
            Func::Dot => {
                arity(2, "dot")?;
                let a = self.vec(&args[0], "dot")?;
                let b = self.vec(&args[1], "dot")?;
                Ok(Val::Num(finite(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], "dot")?))
            }
            Func::If => {
                arity(3, "if")?;
                let c = self.boolean(&args[0], "if")?;
                let (a, b) = (self.eval(&args[1])?, self.eval(&args[2])?);
                if a.type_name() != b.type_name() {
                    return Err(SandboxError::Type("if branches must have the same type".into()));
                }
                Ok(if c { a } else { b })
            }
        }
    }
}
