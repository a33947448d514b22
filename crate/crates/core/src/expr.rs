//! Small arithmetic expression language for user-defined losses.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' [expr (',' expr)*] ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus and is right-associative, so `-2^2`
//! is `-4` and `2^3^2` is `512`. Variables are `z1..zk` (action
//! components) and `y` (label) for losses; label rules see `x`/`x1..xd`
//! and custom deviation functions see `u`.

use std::fmt;

use thiserror::Error;

/// Nesting limit for parentheses and unary chains; keeps recursion bounded
/// on adversarial input.
const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at {line}:{col}: expected {expected}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
    },
    #[error("unknown identifier `{name}` at {line}:{col}")]
    UnknownIdentifier { name: String, line: usize, col: usize },
    #[error("`{name}` takes {expected} argument(s), got {found} at {line}:{col}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
        line: usize,
        col: usize,
    },
    #[error("evaluation error: {0}")]
    Eval(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Max,
    Min,
    Exp,
    Log,
    Sin,
    Cos,
    Relu,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "max" => Func::Max,
            "min" => Func::Min,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "relu" => Func::Relu,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Max => "max",
            Func::Min => "min",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Relu => "relu",
        }
    }
}

/// A variable reference. Indices are zero-based (`z1` is `Action(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Action(usize),
    Label,
    Feature(usize),
    Deviation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Which variable families an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    pub actions: bool,
    pub label: bool,
    pub features: bool,
    pub deviation: bool,
}

impl Scope {
    /// `z1..zk` and `y`.
    pub const LOSS: Scope = Scope {
        actions: true,
        label: true,
        features: false,
        deviation: false,
    };
    /// `x`, `x1..xd`.
    pub const FEATURE: Scope = Scope {
        actions: false,
        label: false,
        features: true,
        deviation: false,
    };
    /// `u`.
    pub const DEVIATION: Scope = Scope {
        actions: false,
        label: false,
        features: false,
        deviation: true,
    };

    fn resolve(&self, name: &str) -> Option<Var> {
        if self.label && name == "y" {
            return Some(Var::Label);
        }
        if self.deviation && name == "u" {
            return Some(Var::Deviation);
        }
        if self.features && name == "x" {
            return Some(Var::Feature(0));
        }
        let indexed = |prefix: char| -> Option<usize> {
            let rest = name.strip_prefix(prefix)?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
                return None;
            }
            rest.parse::<usize>().ok().map(|i| i - 1)
        };
        if self.actions {
            if let Some(i) = indexed('z') {
                return Some(Var::Action(i));
            }
        }
        if self.features {
            if let Some(i) = indexed('x') {
                return Some(Var::Feature(i));
            }
        }
        None
    }
}

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub action: &'a [f64],
    pub label: f64,
    pub feature: &'a [f64],
    pub deviation: f64,
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct LossExpr {
    source: String,
    root: Node,
}

impl LossExpr {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Largest action index referenced plus one (0 when no `z` appears).
    pub fn action_arity(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Var(Var::Action(i)) => i + 1,
                Node::Num(_) | Node::Var(_) => 0,
                Node::Neg(a) => walk(a),
                Node::Bin(_, a, b) => walk(a).max(walk(b)),
                Node::Call(_, args) => args.iter().map(walk).max().unwrap_or(0),
            }
        }
        walk(&self.root)
    }

    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        let v = eval_node(&self.root, env)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::Eval(format!("non-finite result in `{}`", self.source)))
        }
    }
}

impl fmt::Display for LossExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn eval_node(node: &Node, env: &Env<'_>) -> Result<f64, ExprError> {
    Ok(match node {
        Node::Num(v) => *v,
        Node::Var(var) => match *var {
            Var::Label => env.label,
            Var::Deviation => env.deviation,
            Var::Action(i) => *env
                .action
                .get(i)
                .ok_or_else(|| ExprError::Eval(format!("z{} is out of range", i + 1)))?,
            Var::Feature(i) => *env
                .feature
                .get(i)
                .ok_or_else(|| ExprError::Eval(format!("x{} is out of range", i + 1)))?,
        },
        Node::Neg(a) => -eval_node(a, env)?,
        Node::Bin(op, a, b) => {
            let a = eval_node(a, env)?;
            let b = eval_node(b, env)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(ExprError::Eval("division by zero".into()));
                    }
                    a / b
                }
                BinOp::Pow => {
                    let v = a.powf(b);
                    if v.is_nan() {
                        return Err(ExprError::Eval(format!("{a}^{b} is undefined")));
                    }
                    v
                }
            }
        }
        Node::Call(func, args) => {
            let x = eval_node(&args[0], env)?;
            match func {
                Func::Abs => x.abs(),
                Func::Exp => x.exp(),
                Func::Log => {
                    if x <= 0.0 {
                        return Err(ExprError::Eval(format!("log of nonpositive value {x}")));
                    }
                    x.ln()
                }
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Relu => x.max(0.0),
                Func::Max => x.max(eval_node(&args[1], env)?),
                Func::Min => x.min(eval_node(&args[1], env)?),
            }
        }
    })
}

/// Parses a loss expression over `z1..zk` and `y`.
pub fn parse_loss_expr(text: &str) -> Result<LossExpr, ExprError> {
    parse_expr(text, Scope::LOSS)
}

/// Parses an expression whose variables are resolved against `scope`.
pub fn parse_expr(text: &str, scope: Scope) -> Result<LossExpr, ExprError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        depth: 0,
        scope,
    };
    let root = parser.expr()?;
    let tok = parser.peek();
    if tok.kind != Tok::Eof {
        return Err(parser.syntax(&tok, "operator or end of input"));
    }
    Ok(LossExpr {
        source: text.trim().to_string(),
        root,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            col += 1;
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(kind) = single {
            out.push(Token { kind, line: tl, col: tc });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let lit: String = chars[start..i].iter().collect();
            col += i - start;
            let value = lit
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ExprError::Syntax {
                    line: tl,
                    col: tc,
                    expected: "number".into(),
                })?;
            out.push(Token {
                kind: Tok::Num(value),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                kind: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                col: tc,
            });
            continue;
        }
        return Err(ExprError::Syntax {
            line: tl,
            col: tc,
            expected: format!("expression, found `{c}`"),
        });
    }
    out.push(Token {
        kind: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    depth: usize,
    scope: Scope,
}

impl Parser {
    fn peek(&self) -> Token {
        self.tokens[self.pos].clone()
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.kind != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn syntax(&self, tok: &Token, expected: &str) -> ExprError {
        ExprError::Syntax {
            line: tok.line,
            col: tok.col,
            expected: expected.to_string(),
        }
    }

    fn enter(&mut self) -> Result<(), ExprError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            let tok = self.peek();
            return Err(self.syntax(&tok, "shallower nesting"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.peek().kind == Tok::Minus {
            self.bump();
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek().kind == Tok::Caret {
            self.bump();
            self.enter()?;
            let exp = self.unary()?;
            self.depth -= 1;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let tok = self.bump();
        match tok.kind {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                self.enter()?;
                let inner = self.expr()?;
                self.depth -= 1;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(ref name) => {
                if self.peek().kind == Tok::LParen {
                    let func = Func::lookup(name).ok_or_else(|| ExprError::UnknownIdentifier {
                        name: name.clone(),
                        line: tok.line,
                        col: tok.col,
                    })?;
                    self.bump();
                    self.enter()?;
                    let mut args = Vec::new();
                    if self.peek().kind != Tok::RParen {
                        args.push(self.expr()?);
                        while self.peek().kind == Tok::Comma {
                            self.bump();
                            args.push(self.expr()?);
                        }
                    }
                    self.depth -= 1;
                    self.expect_rparen()?;
                    if args.len() != func.arity() {
                        return Err(ExprError::Arity {
                            name: name.clone(),
                            expected: func.arity(),
                            found: args.len(),
                            line: tok.line,
                            col: tok.col,
                        });
                    }
                    Ok(Node::Call(func, args))
                } else {
                    self.scope
                        .resolve(name)
                        .map(Node::Var)
                        .ok_or_else(|| ExprError::UnknownIdentifier {
                            name: name.clone(),
                            line: tok.line,
                            col: tok.col,
                        })
                }
            }
            _ => Err(self.syntax(&tok, "number, identifier or `(`")),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        let tok = self.bump();
        if tok.kind == Tok::RParen {
            Ok(())
        } else {
            Err(self.syntax(&tok, "`)`"))
        }
    }
}
