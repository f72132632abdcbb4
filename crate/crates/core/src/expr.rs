//! Decision-tree expression language.
//!
//! A tree turns named numeric inputs into one number. Nodes are inputs,
//! constants, unary and binary arithmetic, conditionals, weighted
//! activations, calls into other named trees and explicit returns. Trees are
//! stored as JSON documents; the grammar is in `docs/expr-grammar.md`.
//!
//! Calls pass their argument bindings to the callee; callee inputs the call
//! does not bind are read from the caller's bindings. Division by zero and
//! non-finite intermediate values are errors.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};

pub const DEFAULT_MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at {position}: {message}")]
    SyntaxError { position: String, message: String },
    #[error("tree `{tree}` references undeclared input `{input}`")]
    UnknownInput { tree: String, input: String },
    #[error("tree `{tree}` calls unknown tree `{callee}`")]
    UnknownSubtree { tree: String, callee: String },
    #[error("call cycle {0:?} involves a tree without the recursion flag")]
    CycleWithoutRecursionFlag(Vec<String>),
    #[error("no binding for input `{0}`")]
    MissingBinding(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("call depth exceeded {0}")]
    RecursionDepthExceeded(usize),
    #[error("non-finite intermediate result")]
    NonFiniteResult,
}

impl ExprError {
    pub fn code(&self) -> &'static str {
        match self {
            ExprError::SyntaxError { .. } => "expr.SyntaxError",
            ExprError::UnknownInput { .. } => "expr.UnknownInput",
            ExprError::UnknownSubtree { .. } => "expr.UnknownSubtree",
            ExprError::CycleWithoutRecursionFlag(_) => "expr.CycleWithoutRecursionFlag",
            ExprError::MissingBinding(_) => "expr.MissingBinding",
            ExprError::DivisionByZero => "expr.DivisionByZero",
            ExprError::RecursionDepthExceeded(_) => "expr.RecursionDepthExceeded",
            ExprError::NonFiniteResult => "expr.NonFiniteResult",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sqrt,
    Ln,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Comparison {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Comparison::Lt => a < b,
            Comparison::Le => a <= b,
            Comparison::Eq => a == b,
            Comparison::Ge => a >= b,
            Comparison::Gt => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Clamp { lo: f64, hi: f64 },
    Logistic,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Clamp { lo, hi } => x.clamp(lo, hi),
            // kept strictly inside (0, 1); the plain formula rounds to 0 or 1 for |x| > ~37
            Activation::Logistic => (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub cmp: Comparison,
    pub lhs: Box<ExprNode>,
    pub rhs: Box<ExprNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Input(String),
    Constant(f64),
    Unary(UnaryOp, Box<ExprNode>),
    Binary(BinaryOp, Box<ExprNode>, Box<ExprNode>),
    Conditional {
        predicate: Predicate,
        then: Box<ExprNode>,
        otherwise: Box<ExprNode>,
    },
    Weighted {
        child: Box<ExprNode>,
        weight: f64,
        activation: Activation,
    },
    Call {
        tree: String,
        args: BTreeMap<String, ExprNode>,
    },
    Return(Box<ExprNode>),
}

impl ExprNode {
    pub fn input(name: &str) -> Self {
        ExprNode::Input(name.to_string())
    }

    pub fn constant(v: f64) -> Self {
        ExprNode::Constant(v)
    }

    pub fn binary(op: BinaryOp, lhs: ExprNode, rhs: ExprNode) -> Self {
        ExprNode::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ExprNode)) {
        f(self);
        match self {
            ExprNode::Input(_) | ExprNode::Constant(_) => {}
            ExprNode::Unary(_, a) | ExprNode::Return(a) => a.visit(f),
            ExprNode::Weighted { child, .. } => child.visit(f),
            ExprNode::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            ExprNode::Conditional {
                predicate,
                then,
                otherwise,
            } => {
                predicate.lhs.visit(f);
                predicate.rhs.visit(f);
                then.visit(f);
                otherwise.visit(f);
            }
            ExprNode::Call { args, .. } => {
                for a in args.values() {
                    a.visit(f);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    pub name: String,
    pub declared_inputs: Vec<String>,
    pub recursive: bool,
    pub root: ExprNode,
}

impl ExprTree {
    pub fn new(name: &str, inputs: &[&str], root: ExprNode) -> Self {
        ExprTree {
            name: name.to_string(),
            declared_inputs: inputs.iter().map(|s| s.to_string()).collect(),
            recursive: false,
            root,
        }
    }

    fn callees(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.root.visit(&mut |n| {
            if let ExprNode::Call { tree, .. } = n {
                out.insert(tree.as_str());
            }
        });
        out
    }

    /// Checks that every input reference is declared.
    fn check_inputs(&self) -> Result<(), ExprError> {
        let mut result = Ok(());
        self.root.visit(&mut |n| {
            if let ExprNode::Input(name) = n {
                if result.is_ok() && !self.declared_inputs.iter().any(|d| d == name) {
                    result = Err(ExprError::UnknownInput {
                        tree: self.name.clone(),
                        input: name.clone(),
                    });
                }
            }
        });
        result
    }

    pub fn to_document(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("name".into(), Value::String(self.name.clone()));
        obj.insert(
            "inputs".into(),
            Value::Array(self.declared_inputs.iter().cloned().map(Value::String).collect()),
        );
        if self.recursive {
            obj.insert("recursive".into(), Value::Bool(true));
        }
        obj.insert("root".into(), node_to_value(&self.root));
        Value::Object(obj)
    }
}

/// Named trees that may call each other.
#[derive(Debug, Clone, Default)]
pub struct ExprRegistry {
    trees: BTreeMap<String, ExprTree>,
}

impl ExprRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ExprTree> {
        self.trees.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trees.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.trees.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Adds a tree whose callees are already registered (or itself).
    pub fn insert(&mut self, tree: ExprTree) -> Result<(), ExprError> {
        tree.check_inputs()?;
        let name = tree.name.clone();
        let previous = self.trees.insert(name.clone(), tree);
        let checked = self.check_tree(&name);
        if let Err(e) = checked {
            match previous {
                Some(p) => {
                    self.trees.insert(name, p);
                }
                None => {
                    self.trees.remove(&name);
                }
            }
            return Err(e);
        }
        Ok(())
    }

    /// Parses a batch of documents whose trees may reference each other in
    /// any order.
    pub fn from_documents<S: AsRef<str>>(docs: &[S]) -> Result<Self, ExprError> {
        let mut reg = ExprRegistry::new();
        for d in docs {
            let tree = parse_document(d.as_ref())?;
            tree.check_inputs()?;
            reg.trees.insert(tree.name.clone(), tree);
        }
        let names: Vec<String> = reg.trees.keys().cloned().collect();
        for n in &names {
            reg.check_tree(n)?;
        }
        Ok(reg)
    }

    fn check_tree(&self, name: &str) -> Result<(), ExprError> {
        let tree = &self.trees[name];
        let mut err = None;
        tree.root.visit(&mut |n| {
            if err.is_some() {
                return;
            }
            if let ExprNode::Call { tree: callee, args } = n {
                match self.trees.get(callee) {
                    None => {
                        err = Some(ExprError::UnknownSubtree {
                            tree: name.to_string(),
                            callee: callee.clone(),
                        })
                    }
                    Some(c) => {
                        if let Some(bad) = args.keys().find(|a| !c.declared_inputs.contains(a)) {
                            err = Some(ExprError::UnknownInput {
                                tree: callee.clone(),
                                input: bad.clone(),
                            });
                        }
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.check_cycles_from(name)
    }

    /// Depth-first search for a call cycle through `start`; a cycle is
    /// allowed only when every tree on it carries the recursion flag.
    fn check_cycles_from(&self, start: &str) -> Result<(), ExprError> {
        fn dfs<'a>(
            reg: &'a ExprRegistry,
            node: &'a str,
            stack: &mut Vec<&'a str>,
            done: &mut BTreeSet<&'a str>,
        ) -> Result<(), ExprError> {
            if let Some(pos) = stack.iter().position(|s| *s == node) {
                let cycle: Vec<&str> = stack[pos..].to_vec();
                if cycle.iter().all(|n| reg.trees[*n].recursive) {
                    return Ok(());
                }
                return Err(ExprError::CycleWithoutRecursionFlag(
                    cycle.into_iter().map(String::from).collect(),
                ));
            }
            if done.contains(node) {
                return Ok(());
            }
            stack.push(node);
            if let Some(t) = reg.trees.get(node) {
                for c in t.callees() {
                    if reg.trees.contains_key(c) {
                        dfs(reg, c, stack, done)?;
                    }
                }
            }
            stack.pop();
            done.insert(node);
            Ok(())
        }
        dfs(self, start, &mut Vec::new(), &mut BTreeSet::new())
    }
}

/// Parses one tree document and resolves its calls against `registry`.
/// Calls to the tree itself resolve when the tree is flagged recursive.
pub fn parse_tree(document: &str, registry: &ExprRegistry) -> Result<ExprTree, ExprError> {
    let tree = parse_document(document)?;
    tree.check_inputs()?;
    let mut scratch = registry.clone();
    scratch.trees.insert(tree.name.clone(), tree.clone());
    scratch.check_tree(&tree.name)?;
    Ok(tree)
}

fn parse_document(document: &str) -> Result<ExprTree, ExprError> {
    let value: Value = serde_json::from_str(document).map_err(|e| ExprError::SyntaxError {
        position: format!("{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    tree_from_value(&value)
}

fn syntax(position: &str, message: impl Into<String>) -> ExprError {
    ExprError::SyntaxError {
        position: if position.is_empty() {
            "/".into()
        } else {
            position.into()
        },
        message: message.into(),
    }
}

pub fn tree_from_value(value: &Value) -> Result<ExprTree, ExprError> {
    let obj = value
        .as_object()
        .ok_or_else(|| syntax("", "tree document must be an object"))?;
    for k in obj.keys() {
        if !matches!(k.as_str(), "name" | "inputs" | "recursive" | "root") {
            return Err(syntax(&format!("/{k}"), format!("unexpected key `{k}`")));
        }
    }
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| syntax("/name", "expected a non-empty string"))?
        .to_string();
    let declared_inputs = match obj.get("inputs") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str()
                    .map(String::from)
                    .ok_or_else(|| syntax(&format!("/inputs/{i}"), "expected a string"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(syntax("/inputs", "expected an array of names")),
    };
    let recursive = match obj.get("recursive") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(syntax("/recursive", "expected a boolean")),
    };
    let root = node_from_value(
        obj.get("root").ok_or_else(|| syntax("/root", "missing root node"))?,
        "/root",
    )?;
    Ok(ExprTree {
        name,
        declared_inputs,
        recursive,
        root,
    })
}

fn number(v: &Value, path: &str) -> Result<f64, ExprError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| syntax(path, "expected a finite number"))
}

fn child(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Box<ExprNode>, ExprError> {
    let p = format!("{path}/{key}");
    let v = obj.get(key).ok_or_else(|| syntax(&p, format!("missing `{key}`")))?;
    node_from_value(v, &p).map(Box::new)
}

fn only_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<(), ExprError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(syntax(&format!("{path}/{k}"), format!("unexpected key `{k}`"))),
        None => Ok(()),
    }
}

fn node_from_value(value: &Value, path: &str) -> Result<ExprNode, ExprError> {
    if let Some(x) = value.as_f64() {
        return Ok(ExprNode::Constant(number(value, path).map(|_| x)?));
    }
    let obj = value
        .as_object()
        .ok_or_else(|| syntax(path, "expected a node object or number"))?;
    if let Some(v) = obj.get("input") {
        only_keys(obj, &["input"], path)?;
        let name = v
            .as_str()
            .ok_or_else(|| syntax(&format!("{path}/input"), "expected a name"))?;
        return Ok(ExprNode::Input(name.to_string()));
    }
    if let Some(v) = obj.get("const") {
        only_keys(obj, &["const"], path)?;
        return Ok(ExprNode::Constant(number(v, &format!("{path}/const"))?));
    }
    if let Some(v) = obj.get("unary") {
        only_keys(obj, &["unary", "arg"], path)?;
        let op = match v.as_str() {
            Some("neg") => UnaryOp::Neg,
            Some("abs") => UnaryOp::Abs,
            Some("sqrt") => UnaryOp::Sqrt,
            Some("ln") => UnaryOp::Ln,
            Some("exp") => UnaryOp::Exp,
            _ => {
                return Err(syntax(
                    &format!("{path}/unary"),
                    "expected one of neg, abs, sqrt, ln, exp",
                ))
            }
        };
        return Ok(ExprNode::Unary(op, child(obj, "arg", path)?));
    }
    if let Some(v) = obj.get("binary") {
        only_keys(obj, &["binary", "lhs", "rhs"], path)?;
        let op = match v.as_str() {
            Some("add") => BinaryOp::Add,
            Some("sub") => BinaryOp::Sub,
            Some("mul") => BinaryOp::Mul,
            Some("div") => BinaryOp::Div,
            Some("min") => BinaryOp::Min,
            Some("max") => BinaryOp::Max,
            Some("pow") => BinaryOp::Pow,
            _ => {
                return Err(syntax(
                    &format!("{path}/binary"),
                    "expected one of add, sub, mul, div, min, max, pow",
                ))
            }
        };
        return Ok(ExprNode::Binary(op, child(obj, "lhs", path)?, child(obj, "rhs", path)?));
    }
    if let Some(v) = obj.get("if") {
        only_keys(obj, &["if", "then", "else"], path)?;
        let ppath = format!("{path}/if");
        let p = v
            .as_object()
            .ok_or_else(|| syntax(&ppath, "expected a predicate object"))?;
        only_keys(p, &["cmp", "lhs", "rhs"], &ppath)?;
        let cmp = match p.get("cmp").and_then(Value::as_str) {
            Some("lt") => Comparison::Lt,
            Some("le") => Comparison::Le,
            Some("eq") => Comparison::Eq,
            Some("ge") => Comparison::Ge,
            Some("gt") => Comparison::Gt,
            _ => return Err(syntax(&format!("{ppath}/cmp"), "expected one of lt, le, eq, ge, gt")),
        };
        return Ok(ExprNode::Conditional {
            predicate: Predicate {
                cmp,
                lhs: child(p, "lhs", &ppath)?,
                rhs: child(p, "rhs", &ppath)?,
            },
            then: child(obj, "then", path)?,
            otherwise: child(obj, "else", path)?,
        });
    }
    if obj.contains_key("weighted") {
        only_keys(obj, &["weighted", "weight", "activation"], path)?;
        let wpath = format!("{path}/weight");
        let weight = number(
            obj.get("weight").ok_or_else(|| syntax(&wpath, "missing `weight`"))?,
            &wpath,
        )?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(syntax(&wpath, "weight must lie in [0, 1]"));
        }
        let apath = format!("{path}/activation");
        let activation = match obj.get("activation") {
            None => Activation::Identity,
            Some(Value::String(s)) if s == "identity" => Activation::Identity,
            Some(Value::String(s)) if s == "logistic" => Activation::Logistic,
            Some(Value::Object(a)) if a.contains_key("clamp") => {
                let bounds = a.get("clamp").and_then(Value::as_array).filter(|b| b.len() == 2);
                let bounds = bounds.ok_or_else(|| syntax(&apath, "clamp takes [lo, hi]"))?;
                let lo = number(&bounds[0], &apath)?;
                let hi = number(&bounds[1], &apath)?;
                if lo > hi {
                    return Err(syntax(&apath, "clamp bounds must satisfy lo <= hi"));
                }
                Activation::Clamp { lo, hi }
            }
            Some(_) => {
                return Err(syntax(
                    &apath,
                    "expected \"identity\", \"logistic\" or {\"clamp\": [lo, hi]}",
                ))
            }
        };
        return Ok(ExprNode::Weighted {
            child: child(obj, "weighted", path)?,
            weight,
            activation,
        });
    }
    if let Some(v) = obj.get("call") {
        only_keys(obj, &["call", "args"], path)?;
        let tree = v
            .as_str()
            .ok_or_else(|| syntax(&format!("{path}/call"), "expected a tree name"))?;
        let mut args = BTreeMap::new();
        match obj.get("args") {
            None => {}
            Some(Value::Object(a)) => {
                for (k, v) in a {
                    args.insert(k.clone(), node_from_value(v, &format!("{path}/args/{k}"))?);
                }
            }
            Some(_) => return Err(syntax(&format!("{path}/args"), "expected an object of bindings")),
        }
        return Ok(ExprNode::Call {
            tree: tree.to_string(),
            args,
        });
    }
    if obj.contains_key("return") {
        only_keys(obj, &["return"], path)?;
        return Ok(ExprNode::Return(child(obj, "return", path)?));
    }
    Err(syntax(path, "unrecognised node"))
}

fn node_to_value(node: &ExprNode) -> Value {
    use serde_json::json;
    match node {
        ExprNode::Input(n) => json!({ "input": n }),
        ExprNode::Constant(c) => json!({ "const": c }),
        ExprNode::Unary(op, a) => {
            let op = match op {
                UnaryOp::Neg => "neg",
                UnaryOp::Abs => "abs",
                UnaryOp::Sqrt => "sqrt",
                UnaryOp::Ln => "ln",
                UnaryOp::Exp => "exp",
            };
            json!({ "unary": op, "arg": node_to_value(a) })
        }
        ExprNode::Binary(op, a, b) => {
            let op = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
                BinaryOp::Min => "min",
                BinaryOp::Max => "max",
                BinaryOp::Pow => "pow",
            };
            json!({ "binary": op, "lhs": node_to_value(a), "rhs": node_to_value(b) })
        }
        ExprNode::Conditional {
            predicate,
            then,
            otherwise,
        } => {
            let cmp = match predicate.cmp {
                Comparison::Lt => "lt",
                Comparison::Le => "le",
                Comparison::Eq => "eq",
                Comparison::Ge => "ge",
                Comparison::Gt => "gt",
            };
            json!({
                "if": { "cmp": cmp, "lhs": node_to_value(&predicate.lhs), "rhs": node_to_value(&predicate.rhs) },
                "then": node_to_value(then),
                "else": node_to_value(otherwise),
            })
        }
        ExprNode::Weighted {
            child,
            weight,
            activation,
        } => {
            let act = match activation {
                Activation::Identity => json!("identity"),
                Activation::Logistic => json!("logistic"),
                Activation::Clamp { lo, hi } => json!({ "clamp": [lo, hi] }),
            };
            json!({ "weighted": node_to_value(child), "weight": weight, "activation": act })
        }
        ExprNode::Call { tree, args } => {
            let args: Map<String, Value> = args.iter().map(|(k, v)| (k.clone(), node_to_value(v))).collect();
            json!({ "call": tree, "args": args })
        }
        ExprNode::Return(a) => json!({ "return": node_to_value(a) }),
    }
}

/// Inputs whose absence from the bindings makes [`eval`] fail with
/// `MissingBinding`: the tree's declared inputs plus, transitively, every
/// callee input that the call does not bind itself.
pub fn free_inputs(tree: &ExprTree, registry: &ExprRegistry) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut visiting = BTreeSet::new();
    collect_free(tree, registry, &mut visiting, &mut out);
    out
}

fn collect_free(tree: &ExprTree, registry: &ExprRegistry, visiting: &mut BTreeSet<String>, out: &mut BTreeSet<String>) {
    out.extend(tree.declared_inputs.iter().cloned());
    if !visiting.insert(tree.name.clone()) {
        return;
    }
    let mut calls = Vec::new();
    tree.root.visit(&mut |n| {
        if let ExprNode::Call { tree, args } = n {
            calls.push((tree.clone(), args.keys().cloned().collect::<BTreeSet<_>>()));
        }
    });
    for (callee, bound) in calls {
        let Some(c) = registry.get(&callee).or((callee == tree.name).then_some(tree)) else {
            continue;
        };
        let mut inner = BTreeSet::new();
        collect_free(c, registry, visiting, &mut inner);
        out.extend(inner.into_iter().filter(|i| !bound.contains(i)));
    }
    visiting.remove(&tree.name);
}

pub type Bindings = BTreeMap<String, f64>;

/// Evaluates `tree` with the default call-depth cap.
pub fn eval(tree: &ExprTree, bindings: &Bindings, registry: &ExprRegistry) -> Result<f64, ExprError> {
    Evaluator::default().eval(tree, bindings, registry)
}

#[derive(Debug, Clone, Copy)]
pub struct Evaluator {
    pub max_depth: usize,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator {
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl Evaluator {
    pub fn eval(&self, tree: &ExprTree, bindings: &Bindings, registry: &ExprRegistry) -> Result<f64, ExprError> {
        if let Some(missing) = free_inputs(tree, registry)
            .into_iter()
            .find(|i| !bindings.contains_key(i))
        {
            return Err(ExprError::MissingBinding(missing));
        }
        self.eval_node(&tree.root, tree, bindings, registry, 0)
    }

    fn eval_node(
        &self,
        node: &ExprNode,
        tree: &ExprTree,
        env: &Bindings,
        registry: &ExprRegistry,
        depth: usize,
    ) -> Result<f64, ExprError> {
        let value = match node {
            ExprNode::Input(name) => *env.get(name).ok_or_else(|| ExprError::MissingBinding(name.clone()))?,
            ExprNode::Constant(c) => *c,
            ExprNode::Unary(op, a) => {
                let a = self.eval_node(a, tree, env, registry, depth)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Abs => a.abs(),
                    UnaryOp::Sqrt => a.sqrt(),
                    UnaryOp::Ln => a.ln(),
                    UnaryOp::Exp => a.exp(),
                }
            }
            ExprNode::Binary(op, a, b) => {
                let a = self.eval_node(a, tree, env, registry, depth)?;
                let b = self.eval_node(b, tree, env, registry, depth)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        a / b
                    }
                    BinaryOp::Min => a.min(b),
                    BinaryOp::Max => a.max(b),
                    BinaryOp::Pow => a.powf(b),
                }
            }
            ExprNode::Conditional {
                predicate,
                then,
                otherwise,
            } => {
                let l = self.eval_node(&predicate.lhs, tree, env, registry, depth)?;
                let r = self.eval_node(&predicate.rhs, tree, env, registry, depth)?;
                if predicate.cmp.holds(l, r) {
                    self.eval_node(then, tree, env, registry, depth)?
                } else {
                    self.eval_node(otherwise, tree, env, registry, depth)?
                }
            }
            ExprNode::Weighted {
                child,
                weight,
                activation,
            } => activation.apply(weight * self.eval_node(child, tree, env, registry, depth)?),
            ExprNode::Call { tree: callee, args } => {
                if depth + 1 > self.max_depth {
                    return Err(ExprError::RecursionDepthExceeded(self.max_depth));
                }
                let target = if *callee == tree.name {
                    tree
                } else {
                    registry.get(callee).ok_or_else(|| ExprError::UnknownSubtree {
                        tree: tree.name.clone(),
                        callee: callee.clone(),
                    })?
                };
                let mut inner = env.clone();
                for (k, v) in args {
                    inner.insert(k.clone(), self.eval_node(v, tree, env, registry, depth)?);
                }
                self.eval_node(&target.root, target, &inner, registry, depth + 1)?
            }
            ExprNode::Return(a) => self.eval_node(a, tree, env, registry, depth)?,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ExprError::NonFiniteResult)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(pairs: &[(&str, f64)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn doubling_tree() {
        let reg = ExprRegistry::new();
        let t = parse_tree(
            r#"{"name": "double", "inputs": ["x"], "root": {"binary": "mul", "lhs": 2, "rhs": {"input": "x"}}}"#,
            &reg,
        )
        .unwrap();
        assert_eq!(t.declared_inputs, vec!["x"]);
        assert!(matches!(t.root, ExprNode::Binary(BinaryOp::Mul, _, _)));
        assert_eq!(eval(&t, &b(&[("x", 3.0)]), &reg).unwrap(), 6.0);
        assert_eq!(free_inputs(&t, &reg), BTreeSet::from(["x".to_string()]));
    }

    #[test]
    fn identity_and_constant() {
        let reg = ExprRegistry::new();
        let id = ExprTree::new("id", &["x"], ExprNode::input("x"));
        for v in [-3.5, 0.0, 1e9, 42.0] {
            assert_eq!(eval(&id, &b(&[("x", v)]), &reg).unwrap(), v);
        }
        let c = ExprTree::new("c", &[], ExprNode::constant(7.0));
        assert!(free_inputs(&c, &reg).is_empty());
    }

    #[test]
    fn undeclared_input() {
        let err = parse_tree(
            r#"{"name": "t", "inputs": ["x"], "root": {"input": "q"}}"#,
            &ExprRegistry::new(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            ExprError::UnknownInput {
                tree: "t".into(),
                input: "q".into()
            }
        );
    }

    #[test]
    fn unknown_subtree_and_syntax_position() {
        let err = parse_tree(r#"{"name": "t", "root": {"call": "nope"}}"#, &ExprRegistry::new()).unwrap_err();
        assert!(matches!(err, ExprError::UnknownSubtree { .. }));
        let err = parse_tree("{\"name\": \"t\",\n \"root\": {", &ExprRegistry::new()).unwrap_err();
        assert!(
            matches!(err, ExprError::SyntaxError { ref position, .. } if position.starts_with("2:")),
            "{err:?}"
        );
        let err = parse_tree(
            r#"{"name": "t", "root": {"binary": "mod", "lhs": 1, "rhs": 2}}"#,
            &ExprRegistry::new(),
        )
        .unwrap_err();
        assert!(matches!(err, ExprError::SyntaxError { ref position, .. } if position == "/root/binary"));
    }

    #[test]
    fn two_cycle_needs_recursion_flags() {
        let a = r#"{"name": "a", "inputs": ["x"], "root": {"call": "b"}}"#;
        let bdoc = r#"{"name": "b", "inputs": ["x"], "root": {"call": "a"}}"#;
        let err = ExprRegistry::from_documents(&[a, bdoc]).unwrap_err();
        assert!(
            matches!(err, ExprError::CycleWithoutRecursionFlag(ref c) if c.len() == 2),
            "{err:?}"
        );

        let a = r#"{"name": "a", "inputs": ["x"], "recursive": true, "root": {"call": "b"}}"#;
        let bdoc = r#"{"name": "b", "inputs": ["x"], "recursive": true, "root": {"call": "a"}}"#;
        let reg = ExprRegistry::from_documents(&[a, bdoc]).unwrap();
        // unbounded mutual recursion hits the depth cap
        let err = eval(reg.get("a").unwrap(), &b(&[("x", 1.0)]), &reg).unwrap_err();
        assert_eq!(err, ExprError::RecursionDepthExceeded(DEFAULT_MAX_DEPTH));
    }

    #[test]
    fn self_call_rejected_without_flag() {
        let doc = r#"{"name": "f", "inputs": ["n"], "root": {"call": "f", "args": {"n": {"input": "n"}}}}"#;
        assert!(matches!(
            parse_tree(doc, &ExprRegistry::new()),
            Err(ExprError::CycleWithoutRecursionFlag(_))
        ));
    }

    #[test]
    fn bounded_recursion_factorial() {
        let doc = r#"{
            "name": "fact", "inputs": ["n"], "recursive": true,
            "root": {"if": {"cmp": "le", "lhs": {"input": "n"}, "rhs": 1},
                     "then": {"return": 1},
                     "else": {"return": {"binary": "mul", "lhs": {"input": "n"},
                              "rhs": {"call": "fact", "args": {"n": {"binary": "sub", "lhs": {"input": "n"}, "rhs": 1}}}}}}
        }"#;
        let mut reg = ExprRegistry::new();
        let t = parse_tree(doc, &reg).unwrap();
        reg.insert(t.clone()).unwrap();
        assert_eq!(eval(&t, &b(&[("n", 5.0)]), &reg).unwrap(), 120.0);
        let shallow = Evaluator { max_depth: 3 };
        assert_eq!(
            shallow.eval(&t, &b(&[("n", 5.0)]), &reg),
            Err(ExprError::RecursionDepthExceeded(3))
        );
    }

    #[test]
    fn eval_errors() {
        let reg = ExprRegistry::new();
        let div = ExprTree::new(
            "d",
            &["x", "y"],
            ExprNode::binary(BinaryOp::Div, ExprNode::input("x"), ExprNode::input("y")),
        );
        assert_eq!(
            eval(&div, &b(&[("x", 1.0), ("y", 0.0)]), &reg),
            Err(ExprError::DivisionByZero)
        );
        assert_eq!(
            eval(&div, &b(&[("x", 1.0)]), &reg),
            Err(ExprError::MissingBinding("y".into()))
        );
        let sq = ExprTree::new(
            "s",
            &["x"],
            ExprNode::Unary(UnaryOp::Sqrt, Box::new(ExprNode::input("x"))),
        );
        assert_eq!(eval(&sq, &b(&[("x", -1.0)]), &reg), Err(ExprError::NonFiniteResult));
        let big = ExprTree::new(
            "p",
            &["x"],
            ExprNode::binary(BinaryOp::Pow, ExprNode::constant(10.0), ExprNode::input("x")),
        );
        assert_eq!(eval(&big, &b(&[("x", 400.0)]), &reg), Err(ExprError::NonFiniteResult));
    }

    #[test]
    fn weights_outside_unit_interval_rejected() {
        let doc = r#"{"name": "w", "inputs": ["x"], "root": {"weighted": {"input": "x"}, "weight": 1.5}}"#;
        assert!(matches!(
            parse_tree(doc, &ExprRegistry::new()),
            Err(ExprError::SyntaxError { .. })
        ));
    }

    #[test]
    fn activations() {
        let reg = ExprRegistry::new();
        let doc = r#"{"name": "w", "inputs": ["x"], "root": {"weighted": {"input": "x"}, "weight": 0.5, "activation": {"clamp": [0, 2]}}}"#;
        let t = parse_tree(doc, &reg).unwrap();
        assert_eq!(eval(&t, &b(&[("x", 3.0)]), &reg).unwrap(), 1.5);
        assert_eq!(eval(&t, &b(&[("x", 30.0)]), &reg).unwrap(), 2.0);
        assert_eq!(eval(&t, &b(&[("x", -30.0)]), &reg).unwrap(), 0.0);
        let doc = r#"{"name": "l", "inputs": ["x"], "root": {"weighted": {"input": "x"}, "weight": 1, "activation": "logistic"}}"#;
        let t = parse_tree(doc, &reg).unwrap();
        assert_eq!(eval(&t, &b(&[("x", 0.0)]), &reg).unwrap(), 0.5);
    }

    #[test]
    fn document_round_trip() {
        let doc = r#"{"name": "t", "inputs": ["a", "b"], "root": {"if": {"cmp": "ge", "lhs": {"input": "a"}, "rhs": 2.5},
            "then": {"weighted": {"unary": "abs", "arg": {"input": "b"}}, "weight": 0.25, "activation": "logistic"},
            "else": {"binary": "max", "lhs": {"input": "a"}, "rhs": {"const": -1}}}}"#;
        let t = parse_tree(doc, &ExprRegistry::new()).unwrap();
        let again = tree_from_value(&t.to_document()).unwrap();
        assert_eq!(t, again);
    }
}
