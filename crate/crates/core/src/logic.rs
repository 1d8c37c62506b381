//! Compositional Boolean logic tasks.
//!
//! A task is a full binary tree of height `h` whose internal nodes carry one
//! of `and`, `or`, `xor` and whose leaves are Boolean constants. Internal
//! nodes are numbered bottom-up in level order: the deepest internal level
//! takes IDs `1..=2^(h-1)` left to right, the next level continues, and the
//! root receives `2^h - 1`. Solving in increasing ID order therefore always
//! visits children before parents.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_HEIGHT: u32 = 8;

#[derive(Debug, Error)]
pub enum LogicError {
    #[error("tree height {0} outside 1..={MAX_HEIGHT}")]
    HeightOutOfRange(u32),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("dataset size must be even and positive, got {0}")]
    InvalidCount(usize),
    #[error("could not reach a balanced dataset after {draws} draws")]
    GenerationExhausted { draws: usize },
    #[error("inconsistent task record {task_id}: {msg}")]
    Inconsistent { task_id: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LogicError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    And,
    Or,
    Xor,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::And, Op::Or, Op::Xor];

    pub fn apply(self, a: bool, b: bool) -> bool {
        match self {
            Op::And => a && b,
            Op::Or => a || b,
            Op::Xor => a ^ b,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Op::And => "and",
            Op::Or => "or",
            Op::Xor => "xor",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for Op {
    type Err = LogicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(Op::And),
            "or" => Ok(Op::Or),
            "xor" => Ok(Op::Xor),
            other => Err(LogicError::Malformed(format!("unknown operator {other:?}"))),
        }
    }
}

/// Unlabelled expression tree; the input to [`assign_ids`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Leaf(bool),
    Node(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn node(op: Op, left: Expr, right: Expr) -> Self {
        Expr::Node(op, Box::new(left), Box::new(right))
    }

    pub fn eval(&self) -> bool {
        match self {
            Expr::Leaf(v) => *v,
            Expr::Node(op, l, r) => op.apply(l.eval(), r.eval()),
        }
    }

    /// Height if the tree is full, `None` otherwise.
    fn full_height(&self) -> Option<u32> {
        match self {
            Expr::Leaf(_) => Some(0),
            Expr::Node(_, l, r) => {
                let hl = l.full_height()?;
                let hr = r.full_height()?;
                (hl == hr).then_some(hl + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Child {
    Node(u32),
    /// Index into [`LogicTree::leaves`].
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalNode {
    pub id: u32,
    pub op: Op,
    pub left: Child,
    pub right: Child,
    /// 1 is the deepest internal level, `height` is the root.
    pub level: u32,
}

/// Index arithmetic for the bottom-up level-order numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeLayout {
    height: u32,
}

impl TreeLayout {
    pub fn new(height: u32) -> Result<Self> {
        if !(1..=MAX_HEIGHT).contains(&height) {
            return Err(LogicError::HeightOutOfRange(height));
        }
        Ok(Self { height })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn node_count(&self) -> u32 {
        (1 << self.height) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.height
    }

    pub fn root(&self) -> u32 {
        self.node_count()
    }

    /// Number of nodes on `level`.
    pub fn level_width(&self, level: u32) -> u32 {
        1 << (self.height - level)
    }

    /// IDs on `level` are `offset+1 ..= offset+width`.
    pub fn level_offset(&self, level: u32) -> u32 {
        (1 << self.height) - (1 << (self.height - level + 1))
    }

    pub fn contains(&self, id: u32) -> bool {
        (1..=self.node_count()).contains(&id)
    }

    pub fn level_of(&self, id: u32) -> Option<u32> {
        if !self.contains(id) {
            return None;
        }
        (1..=self.height).find(|&l| id <= self.level_offset(l) + self.level_width(l))
    }

    /// Internal children of `id`; `None` for the deepest level (leaf children)
    /// and for IDs outside the tree.
    pub fn children_of(&self, id: u32) -> Option<(u32, u32)> {
        let level = self.level_of(id)?;
        if level == 1 {
            return None;
        }
        let k = id - self.level_offset(level);
        let below = self.level_offset(level - 1);
        Some((below + 2 * k - 1, below + 2 * k))
    }

    /// Leaf indices below a deepest-level node.
    pub fn leaf_children_of(&self, id: u32) -> Option<(usize, usize)> {
        if self.level_of(id)? != 1 {
            return None;
        }
        let k = id as usize;
        Some((2 * k - 2, 2 * k - 1))
    }

    pub fn parent_of(&self, id: u32) -> Option<u32> {
        let level = self.level_of(id)?;
        if level == self.height {
            return None;
        }
        let k = id - self.level_offset(level);
        Some(self.level_offset(level + 1) + k.div_ceil(2))
    }

    /// Width of the zero-padded `[ID]` label.
    pub fn id_width(&self) -> usize {
        self.node_count().to_string().len().max(2)
    }

    pub fn format_id(&self, id: u32) -> String {
        format!("[{:0w$}]", id, w = self.id_width())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicTree {
    pub height: u32,
    /// Node with ID `k` is stored at index `k - 1`.
    pub nodes: Vec<InternalNode>,
    pub leaves: Vec<bool>,
}

impl LogicTree {
    pub fn layout(&self) -> TreeLayout {
        TreeLayout { height: self.height }
    }

    pub fn node(&self, id: u32) -> Option<&InternalNode> {
        id.checked_sub(1).and_then(|i| self.nodes.get(i as usize))
    }

    pub fn root_id(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn ops(&self) -> Vec<Op> {
        self.nodes.iter().map(|n| n.op).collect()
    }

    pub fn to_expr(&self) -> Expr {
        self.child_expr(Child::Node(self.root_id()))
    }

    fn child_expr(&self, child: Child) -> Expr {
        match child {
            Child::Leaf(i) => Expr::Leaf(self.leaves[i]),
            Child::Node(id) => {
                let n = &self.nodes[id as usize - 1];
                Expr::node(n.op, self.child_expr(n.left), self.child_expr(n.right))
            }
        }
    }

    /// Builds a tree from operators in ID order and leaves left to right.
    pub fn from_parts(height: u32, ops: &[Op], leaves: &[bool]) -> Result<Self> {
        let layout = TreeLayout::new(height)?;
        if ops.len() != layout.node_count() as usize || leaves.len() != layout.leaf_count() {
            return Err(LogicError::Malformed(format!(
                "height {height} needs {} operators and {} leaves, got {} and {}",
                layout.node_count(),
                layout.leaf_count(),
                ops.len(),
                leaves.len()
            )));
        }
        let nodes = (1..=layout.node_count())
            .map(|id| {
                let level = layout.level_of(id).expect("id in range");
                let (left, right) = match layout.children_of(id) {
                    Some((l, r)) => (Child::Node(l), Child::Node(r)),
                    None => {
                        let (l, r) = layout.leaf_children_of(id).expect("deepest level");
                        (Child::Leaf(l), Child::Leaf(r))
                    }
                };
                InternalNode { id, op: ops[id as usize - 1], left, right, level }
            })
            .collect();
        Ok(Self { height, nodes, leaves: leaves.to_vec() })
    }
}

/// Draws a full tree with i.i.d. uniform operators and leaves.
pub fn gen_tree(height: u32, seed: u64) -> Result<LogicTree> {
    TreeLayout::new(height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expr = random_expr(height, &mut rng);
    assign_ids(&expr)
}

fn random_expr<R: Rng>(height: u32, rng: &mut R) -> Expr {
    if height == 0 {
        return Expr::Leaf(rng.random());
    }
    let op = Op::ALL[rng.random_range(0..3)];
    let left = random_expr(height - 1, rng);
    let right = random_expr(height - 1, rng);
    Expr::node(op, left, right)
}

/// Numbers the internal nodes of a full tree in bottom-up level order.
pub fn assign_ids(expr: &Expr) -> Result<LogicTree> {
    let height = expr
        .full_height()
        .ok_or_else(|| LogicError::Malformed("tree is not full".into()))?;
    if height == 0 {
        return Err(LogicError::Malformed("a bare constant has no internal nodes".into()));
    }
    let layout = TreeLayout::new(height)?;

    // Breadth-first from the root gives each level left to right.
    let mut by_depth: Vec<Vec<Op>> = vec![Vec::new(); height as usize];
    let mut leaves = Vec::with_capacity(layout.leaf_count());
    let mut frontier = vec![expr];
    for depth in 0..=height as usize {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for e in frontier {
            match e {
                Expr::Leaf(v) => leaves.push(*v),
                Expr::Node(op, l, r) => {
                    by_depth[depth].push(*op);
                    next.push(l.as_ref());
                    next.push(r.as_ref());
                }
            }
        }
        frontier = next;
    }
    // Level 1 is the deepest internal level, i.e. depth h-1.
    let ops: Vec<Op> = by_depth.into_iter().rev().flatten().collect();
    LogicTree::from_parts(height, &ops, &leaves)
}

/// Per-node ground truth, indexed by node ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTruthMap(Vec<bool>);

impl NodeTruthMap {
    pub fn get(&self, id: u32) -> Option<bool> {
        id.checked_sub(1).and_then(|i| self.0.get(i as usize).copied())
    }

    pub fn root(&self) -> bool {
        *self.0.last().expect("non-empty tree")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.0.iter().enumerate().map(|(i, &v)| (i as u32 + 1, v))
    }

    pub fn to_map(&self) -> BTreeMap<u32, bool> {
        self.iter().collect()
    }
}

/// Evaluates every internal node; IDs increase bottom-up so one pass suffices.
pub fn eval_tree(tree: &LogicTree) -> NodeTruthMap {
    let mut values = Vec::with_capacity(tree.nodes.len());
    for node in &tree.nodes {
        let get = |c: Child, values: &Vec<bool>| match c {
            Child::Leaf(i) => tree.leaves[i],
            Child::Node(id) => values[id as usize - 1],
        };
        let v = node.op.apply(get(node.left, &values), get(node.right, &values));
        values.push(v);
    }
    NodeTruthMap(values)
}

fn bool_word(v: bool) -> &'static str {
    if v {
        "True"
    } else {
        "False"
    }
}

/// Renders `[ID]: (left op right)` recursively, e.g.
/// `[03]: ([01]: (True or False) and [02]: (False xor True))`.
pub fn render_expression(tree: &LogicTree) -> String {
    let layout = tree.layout();
    let mut out = String::new();
    render_child(tree, &layout, Child::Node(tree.root_id()), &mut out);
    out
}

fn render_child(tree: &LogicTree, layout: &TreeLayout, child: Child, out: &mut String) {
    match child {
        Child::Leaf(i) => out.push_str(bool_word(tree.leaves[i])),
        Child::Node(id) => {
            let n = &tree.nodes[id as usize - 1];
            out.push_str(&layout.format_id(id));
            out.push_str(": (");
            render_child(tree, layout, n.left, out);
            out.push(' ');
            out.push_str(n.op.keyword());
            out.push(' ');
            render_child(tree, layout, n.right, out);
            out.push(')');
        }
    }
}

/// Parses the bracketed form produced by [`render_expression`] and checks
/// that the embedded IDs agree with the canonical numbering.
pub fn parse_expression(text: &str) -> Result<LogicTree> {
    let mut p = ExprParser { src: text.as_bytes(), pos: 0, ids: Vec::new() };
    let expr = p.operand()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input"));
    }
    let tree = assign_ids(&expr)?;
    // Labels are recorded in pre-order; compare against the canonical IDs.
    let mut canonical = Vec::new();
    preorder_ids(&tree, Child::Node(tree.root_id()), &mut canonical);
    if canonical != p.ids {
        return Err(LogicError::Malformed(format!(
            "node labels {:?} do not follow bottom-up level order {:?}",
            p.ids, canonical
        )));
    }
    Ok(tree)
}

fn preorder_ids(tree: &LogicTree, child: Child, out: &mut Vec<u32>) {
    if let Child::Node(id) = child {
        out.push(id);
        let n = &tree.nodes[id as usize - 1];
        preorder_ids(tree, n.left, out);
        preorder_ids(tree, n.right, out);
    }
}

struct ExprParser<'a> {
    src: &'a [u8],
    pos: usize,
    ids: Vec<u32>,
}

impl ExprParser<'_> {
    fn err(&self, msg: &str) -> LogicError {
        LogicError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn word(&mut self) -> &str {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn operand(&mut self) -> Result<Expr> {
        self.skip_ws();
        match self.src.get(self.pos) {
            Some(b'[') => self.node(),
            Some(_) => {
                let start = self.pos;
                match self.word() {
                    "True" => Ok(Expr::Leaf(true)),
                    "False" => Ok(Expr::Leaf(false)),
                    _ => {
                        self.pos = start;
                        Err(self.err("expected True, False or a labelled node"))
                    }
                }
            }
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn node(&mut self) -> Result<Expr> {
        self.expect(b'[')?;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let id: u32 = std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected node ID digits"))?;
        self.ids.push(id);
        self.expect(b']')?;
        self.expect(b':')?;
        self.expect(b'(')?;
        let left = self.operand()?;
        let op_pos = self.pos;
        let op: Op = self.word().parse().map_err(|_| LogicError::Parse {
            pos: op_pos,
            msg: "expected and/or/xor".into(),
        })?;
        let right = self.operand()?;
        self.expect(b')')?;
        Ok(Expr::node(op, left, right))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub task_id: String,
    pub tree: LogicTree,
    pub expression_text: String,
    pub truth: NodeTruthMap,
    pub root_label: bool,
}

impl TaskInstance {
    pub fn new(task_id: impl Into<String>, tree: LogicTree) -> Self {
        let truth = eval_tree(&tree);
        let expression_text = render_expression(&tree);
        let root_label = truth.root();
        Self { task_id: task_id.into(), tree, expression_text, truth, root_label }
    }

    pub fn height(&self) -> u32 {
        self.tree.height
    }

    pub fn to_record(&self) -> TaskRecord {
        TaskRecord {
            task_id: self.task_id.clone(),
            height: self.tree.height,
            expression: self.expression_text.clone(),
            leaves: self.tree.leaves.clone(),
            ops: self.tree.ops(),
            truth: self.truth.to_map(),
            root_label: self.root_label,
        }
    }

    /// Rebuilds a task from its serialized form, re-deriving and checking
    /// every redundant field.
    pub fn from_record(rec: TaskRecord) -> Result<Self> {
        let inconsistent = |msg: String| LogicError::Inconsistent { task_id: rec.task_id.clone(), msg };
        let tree = LogicTree::from_parts(rec.height, &rec.ops, &rec.leaves)?;
        let parsed = parse_expression(&rec.expression)?;
        if parsed != tree {
            return Err(inconsistent("expression does not match ops/leaves".into()));
        }
        let task = TaskInstance::new(rec.task_id.clone(), tree);
        if task.truth.to_map() != rec.truth {
            return Err(inconsistent("truth map disagrees with evaluation".into()));
        }
        if task.root_label != rec.root_label {
            return Err(inconsistent("root label disagrees with evaluation".into()));
        }
        Ok(task)
    }
}

/// One line of the task JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub height: u32,
    pub expression: String,
    pub leaves: Vec<bool>,
    pub ops: Vec<Op>,
    pub truth: BTreeMap<u32, bool>,
    pub root_label: bool,
}

/// Rejection-samples `count` distinct trees, half of them true at the root.
pub fn gen_balanced_dataset(height: u32, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    TreeLayout::new(height)?;
    if count == 0 || !count.is_multiple_of(2) {
        return Err(LogicError::InvalidCount(count));
    }
    let half = count / 2;
    let max_draws = 10_000 * count;
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let (mut n_true, mut n_false) = (0, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..max_draws {
        let tree = gen_tree(height, stream.random())?;
        let root = eval_tree(&tree).root();
        let slot = if root { &mut n_true } else { &mut n_false };
        if *slot >= half {
            continue;
        }
        let task = TaskInstance::new(format!("h{}_{:04}", height, out.len()), tree);
        if !seen.insert(task.expression_text.clone()) {
            continue;
        }
        *slot += 1;
        out.push(task);
        if out.len() == count {
            return Ok(out);
        }
    }
    Err(LogicError::GenerationExhausted { draws: max_draws })
}

pub fn write_tasks_jsonl<W: Write>(tasks: &[TaskInstance], mut w: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut w, &t.to_record())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)?;
        out.push(TaskInstance::from_record(rec)?);
    }
    Ok(out)
}
