//! Behavior trees: XML parsing and tick execution.
//!
//! Trees are built from five node kinds. Sequence, Fallback and Parallel are
//! control nodes; Condition and Action are leaves whose outcome comes from a
//! [`LeafExecutor`]. A simulation is one tick of the root: depth-first,
//! left-to-right, with Sequence/Fallback short-circuiting and Parallel
//! running every child in order against the shared world.
//!
//! [`Ticker`] is the resumable form of a tick. It yields each leaf that needs
//! an outcome and is `Clone`, so a caller can fork a tick at any leaf.
//!
//! ```xml
//! <bt name="clean_book">
//!   <desc label="clean_book">Wipe the book with the rag in the gripper.</desc>
//!   <sequence id="root">
//!     <condition id="has_rag" label="hold_rag_in_gripper?"/>
//!     <action id="clean_book" label="clean_book"/>
//!   </sequence>
//! </bt>
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickStatus {
    Success,
    Failure,
}

impl fmt::Display for TickStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TickStatus::Success => "success",
            TickStatus::Failure => "failure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Sequence,
    Fallback,
    /// Succeeds when at least `threshold` children succeed.
    Parallel { threshold: usize },
    Condition,
    Action,
}

impl NodeKind {
    pub fn is_leaf(self) -> bool {
        matches!(self, NodeKind::Condition | NodeKind::Action)
    }

    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::Sequence => "sequence",
            NodeKind::Fallback => "fallback",
            NodeKind::Parallel { .. } => "parallel",
            NodeKind::Condition => "condition",
            NodeKind::Action => "action",
        }
    }
}

/// Kind of a leaf, as recorded in action flows and transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Condition,
    Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
    pub description: String,
    pub children: Vec<BtNode>,
}

impl BtNode {
    pub fn leaf_kind(&self) -> Option<LeafKind> {
        match self.kind {
            NodeKind::Condition => Some(LeafKind::Condition),
            NodeKind::Action => Some(LeafKind::Action),
            _ => None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.kind.is_leaf()
    }

    /// Leaves in document (execution) order.
    pub fn leaves(&self) -> Vec<&BtNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a BtNode>) {
        if self.is_leaf() {
            out.push(self);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a BtNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTree {
    pub name: String,
    pub root: BtNode,
    /// Leaf label -> natural-language description.
    pub node_descriptions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BtError {
    #[error("malformed XML: {0}")]
    Parse(String),
    #[error("invalid behavior tree: {0}")]
    Schema(String),
}

impl BehaviorTree {
    /// Validates structure and fills leaf descriptions from `node_descriptions`.
    pub fn new(
        name: impl Into<String>,
        mut root: BtNode,
        node_descriptions: BTreeMap<String, String>,
    ) -> Result<Self, BtError> {
        let mut seen = HashSet::new();
        validate(&root, &mut seen)?;
        fill_descriptions(&mut root, &node_descriptions)?;
        Ok(BehaviorTree { name: name.into(), root, node_descriptions })
    }

    pub fn leaves(&self) -> Vec<&BtNode> {
        self.root.leaves()
    }

    pub fn find(&self, id: &str) -> Option<&BtNode> {
        let mut hit = None;
        self.root.visit(&mut |n| {
            if hit.is_none() && n.id == id {
                hit = Some(n);
            }
        });
        hit
    }

    /// Serializes back to the XML exchange format (descriptions first).
    pub fn to_xml(&self) -> String {
        let mut out = format!("<bt name=\"{}\">\n", escape(&self.name));
        for (label, text) in &self.node_descriptions {
            out.push_str(&format!("  <desc label=\"{}\">{}</desc>\n", escape(label), escape(text)));
        }
        write_node(&self.root, 1, &mut out);
        out.push_str("</bt>\n");
        out
    }
}

fn validate(node: &BtNode, seen: &mut HashSet<String>) -> Result<(), BtError> {
    if node.id.is_empty() {
        return Err(BtError::Schema("node with empty id".into()));
    }
    if !seen.insert(node.id.clone()) {
        return Err(BtError::Schema(format!("duplicate node id `{}`", node.id)));
    }
    match node.kind {
        NodeKind::Condition | NodeKind::Action => {
            if !node.children.is_empty() {
                return Err(BtError::Schema(format!("leaf `{}` must not have children", node.id)));
            }
            if node.label.is_empty() {
                return Err(BtError::Schema(format!("leaf `{}` has no label", node.id)));
            }
        }
        NodeKind::Sequence | NodeKind::Fallback | NodeKind::Parallel { .. } => {
            if node.children.is_empty() {
                return Err(BtError::Schema(format!(
                    "{} `{}` needs at least one child",
                    node.kind.tag(),
                    node.id
                )));
            }
            if let NodeKind::Parallel { threshold } = node.kind {
                if threshold == 0 || threshold > node.children.len() {
                    return Err(BtError::Schema(format!(
                        "parallel `{}` threshold {threshold} outside 1..={}",
                        node.id,
                        node.children.len()
                    )));
                }
            }
        }
    }
    node.children.iter().try_for_each(|c| validate(c, seen))
}

fn fill_descriptions(node: &mut BtNode, descriptions: &BTreeMap<String, String>) -> Result<(), BtError> {
    if node.is_leaf() {
        match descriptions.get(&node.label) {
            Some(d) => node.description = d.clone(),
            None => {
                return Err(BtError::Schema(format!("no description for leaf label `{}`", node.label)))
            }
        }
    }
    node.children.iter_mut().try_for_each(|c| fill_descriptions(c, descriptions))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn write_node(node: &BtNode, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let tag = node.kind.tag();
    let mut attrs = format!(" id=\"{}\"", escape(&node.id));
    if node.is_leaf() {
        attrs.push_str(&format!(" label=\"{}\"", escape(&node.label)));
    }
    if let NodeKind::Parallel { threshold } = node.kind {
        attrs.push_str(&format!(" threshold=\"{threshold}\""));
    }
    if node.children.is_empty() {
        out.push_str(&format!("{pad}<{tag}{attrs}/>\n"));
    } else {
        out.push_str(&format!("{pad}<{tag}{attrs}>\n"));
        for c in &node.children {
            write_node(c, depth + 1, out);
        }
        out.push_str(&format!("{pad}</{tag}>\n"));
    }
}

// ---------------------------------------------------------------------------
// XML parsing
// ---------------------------------------------------------------------------

/// Parses the `<bt>` XML exchange format.
pub fn parse_bt(xml_text: &str) -> Result<BehaviorTree, BtError> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| BtError::Parse(e.to_string()))?;
    let bt = doc.root_element();
    if bt.tag_name().name() != "bt" {
        return Err(BtError::Schema(format!("root element must be <bt>, found <{}>", bt.tag_name().name())));
    }
    let name = bt.attribute("name").unwrap_or("unnamed").to_string();

    let mut descriptions = BTreeMap::new();
    let mut roots = Vec::new();
    for child in bt.children().filter(|n| n.is_element()) {
        if child.tag_name().name() == "desc" {
            let label = child
                .attribute("label")
                .ok_or_else(|| BtError::Schema("<desc> without label attribute".into()))?;
            let text = child.text().unwrap_or("").trim().to_string();
            if descriptions.insert(label.to_string(), text).is_some() {
                return Err(BtError::Schema(format!("duplicate <desc> for `{label}`")));
            }
        } else {
            roots.push(child);
        }
    }
    let root = match roots.as_slice() {
        [] => return Err(BtError::Schema("<bt> contains no root node".into())),
        [one] => *one,
        _ => return Err(BtError::Schema("<bt> must contain exactly one root node".into())),
    };
    let mut counter = 0usize;
    let root = parse_node(root, &mut counter)?;
    BehaviorTree::new(name, root, descriptions)
}

fn parse_node(el: roxmltree::Node<'_, '_>, counter: &mut usize) -> Result<BtNode, BtError> {
    let tag = el.tag_name().name();
    let element_children: Vec<_> = el.children().filter(|n| n.is_element()).collect();
    if let Some(text) = el.children().filter(|n| n.is_text()).filter_map(|n| n.text()).find(|t| !t.trim().is_empty()) {
        return Err(BtError::Schema(format!("unexpected text `{}` inside <{tag}>", text.trim())));
    }
    let ordinal = *counter;
    *counter += 1;

    let kind = match tag {
        "sequence" => NodeKind::Sequence,
        "fallback" => NodeKind::Fallback,
        "parallel" => {
            let threshold = match el.attribute("threshold") {
                None => element_children.len(),
                Some(t) => t
                    .trim()
                    .parse()
                    .map_err(|_| BtError::Schema(format!("parallel threshold `{t}` is not a positive integer")))?,
            };
            NodeKind::Parallel { threshold }
        }
        "condition" => NodeKind::Condition,
        "action" => NodeKind::Action,
        other => return Err(BtError::Schema(format!("unknown node kind <{other}>"))),
    };

    let (id, label) = if kind.is_leaf() {
        let label = el
            .attribute("label")
            .ok_or_else(|| BtError::Schema(format!("<{tag}> without label attribute")))?
            .to_string();
        (el.attribute("id").map(str::to_string).unwrap_or_else(|| label.clone()), label)
    } else {
        let id = el.attribute("id").map(str::to_string).unwrap_or_else(|| format!("{tag}_{ordinal}"));
        (id.clone(), id)
    };
    if kind.is_leaf() && !element_children.is_empty() {
        return Err(BtError::Schema(format!("leaf `{id}` must not have children")));
    }
    let children = element_children
        .into_iter()
        .map(|c| parse_node(c, counter))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BtNode { id, kind, label, description: String::new(), children })
}

// ---------------------------------------------------------------------------
// Ticking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Frame<'t> {
    node: &'t BtNode,
    next: u32,
    successes: u32,
}

// Frames refer to nodes of one borrowed tree, so identity is the address.
impl PartialEq for Frame<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.node, other.node) && self.next == other.next && self.successes == other.successes
    }
}

impl Eq for Frame<'_> {}

impl Hash for Frame<'_> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::ptr::hash(self.node, state);
        self.next.hash(state);
        self.successes.hash(state);
    }
}

/// What a [`Ticker`] needs next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step<'t> {
    /// The leaf must be resolved; pass its outcome to [`Ticker::resume`].
    Leaf(&'t BtNode),
    /// The root finished with this status.
    Done(TickStatus),
}

/// A single root tick, suspended at each leaf.
///
/// Two tickers over the same tree compare equal when they are suspended at
/// the same point with the same counters, and then behave identically for
/// any further leaf outcomes.
#[derive(Debug)]
pub struct Ticker<'t> {
    root: &'t BtNode,
    stack: SmallVec<[Frame<'t>; 4]>,
    pending: Option<&'t BtNode>,
    started: bool,
}

impl Clone for Ticker<'_> {
    fn clone(&self) -> Self {
        Ticker { root: self.root, stack: SmallVec::from_slice(&self.stack), pending: self.pending, started: self.started }
    }
}

impl PartialEq for Ticker<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.root, other.root)
            && self.stack == other.stack
            && self.pending.map(|n| n as *const BtNode) == other.pending.map(|n| n as *const BtNode)
            && self.started == other.started
    }
}

impl Eq for Ticker<'_> {}

impl Hash for Ticker<'_> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::ptr::hash(self.root, state);
        self.stack.hash(state);
        self.pending.map(|n| n as *const BtNode).hash(state);
        self.started.hash(state);
    }
}

impl<'t> Ticker<'t> {
    pub fn new(tree: &'t BehaviorTree) -> Self {
        Self::from_root(&tree.root)
    }

    pub fn from_root(root: &'t BtNode) -> Self {
        Ticker { root, stack: SmallVec::new(), pending: None, started: false }
    }

    /// Begins the tick. Must be called exactly once, before any `resume`.
    pub fn start(&mut self) -> Step<'t> {
        assert!(!self.started, "Ticker::start called twice");
        self.started = true;
        if self.root.is_leaf() {
            self.pending = Some(self.root);
            return Step::Leaf(self.root);
        }
        self.stack.push(Frame { node: self.root, next: 0, successes: 0 });
        self.run(None)
    }

    /// Feeds the outcome of the leaf returned by the previous step.
    pub fn resume(&mut self, outcome: TickStatus) -> Step<'t> {
        self.pending.take().expect("Ticker::resume called with no pending leaf");
        self.run(Some(outcome))
    }

    fn run(&mut self, mut carry: Option<TickStatus>) -> Step<'t> {
        loop {
            let Some(top) = self.stack.last_mut() else {
                return Step::Done(carry.expect("finished tick carries a status"));
            };
            if let Some(status) = carry.take() {
                let short_circuit = match (top.node.kind, status) {
                    (NodeKind::Sequence, TickStatus::Failure) => true,
                    (NodeKind::Fallback, TickStatus::Success) => true,
                    (NodeKind::Parallel { .. }, TickStatus::Success) => {
                        top.successes += 1;
                        false
                    }
                    _ => false,
                };
                if short_circuit {
                    self.stack.pop();
                    carry = Some(status);
                    continue;
                }
            }
            let children = &top.node.children;
            if (top.next as usize) < children.len() {
                let child = &children[top.next as usize];
                top.next += 1;
                if child.is_leaf() {
                    self.pending = Some(child);
                    return Step::Leaf(child);
                }
                self.stack.push(Frame { node: child, next: 0, successes: 0 });
            } else {
                let status = match top.node.kind {
                    NodeKind::Sequence => TickStatus::Success,
                    NodeKind::Fallback => TickStatus::Failure,
                    NodeKind::Parallel { threshold } => {
                        if top.successes as usize >= threshold {
                            TickStatus::Success
                        } else {
                            TickStatus::Failure
                        }
                    }
                    NodeKind::Condition | NodeKind::Action => unreachable!("leaves are never framed"),
                };
                self.stack.pop();
                carry = Some(status);
            }
        }
    }
}

/// Resolves leaves during a tick.
pub trait LeafExecutor {
    type Error;
    fn execute(&mut self, node: &BtNode) -> Result<TickStatus, Self::Error>;
}

impl<F, E> LeafExecutor for F
where
    F: FnMut(&BtNode) -> Result<TickStatus, E>,
{
    type Error = E;
    fn execute(&mut self, node: &BtNode) -> Result<TickStatus, E> {
        self(node)
    }
}

/// One executed leaf in the action flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub node_id: String,
    pub label: String,
    pub kind: LeafKind,
    pub status: TickStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    pub status: TickStatus,
    pub action_flow: Vec<FlowEntry>,
}

#[derive(Debug, Error)]
#[error("leaf `{node_id}` failed to execute: {source}")]
pub struct ExecutorError<E: std::error::Error + 'static> {
    pub node_id: String,
    #[source]
    pub source: E,
    /// Leaves executed before the failing one.
    pub action_flow: Vec<FlowEntry>,
}

/// Runs one root tick, resolving every reached leaf with `executor`.
pub fn tick<X>(tree: &BehaviorTree, executor: &mut X) -> Result<TickOutcome, ExecutorError<X::Error>>
where
    X: LeafExecutor,
    X::Error: std::error::Error + 'static,
{
    let mut ticker = Ticker::new(tree);
    let mut flow = Vec::new();
    let mut step = ticker.start();
    loop {
        match step {
            Step::Leaf(node) => {
                let status = match executor.execute(node) {
                    Ok(s) => s,
                    Err(source) => {
                        return Err(ExecutorError { node_id: node.id.clone(), source, action_flow: flow })
                    }
                };
                flow.push(FlowEntry {
                    node_id: node.id.clone(),
                    label: node.label.clone(),
                    kind: node.leaf_kind().expect("ticker yields leaves only"),
                    status,
                });
                step = ticker.resume(status);
            }
            Step::Done(status) => return Ok(TickOutcome { status, action_flow: flow }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::convert::Infallible;

    const CLEAN_BOOK: &str = r#"
<bt name="clean_book">
  <desc label="hold_rag_in_gripper?">Is the rag held in the gripper?</desc>
  <desc label="pick_up_rag">Pick up the rag.</desc>
  <desc label="clean_book">Wipe the book with the rag.</desc>
  <sequence id="root">
    <fallback id="get_rag">
      <condition id="has_rag" label="hold_rag_in_gripper?"/>
      <action id="pick_up_rag" label="pick_up_rag"/>
    </fallback>
    <action label="clean_book"/>
  </sequence>
</bt>"#;

    fn run(xml: &str, outcomes: &[(&str, TickStatus)]) -> TickOutcome {
        let tree = parse_bt(xml).unwrap();
        let map: HashMap<_, _> = outcomes.iter().cloned().collect();
        tick(&tree, &mut |n: &BtNode| Ok::<_, Infallible>(map[n.id.as_str()])).unwrap()
    }

    #[test]
    fn parses_clean_book() {
        let tree = parse_bt(CLEAN_BOOK).unwrap();
        assert_eq!(tree.root.kind, NodeKind::Sequence);
        let labels: Vec<_> = tree.leaves().iter().map(|l| l.label.as_str()).collect();
        assert_eq!(labels, ["hold_rag_in_gripper?", "pick_up_rag", "clean_book"]);
        assert_eq!(tree.find("clean_book").unwrap().description, "Wipe the book with the rag.");
        assert_eq!(tree.find("has_rag").unwrap().kind, NodeKind::Condition);
    }

    #[test]
    fn xml_round_trip() {
        let tree = parse_bt(CLEAN_BOOK).unwrap();
        let again = parse_bt(&tree.to_xml()).unwrap();
        assert_eq!(tree, again);
    }

    #[test]
    fn schema_errors() {
        let cases = [
            "<bt/>",
            "<bt name='x'><sequence id='s'/></bt>",
            "<bt><desc label='a'>a</desc><action label='a'><action label='a'/></action></bt>",
            "<bt><desc label='a'>a</desc><sequence><action id='x' label='a'/><action id='x' label='a'/></sequence></bt>",
            "<bt><action label='undocumented'/></bt>",
            "<bt><desc label='a'>a</desc><decorator><action label='a'/></decorator></bt>",
            "<bt><desc label='a'>a</desc><parallel threshold='3'><action id='p' label='a'/><action id='q' label='a'/></parallel></bt>",
            "<bt><desc label='a'>a</desc><parallel threshold='0'><action label='a'/></parallel></bt>",
            "<bt><desc label='a'>a</desc><action label='a'/><action id='b' label='a'/></bt>",
            "<tree/>",
        ];
        for xml in cases {
            assert!(matches!(parse_bt(xml), Err(BtError::Schema(_))), "{xml}");
        }
        assert!(matches!(parse_bt("<bt><sequence>"), Err(BtError::Parse(_))));
    }

    #[test]
    fn sequence_all_success() {
        let xml = "<bt><desc label='a'>a</desc><sequence><action id='x' label='a'/><action id='y' label='a'/></sequence></bt>";
        let out = run(xml, &[("x", TickStatus::Success), ("y", TickStatus::Success)]);
        assert_eq!(out.status, TickStatus::Success);
        assert_eq!(out.action_flow.len(), 2);
    }

    #[test]
    fn fallback_first_alternative_fails() {
        let xml = "<bt><desc label='a'>a</desc><fallback><action id='x' label='a'/><action id='y' label='a'/></fallback></bt>";
        let out = run(xml, &[("x", TickStatus::Failure), ("y", TickStatus::Success)]);
        assert_eq!(out.status, TickStatus::Success);
        let ids: Vec<_> = out.action_flow.iter().map(|f| f.node_id.as_str()).collect();
        assert_eq!(ids, ["x", "y"]);
    }

    #[test]
    fn sequence_short_circuits() {
        let out = run(CLEAN_BOOK, &[("has_rag", TickStatus::Success), ("clean_book", TickStatus::Failure)]);
        assert_eq!(out.status, TickStatus::Failure);
        // pick_up_rag skipped because the fallback's first child succeeded
        let ids: Vec<_> = out.action_flow.iter().map(|f| f.node_id.as_str()).collect();
        assert_eq!(ids, ["has_rag", "clean_book"]);
    }

    #[test]
    fn parallel_threshold_and_runs_all() {
        let xml = "<bt><desc label='a'>a</desc><parallel threshold='2'><action id='x' label='a'/><action id='y' label='a'/><action id='z' label='a'/></parallel></bt>";
        let out = run(xml, &[("x", TickStatus::Failure), ("y", TickStatus::Success), ("z", TickStatus::Success)]);
        assert_eq!(out.status, TickStatus::Success);
        assert_eq!(out.action_flow.len(), 3);
        let out = run(xml, &[("x", TickStatus::Failure), ("y", TickStatus::Failure), ("z", TickStatus::Success)]);
        assert_eq!(out.status, TickStatus::Failure);
        assert_eq!(out.action_flow.len(), 3);
    }

    #[test]
    fn parallel_threshold_defaults_to_all_children() {
        let xml = "<bt><desc label='a'>a</desc><parallel><action id='x' label='a'/><action id='y' label='a'/></parallel></bt>";
        let tree = parse_bt(xml).unwrap();
        assert_eq!(tree.root.kind, NodeKind::Parallel { threshold: 2 });
    }

    #[test]
    fn single_leaf_root() {
        let xml = "<bt><desc label='a'>a</desc><condition label='a'/></bt>";
        let out = run(xml, &[("a", TickStatus::Failure)]);
        assert_eq!(out.status, TickStatus::Failure);
        assert_eq!(out.action_flow[0].kind, LeafKind::Condition);
    }

    #[test]
    fn executor_error_carries_node_id_and_partial_flow() {
        #[derive(Debug, Error)]
        #[error("boom")]
        struct Boom;
        let tree = parse_bt(CLEAN_BOOK).unwrap();
        let err = tick(&tree, &mut |n: &BtNode| {
            if n.id == "pick_up_rag" { Err(Boom) } else { Ok(TickStatus::Failure) }
        })
        .unwrap_err();
        assert_eq!(err.node_id, "pick_up_rag");
        assert_eq!(err.action_flow.len(), 1);
    }

    #[test]
    fn ticker_can_fork_at_a_leaf() {
        let tree = parse_bt(CLEAN_BOOK).unwrap();
        let mut t = Ticker::new(&tree);
        let Step::Leaf(first) = t.start() else { panic!() };
        assert_eq!(first.id, "has_rag");
        let mut fork = t.clone();
        assert!(matches!(t.resume(TickStatus::Success), Step::Leaf(n) if n.id == "clean_book"));
        assert!(matches!(fork.resume(TickStatus::Failure), Step::Leaf(n) if n.id == "pick_up_rag"));
    }
}
