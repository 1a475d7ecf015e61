//! Exhaustive behavior-tree oracle.
//!
//! Enumerates every tree of depth <= 3 (root, one control layer, leaves)
//! built from Sequence, Fallback and Parallel(k) with at most four children
//! per node, and compares tick status over every assignment of leaf
//! outcomes. Both sides are computed as truth tables over the `L` leaves of
//! a tree: row `r` holds the root status when leaf `l` succeeds iff bit
//! `L - 1 - l` of `r` is set.
//!
//! The reference builds its table by boolean algebra over its own tree type
//! (AND for Sequence, OR for Fallback, at-least-k for Parallel). The engine
//! table is obtained by driving the real resumable ticker and expanding on
//! each leaf it asks for. The harness checks that the ticker asks for leaves
//! in strictly increasing order, so the table of a ticker suspended at leaf
//! `i` only depends on leaves `i..L` and is kept at that size. Suspended
//! tickers that compare equal share their table, since a ticker's future
//! depends only on its state.

use std::rc::Rc;

use besim::bt_engine::{BtNode, NodeKind, Step, TickStatus, Ticker};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ctl {
    Seq,
    Fb,
    Par(usize),
}

#[derive(Clone, Debug)]
pub enum RefTree {
    Leaf,
    Node(Ctl, Vec<RefTree>),
}

pub fn leaf_count(t: &RefTree) -> usize {
    match t {
        RefTree::Leaf => 1,
        RefTree::Node(_, c) => c.iter().map(leaf_count).sum(),
    }
}

/// Words needed for `2^m` rows, 64 rows per word.
fn words(m: u32) -> usize {
    (1usize << m.saturating_sub(6)).max(1)
}

fn row_mask(m: u32) -> u64 {
    if m >= 6 {
        u64::MAX
    } else {
        (1u64 << (1u32 << m)) - 1
    }
}

/// Repeats the low `2^from` rows of `w` up to `2^to` rows (`to <= 6`).
fn repeat_rows(mut w: u64, from: u32, to: u32) -> u64 {
    for m in from..to {
        w |= w << (1u32 << m);
    }
    w
}

// ---------------------------------------------------------------------------
// Reference
// ---------------------------------------------------------------------------

/// Full truth table over all leaves of a tree.
pub type RefTable = Vec<u64>;

/// Truth table of "leaf `l` succeeds" over `leaves` leaves.
fn var(l: usize, leaves: usize) -> RefTable {
    const LOW: [u64; 6] = [
        0xAAAA_AAAA_AAAA_AAAA,
        0xCCCC_CCCC_CCCC_CCCC,
        0xF0F0_F0F0_F0F0_F0F0,
        0xFF00_FF00_FF00_FF00,
        0xFFFF_0000_FFFF_0000,
        0xFFFF_FFFF_0000_0000,
    ];
    let m = leaves as u32;
    let bit = leaves - 1 - l;
    let mask = row_mask(m);
    (0..words(m))
        .map(|i| if bit < 6 { LOW[bit] & mask } else if (i >> (bit - 6)) & 1 == 1 { u64::MAX } else { 0 })
        .collect()
}

/// Reference status table of a node whose first leaf is `first`.
pub fn reference(t: &RefTree, first: usize, leaves: usize) -> RefTable {
    match t {
        RefTree::Leaf => var(first, leaves),
        RefTree::Node(ctl, kids) => combine(*ctl, &reference_children(kids, first, leaves), leaves),
    }
}

/// Reference tables of each child, the first child starting at leaf `first`.
pub fn reference_children(kids: &[RefTree], first: usize, leaves: usize) -> Vec<RefTable> {
    let mut offset = first;
    kids.iter()
        .map(|k| {
            let t = reference(k, offset, leaves);
            offset += leaf_count(k);
            t
        })
        .collect()
}

/// Status table of a control node from the tables of its children.
pub fn combine(ctl: Ctl, tables: &[RefTable], leaves: usize) -> RefTable {
    let mask = row_mask(leaves as u32);
    (0..words(leaves as u32))
        .map(|i| {
            let w = match ctl {
                Ctl::Seq => tables.iter().fold(u64::MAX, |acc, t| acc & t[i]),
                Ctl::Fb => tables.iter().fold(0, |acc, t| acc | t[i]),
                Ctl::Par(k) => {
                    // bit-sliced success counter (at most four children)
                    let (mut c1, mut c2, mut c4) = (0u64, 0u64, 0u64);
                    for t in tables {
                        let x = t[i];
                        let carry = c1 & x;
                        c1 ^= x;
                        c4 |= c2 & carry;
                        c2 ^= carry;
                    }
                    match k {
                        1 => c1 | c2 | c4,
                        2 => c2 | c4,
                        3 => (c2 & c1) | c4,
                        4 => c4,
                        _ => unreachable!("threshold {k}"),
                    }
                }
            };
            w & mask
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

fn leaf_node(l: usize) -> BtNode {
    let label = ((b'a' + l as u8) as char).to_string();
    BtNode { id: label.clone(), kind: NodeKind::Action, label, description: String::new(), children: vec![] }
}

fn control_kind(ctl: Ctl) -> NodeKind {
    match ctl {
        Ctl::Seq => NodeKind::Sequence,
        Ctl::Fb => NodeKind::Fallback,
        Ctl::Par(k) => NodeKind::Parallel { threshold: k },
    }
}

/// Engine nodes for `kids`, with leaves labelled `a`, `b`, ... left to right.
pub fn engine_children(kids: &[RefTree]) -> Vec<BtNode> {
    let mut next_leaf = 0;
    let mut next_id = 0;
    kids.iter().map(|k| engine_node(k, &mut next_leaf, &mut next_id)).collect()
}

fn engine_node(t: &RefTree, next_leaf: &mut usize, next_id: &mut usize) -> BtNode {
    match t {
        RefTree::Leaf => {
            *next_leaf += 1;
            leaf_node(*next_leaf - 1)
        }
        RefTree::Node(ctl, kids) => {
            *next_id += 1;
            let id = format!("n{next_id}");
            let children = kids.iter().map(|k| engine_node(k, next_leaf, next_id)).collect();
            BtNode { id: id.clone(), kind: control_kind(*ctl), label: id, description: String::new(), children }
        }
    }
}

/// Table over the last `m` leaves; small tables live in one word.
#[derive(Clone, Debug)]
pub struct Table {
    m: u32,
    bits: Bits,
}

#[derive(Clone, Debug)]
enum Bits {
    Small(u64),
    Big(Rc<[u64]>),
}

impl Table {
    fn konst(value: bool) -> Table {
        Table { m: 0, bits: Bits::Small(value as u64) }
    }

    /// The table tiled to `m` leaves (`m <= 6`).
    fn small(&self, m: u32) -> u64 {
        match &self.bits {
            Bits::Small(w) => repeat_rows(*w, self.m, m),
            Bits::Big(_) => unreachable!("a table never shrinks"),
        }
    }

    /// Word `i` of the table tiled to any size of at least 64 rows.
    fn word(&self, i: usize) -> u64 {
        match &self.bits {
            Bits::Small(w) => repeat_rows(*w, self.m, 6),
            Bits::Big(d) => d[i % d.len()],
        }
    }

    /// Table over `m + 1` leaves whose first leaf selects `high` on success.
    fn branch(low: &Table, high: &Table, m: u32) -> Table {
        if m < 6 {
            let w = low.small(m) | (high.small(m) << (1u32 << m));
            return Table { m: m + 1, bits: Bits::Small(w) };
        }
        let n = words(m);
        let w = (0..2 * n).map(|i| if i < n { low.word(i) } else { high.word(i - n) }).collect();
        Table { m: m + 1, bits: Bits::Big(w) }
    }

    /// Rows disagreeing with the reference table over all `m` leaves.
    fn disagreements(&self, expected: &RefTable, m: u32) -> u64 {
        if m <= 6 {
            return ((self.small(m) ^ expected[0]) & row_mask(m)).count_ones() as u64;
        }
        expected.iter().enumerate().map(|(i, e)| (self.word(i) ^ e).count_ones() as u64).sum()
    }
}

/// Expanded states, bucketed by the leaf they are suspended at.
type Memo<'t> = Vec<Vec<(Ticker<'t>, Table)>>;

#[derive(Debug)]
pub struct OrderViolation;

/// Engine status table, by expanding on every leaf the ticker asks for.
pub fn engine_table(root: &BtNode, leaves: usize) -> Result<Table, OrderViolation> {
    let mut memo: Memo = vec![Vec::new(); leaves];
    let mut t = Ticker::from_root(root);
    let step = t.start();
    Ok(expand(t, step, leaves, &mut memo)?.1)
}

/// Returns the first leaf the state depends on and its table over leaves `first..L`.
fn expand<'t>(
    mut t: Ticker<'t>,
    step: Step<'t>,
    leaves: usize,
    memo: &mut Memo<'t>,
) -> Result<(usize, Table), OrderViolation> {
    let leaf = match step {
        Step::Done(status) => return Ok((leaves, Table::konst(status == TickStatus::Success))),
        Step::Leaf(node) => (node.label.as_bytes()[0] - b'a') as usize,
    };
    if let Some((_, hit)) = memo[leaf].iter().find(|(k, _)| *k == t) {
        return Ok((leaf, hit.clone()));
    }
    let key = t.clone();
    let mut fork = t.clone();
    let s = t.resume(TickStatus::Success);
    let (next_s, on_success) = expand(t, s, leaves, memo)?;
    let s = fork.resume(TickStatus::Failure);
    let (next_f, on_failure) = expand(fork, s, leaves, memo)?;
    if next_s <= leaf || next_f <= leaf {
        return Err(OrderViolation);
    }
    let table = Table::branch(&on_failure, &on_success, (leaves - leaf - 1) as u32);
    memo[leaf].push((key, table.clone()));
    Ok((leaf, table))
}

// ---------------------------------------------------------------------------
// Enumeration
// ---------------------------------------------------------------------------

fn controls(n: usize) -> Vec<Ctl> {
    let mut out = vec![Ctl::Seq, Ctl::Fb];
    out.extend((1..=n).map(Ctl::Par));
    out
}

/// Calls `f(Some(children))` for every ordered list of root children, and
/// `f(None)` for the single-leaf tree. Each list stands for every control
/// kind at the root, giving all trees of depth <= 3 with <= 4 children per
/// node.
pub fn for_each_tree(mut f: impl FnMut(Option<&[RefTree]>)) {
    f(None);
    let mut options = vec![RefTree::Leaf];
    for n in 1..=4 {
        for ctl in controls(n) {
            options.push(RefTree::Node(ctl, vec![RefTree::Leaf; n]));
        }
    }
    for n in 1..=4 {
        let mut idx = vec![0usize; n];
        loop {
            let kids: Vec<RefTree> = idx.iter().map(|&i| options[i].clone()).collect();
            f(Some(&kids));
            // odometer increment; stop after wrapping back to all zeros
            let mut pos = n;
            while pos > 0 {
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < options.len() {
                    break;
                }
                idx[pos] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub trees: u64,
    pub assignments: u64,
    pub disagreements: u64,
    pub order_violations: u64,
}

/// Runs the full comparison over every tree and every leaf assignment.
pub fn run_oracle() -> OracleReport {
    let mut report = OracleReport::default();
    for_each_tree(|kids| {
        let Some(kids) = kids else {
            compare(&mut report, &leaf_node(0), &var(0, 1), 1);
            return;
        };
        let leaves = kids.iter().map(leaf_count).sum::<usize>();
        let mut node = BtNode {
            id: "root".into(),
            kind: NodeKind::Sequence,
            label: "root".into(),
            description: String::new(),
            children: engine_children(kids),
        };
        let tables = reference_children(kids, 0, leaves);
        for ctl in controls(kids.len()) {
            node.kind = control_kind(ctl);
            compare(&mut report, &node, &combine(ctl, &tables, leaves), leaves);
        }
    });
    report
}

fn compare(report: &mut OracleReport, root: &BtNode, expected: &RefTable, leaves: usize) {
    report.trees += 1;
    report.assignments += 1u64 << leaves;
    match engine_table(root, leaves) {
        Ok(got) => report.disagreements += got.disagreements(expected, leaves as u32),
        Err(OrderViolation) => report.order_violations += 1,
    }
}
