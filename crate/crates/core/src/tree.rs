//! Binary projective parse trees over token positions.
//!
//! A tree over `n` leaves is stored as its merge sequence: node ids `0..n`
//! are the leaves, and merge `i` creates node `n + i` from two earlier nodes.
//! The last merge is the root. Storing merges keeps the composition order
//! alongside the structure.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Shift-reduce transition codes.
pub const SHIFT: usize = 0;
pub const REDUCE: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParseTree {
    n_leaves: usize,
    merges: Vec<(usize, usize)>,
}

impl ParseTree {
    /// Builds a tree from an explicit merge list and validates it.
    pub fn from_merges(n_leaves: usize, merges: Vec<(usize, usize)>) -> Result<Self> {
        let tree = ParseTree { n_leaves, merges };
        tree.validate()?;
        Ok(tree)
    }

    pub fn leaf(n_leaves: usize) -> Result<Self> {
        if n_leaves != 1 {
            return Err(Error::parse(format!("a single-leaf tree needs n = 1, got {n_leaves}")));
        }
        Ok(ParseTree {
            n_leaves,
            merges: Vec::new(),
        })
    }

    /// Replays easy-first actions: action `j` merges positions `j` and `j+1`
    /// of the current sequence.
    pub fn from_actions(n_leaves: usize, actions: &[usize]) -> Result<Self> {
        if n_leaves == 0 {
            return Err(Error::Empty("parse tree"));
        }
        if actions.len() + 1 != n_leaves {
            return Err(Error::parse(format!(
                "{} actions cannot reduce {n_leaves} leaves to one node",
                actions.len()
            )));
        }
        let mut seq: Vec<usize> = (0..n_leaves).collect();
        let mut merges = Vec::with_capacity(actions.len());
        for &j in actions {
            if j + 1 >= seq.len() {
                return Err(Error::parse(format!(
                    "action {j} out of range for length {}",
                    seq.len()
                )));
            }
            let id = n_leaves + merges.len();
            merges.push((seq[j], seq[j + 1]));
            seq[j] = id;
            seq.remove(j + 1);
        }
        Ok(ParseTree { n_leaves, merges })
    }

    /// Easy-first actions that rebuild this tree in its merge order.
    pub fn to_actions(&self) -> Vec<usize> {
        let n = self.n_leaves;
        let mut seq: Vec<usize> = (0..n).collect();
        let mut actions = Vec::with_capacity(self.merges.len());
        for (i, &(l, _)) in self.merges.iter().enumerate() {
            let j = seq.iter().position(|&x| x == l).expect("validated tree");
            actions.push(j);
            seq[j] = n + i;
            seq.remove(j + 1);
        }
        actions
    }

    /// Replays a shift-reduce derivation: [`SHIFT`] pushes the next leaf,
    /// [`REDUCE`] merges the top two stack items.
    pub fn from_transitions(n_leaves: usize, actions: &[usize]) -> Result<Self> {
        if n_leaves == 0 {
            return Err(Error::Empty("parse tree"));
        }
        let mut stack = Vec::new();
        let mut next = 0;
        let mut merges = Vec::with_capacity(n_leaves - 1);
        for &a in actions {
            match a {
                SHIFT if next < n_leaves => {
                    stack.push(next);
                    next += 1;
                }
                REDUCE if stack.len() >= 2 => {
                    let r = stack.pop().expect("checked");
                    let l = stack.pop().expect("checked");
                    merges.push((l, r));
                    stack.push(n_leaves + merges.len() - 1);
                }
                _ => {
                    return Err(Error::parse(format!(
                        "invalid transition {a} with {} on the stack",
                        stack.len()
                    )))
                }
            }
        }
        if next != n_leaves || stack.len() != 1 {
            return Err(Error::parse("incomplete shift-reduce derivation"));
        }
        ParseTree::from_merges(n_leaves, merges)
    }

    pub fn left_branching(n: usize) -> Result<Self> {
        Self::from_actions(n, &vec![0; n.saturating_sub(1)])
    }

    pub fn right_branching(n: usize) -> Result<Self> {
        let actions: Vec<usize> = (0..n.saturating_sub(1)).rev().collect();
        Self::from_actions(n, &actions)
    }

    /// Pairs adjacent nodes level by level; an odd trailing node is promoted unchanged.
    pub fn balanced(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("balanced tree"));
        }
        let mut level: Vec<usize> = (0..n).collect();
        let mut merges = Vec::with_capacity(n - 1);
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            for pair in level.chunks(2) {
                if let [a, b] = *pair {
                    merges.push((a, b));
                    next.push(n + merges.len() - 1);
                } else {
                    next.push(pair[0]);
                }
            }
            level = next;
        }
        Ok(ParseTree { n_leaves: n, merges })
    }

    /// Repeatedly merges a uniformly random adjacent pair.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("random tree"));
        }
        let actions: Vec<usize> = (0..n - 1).map(|step| rng.gen_range(0..n - 1 - step)).collect();
        Self::from_actions(n, &actions)
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn n_internal(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        if self.merges.is_empty() {
            0
        } else {
            self.n_leaves + self.merges.len() - 1
        }
    }

    /// Inclusive leaf span of every node, indexed by node id.
    pub fn node_spans(&self) -> Vec<(usize, usize)> {
        let mut spans: Vec<(usize, usize)> = (0..self.n_leaves).map(|i| (i, i)).collect();
        for &(l, r) in &self.merges {
            spans.push((spans[l].0, spans[r].1));
        }
        spans
    }

    /// Spans of internal nodes in merge order.
    pub fn internal_spans(&self) -> Vec<(usize, usize)> {
        self.node_spans().split_off(self.n_leaves)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_leaves;
        if n == 0 {
            return Err(Error::Empty("parse tree"));
        }
        if self.merges.len() + 1 != n {
            return Err(Error::parse(format!(
                "{n} leaves need {} merges, got {}",
                n - 1,
                self.merges.len()
            )));
        }
        let mut used = vec![false; n + self.merges.len()];
        let mut spans: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for (i, &(l, r)) in self.merges.iter().enumerate() {
            let id = n + i;
            for c in [l, r] {
                if c >= id {
                    return Err(Error::parse(format!("merge {i} uses node {c} before it exists")));
                }
                if std::mem::replace(&mut used[c], true) {
                    return Err(Error::parse(format!("node {c} has two parents")));
                }
            }
            if spans[l].1 + 1 != spans[r].0 {
                return Err(Error::parse(format!(
                    "non-projective merge of spans {:?} and {:?}",
                    spans[l], spans[r]
                )));
            }
            spans.push((spans[l].0, spans[r].1));
        }
        Ok(())
    }

    pub fn is_projective(&self) -> bool {
        self.validate().is_ok()
    }

    /// Renders `(left right)` with the given leaf labels.
    pub fn to_bracketed<S: AsRef<str>>(&self, labels: &[S]) -> Result<String> {
        if labels.len() != self.n_leaves {
            return Err(Error::shape(
                "to_bracketed",
                format!("{} labels for {} leaves", labels.len(), self.n_leaves),
            ));
        }
        let mut out = String::new();
        self.render(self.root(), &mut |i, s| s.push_str(labels[i].as_ref()), &mut out);
        Ok(out)
    }

    fn render(&self, node: usize, leaf: &mut dyn FnMut(usize, &mut String), out: &mut String) {
        if node < self.n_leaves {
            leaf(node, out);
        } else {
            let (l, r) = self.merges[node - self.n_leaves];
            out.push('(');
            self.render(l, leaf, out);
            out.push(' ');
            self.render(r, leaf, out);
            out.push(')');
        }
    }

    /// Parses a bracketed string such as `((a b) c)`. Returns the tree and the
    /// leaf labels in order.
    pub fn parse_bracketed(s: &str) -> Result<(ParseTree, Vec<String>)> {
        let toks = lex_brackets(s);
        let mut pos = 0;
        let mut labels = Vec::new();
        let mut merges = Vec::new();
        // first pass: collect labels to know n before numbering internal nodes
        for t in &toks {
            if let Tok::Atom(a) = t {
                labels.push(a.to_string());
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::parse("empty tree string"));
        }
        let mut next_leaf = 0;
        let root = parse_node(&toks, &mut pos, &mut next_leaf, n, &mut merges)?;
        if pos != toks.len() {
            return Err(Error::parse(format!("trailing input in {s:?}")));
        }
        debug_assert!(root == n - 1 + merges.len() || merges.is_empty());
        Ok((ParseTree::from_merges(n, merges)?, labels))
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        self.render(self.root(), &mut |i, s| s.push_str(&i.to_string()), &mut out);
        f.write_str(&out)
    }
}

#[derive(Debug)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex_brackets(s: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(st) = start.take() {
                toks.push(Tok::Atom(&s[st..i]));
            }
            match ch {
                '(' => toks.push(Tok::Open),
                ')' => toks.push(Tok::Close),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        toks.push(Tok::Atom(&s[st..]));
    }
    toks
}

fn parse_node(
    toks: &[Tok<'_>],
    pos: &mut usize,
    next_leaf: &mut usize,
    n: usize,
    merges: &mut Vec<(usize, usize)>,
) -> Result<usize> {
    match toks.get(*pos) {
        Some(Tok::Atom(_)) => {
            *pos += 1;
            *next_leaf += 1;
            Ok(*next_leaf - 1)
        }
        Some(Tok::Open) => {
            *pos += 1;
            let l = parse_node(toks, pos, next_leaf, n, merges)?;
            let r = parse_node(toks, pos, next_leaf, n, merges)?;
            match toks.get(*pos) {
                Some(Tok::Close) => *pos += 1,
                _ => return Err(Error::parse("expected ')' after two children")),
            }
            merges.push((l, r));
            Ok(n + merges.len() - 1)
        }
        Some(Tok::Close) => Err(Error::parse("unexpected ')'")),
        None => Err(Error::parse("unexpected end of tree string")),
    }
}
