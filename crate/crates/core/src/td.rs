//! Graphs and rooted tree decompositions.
//!
//! Includes a validator producing witnessed violation reports, construction
//! of path decompositions from leveled circuits, logarithmic-depth
//! rebalancing, and an exact treewidth oracle for graphs with at most 13
//! vertices.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use num_bigint::BigUint;
use thiserror::Error;

use crate::circuit::Circuit;

/// Simple graph with 1-based vertices. Directed graphs are used as
/// reachability inputs; decompositions always refer to the underlying
/// undirected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: u32,
    edges: Vec<(u32, u32)>,
    directed: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) has an endpoint outside 1..={2}")]
    BadEndpoint(u32, u32, u32),
    #[error("self-loop at vertex {0}")]
    SelfLoop(u32),
}

impl Graph {
    pub fn undirected(n: u32, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Graph, GraphError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (u, v) in edges {
            if u == 0 || v == 0 || u > n || v > n {
                return Err(GraphError::BadEndpoint(u, v, n));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            let key = (u.min(v), u.max(v));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out.sort_unstable();
        Ok(Graph { n, edges: out, directed: false })
    }

    pub fn directed(n: u32, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Graph, GraphError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (u, v) in edges {
            if u == 0 || v == 0 || u > n || v > n {
                return Err(GraphError::BadEndpoint(u, v, n));
            }
            if u != v && seen.insert((u, v)) {
                out.push((u, v));
            }
        }
        out.sort_unstable();
        Ok(Graph { n, edges: out, directed: true })
    }

    /// Wire graph of a circuit: one vertex per gate, one edge per wire.
    pub fn of_circuit(c: &Circuit) -> Graph {
        Graph::undirected(c.size_total() as u32, c.wire_edges()).expect("circuit wires are valid edges")
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn underlying_undirected(&self) -> Graph {
        Graph::undirected(self.n, self.edges.iter().copied()).expect("endpoints already checked")
    }

    /// Adjacency sets, undirected view; index = vertex − 1.
    pub fn neighbor_sets(&self) -> Vec<BTreeSet<u32>> {
        let mut adj = vec![BTreeSet::new(); self.n as usize];
        for &(u, v) in &self.edges {
            adj[u as usize - 1].insert(v);
            adj[v as usize - 1].insert(u);
        }
        adj
    }

    /// Out-neighbour sets for directed graphs (equals neighbor_sets otherwise).
    pub fn out_neighbor_sets(&self) -> Vec<BTreeSet<u32>> {
        if !self.directed {
            return self.neighbor_sets();
        }
        let mut adj = vec![BTreeSet::new(); self.n as usize];
        for &(u, v) in &self.edges {
            adj[u as usize - 1].insert(v);
        }
        adj
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrParseError {
    #[error("line {0}: {1}")]
    Syntax(usize, String),
    #[error("missing `p tw` header")]
    MissingHeader,
    #[error("header announces {0} edges, found {1}")]
    EdgeCount(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Parse the `.gr` graph format: `p tw <n> <m>` header, `<u> <v>` edge lines,
/// `c` comments.
pub fn parse_gr(text: &str, directed: bool) -> Result<Graph, GrParseError> {
    let mut header: Option<(u32, usize)> = None;
    let mut edges = Vec::new();
    let mut raw_count = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('c') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields[0] == "p" {
            if header.is_some() {
                return Err(GrParseError::Syntax(line, "second header".into()));
            }
            if fields.len() != 4 || fields[1] != "tw" {
                return Err(GrParseError::Syntax(line, "expected: p tw <n> <m>".into()));
            }
            let n = fields[2]
                .parse()
                .map_err(|_| GrParseError::Syntax(line, "bad vertex count".into()))?;
            let m = fields[3]
                .parse()
                .map_err(|_| GrParseError::Syntax(line, "bad edge count".into()))?;
            header = Some((n, m));
            continue;
        }
        if header.is_none() {
            return Err(GrParseError::MissingHeader);
        }
        let [u, v] = fields[..] else {
            return Err(GrParseError::Syntax(line, "expected: <u> <v>".into()));
        };
        let u: u32 = u.parse().map_err(|_| GrParseError::Syntax(line, "bad endpoint".into()))?;
        let v: u32 = v.parse().map_err(|_| GrParseError::Syntax(line, "bad endpoint".into()))?;
        edges.push((u, v));
        raw_count += 1;
    }
    let (n, m) = header.ok_or(GrParseError::MissingHeader)?;
    if m != raw_count {
        return Err(GrParseError::EdgeCount(m, raw_count));
    }
    let g = if directed { Graph::directed(n, edges) } else { Graph::undirected(n, edges) }?;
    Ok(g)
}

pub fn serialize_gr(g: &Graph) -> String {
    let mut out = format!("p tw {} {}\n", g.n, g.edges.len());
    for (u, v) in &g.edges {
        out.push_str(&format!("{u} {v}\n"));
    }
    out
}

/// Rooted tree decomposition. Node ids are dense 0-based indices; bags hold
/// 1-based vertex (gate) numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeDecomposition {
    bags: Vec<BTreeSet<u32>>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TdError {
    #[error("decomposition has no nodes")]
    Empty,
    #[error("parent index {0} out of range")]
    BadParent(usize),
    #[error("expected exactly one root, found {0}")]
    RootCount(usize),
    #[error("node {0} is not reachable from the root")]
    NotATree(usize),
    #[error("node {0} referenced but absent")]
    MissingNode(usize),
}

/// One violation of the decomposition properties, with a witness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TdViolation {
    /// Vertex appears in no bag.
    VertexNotCovered { vertex: u32 },
    /// Edge of the graph contained in no bag.
    EdgeNotCovered { u: u32, v: u32 },
    /// The tree nodes whose bags contain the vertex are not connected;
    /// the witnesses are nodes in two different pieces.
    OccurrencesDisconnected { vertex: u32, node_a: usize, node_b: usize },
}

impl std::fmt::Display for TdViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TdViolation::VertexNotCovered { vertex } => write!(f, "vertex {vertex} not in any bag"),
            TdViolation::EdgeNotCovered { u, v } => write!(f, "edge ({u}, {v}) not in any bag"),
            TdViolation::OccurrencesDisconnected { vertex, node_a, node_b } => write!(
                f,
                "bags containing vertex {vertex} are disconnected (nodes {node_a} and {node_b})"
            ),
        }
    }
}

impl TreeDecomposition {
    pub fn new(bags: Vec<BTreeSet<u32>>, parent: Vec<Option<usize>>) -> Result<TreeDecomposition, TdError> {
        if bags.is_empty() {
            return Err(TdError::Empty);
        }
        if parent.len() != bags.len() {
            return Err(TdError::MissingNode(parent.len()));
        }
        let mut root = None;
        let mut children = vec![Vec::new(); bags.len()];
        for (i, p) in parent.iter().enumerate() {
            match p {
                None => match root {
                    None => root = Some(i),
                    Some(_) => return Err(TdError::RootCount(2)),
                },
                Some(p) => {
                    if *p >= bags.len() {
                        return Err(TdError::BadParent(*p));
                    }
                    children[*p].push(i);
                }
            }
        }
        let root = root.ok_or(TdError::RootCount(0))?;
        let td = TreeDecomposition { bags, parent, children, root };
        // Reachability from the root rules out parent cycles.
        let mut seen = vec![false; td.bags.len()];
        let mut stack = vec![td.root];
        while let Some(t) = stack.pop() {
            seen[t] = true;
            stack.extend(td.children[t].iter().copied());
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TdError::NotATree(i));
        }
        Ok(td)
    }

    pub fn single_bag(bag: BTreeSet<u32>) -> TreeDecomposition {
        TreeDecomposition::new(vec![bag], vec![None]).expect("one node is a tree")
    }

    pub fn num_nodes(&self) -> usize {
        self.bags.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn bag(&self, t: usize) -> &BTreeSet<u32> {
        &self.bags[t]
    }

    pub fn bags(&self) -> &[BTreeSet<u32>] {
        &self.bags
    }

    pub fn parent(&self, t: usize) -> Option<usize> {
        self.parent[t]
    }

    pub fn children(&self, t: usize) -> &[usize] {
        &self.children[t]
    }

    /// Max bag size minus one.
    pub fn width(&self) -> usize {
        self.bags.iter().map(BTreeSet::len).max().unwrap_or(0).saturating_sub(1)
    }

    /// Longest root-to-leaf path, counted in edges.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.bags.len()];
        let mut best = 0;
        for t in self.topo_order() {
            if let Some(p) = self.parent[t] {
                depth[t] = depth[p] + 1;
                best = best.max(depth[t]);
            }
        }
        best
    }

    /// Nodes in root-first order (parents before children).
    pub fn topo_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.bags.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(t) = queue.pop_front() {
            order.push(t);
            queue.extend(self.children[t].iter().copied());
        }
        order
    }

    /// Nodes of the subtree rooted at `t`.
    pub fn nodes_below(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![t];
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend(self.children[u].iter().copied());
        }
        out
    }

    /// Union of bags in the subtree rooted at `t`.
    pub fn bag_below(&self, t: usize) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for u in self.nodes_below(t) {
            out.extend(self.bags[u].iter().copied());
        }
        out
    }

    pub fn is_binary(&self) -> bool {
        self.children.iter().all(|c| c.len() <= 2)
    }

    /// Check the three decomposition properties against `g`, reporting every
    /// violation with a witness. An empty report means the decomposition is
    /// valid.
    pub fn validate(&self, g: &Graph) -> Vec<TdViolation> {
        let mut report = Vec::new();
        let mut occurrences: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (t, bag) in self.bags.iter().enumerate() {
            for &v in bag {
                occurrences.entry(v).or_default().push(t);
            }
        }
        for v in 1..=g.n() {
            if !occurrences.contains_key(&v) {
                report.push(TdViolation::VertexNotCovered { vertex: v });
            }
        }
        for &(u, v) in g.underlying_undirected().edges() {
            if !self.bags.iter().any(|b| b.contains(&u) && b.contains(&v)) {
                report.push(TdViolation::EdgeNotCovered { u, v });
            }
        }
        for (&v, nodes) in &occurrences {
            let inside: BTreeSet<usize> = nodes.iter().copied().collect();
            let mut seen = BTreeSet::from([nodes[0]]);
            let mut stack = vec![nodes[0]];
            while let Some(t) = stack.pop() {
                let mut adj: Vec<usize> = self.children[t].clone();
                adj.extend(self.parent[t]);
                for u in adj {
                    if inside.contains(&u) && seen.insert(u) {
                        stack.push(u);
                    }
                }
            }
            if let Some(&outside) = nodes.iter().find(|t| !seen.contains(t)) {
                report.push(TdViolation::OccurrencesDisconnected {
                    vertex: v,
                    node_a: nodes[0],
                    node_b: outside,
                });
            }
        }
        report
    }

    /// Re-root at `new_root` by flipping parent pointers along the path.
    pub fn re_root(&self, new_root: usize) -> TreeDecomposition {
        let mut parent = self.parent.clone();
        let mut path = vec![new_root];
        while let Some(p) = parent[*path.last().unwrap()] {
            path.push(p);
        }
        parent[new_root] = None;
        for w in path.windows(2) {
            parent[w[1]] = Some(w[0]);
        }
        TreeDecomposition::new(self.bags.clone(), parent).expect("re-rooting preserves the tree")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TdParseError {
    #[error("line {0}: {1}")]
    Syntax(usize, String),
    #[error("missing `s td` header")]
    MissingHeader,
    #[error("bag id {0} out of range 1..={1}")]
    BadBagId(usize, usize),
    #[error("bag {0} defined twice")]
    DuplicateBag(usize),
    #[error("tree edges do not form a tree")]
    NotATree,
    #[error(transparent)]
    Structure(#[from] TdError),
}

/// Parse the `.td` decomposition format. The root is the bag with id 1.
pub fn parse_td(text: &str) -> Result<TreeDecomposition, TdParseError> {
    let mut header: Option<(usize, usize, u32)> = None;
    let mut bags: Vec<Option<BTreeSet<u32>>> = Vec::new();
    let mut tree_edges: Vec<(usize, usize)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('c') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match fields[0] {
            "s" => {
                if header.is_some() {
                    return Err(TdParseError::Syntax(line, "second header".into()));
                }
                if fields.len() != 5 || fields[1] != "td" {
                    return Err(TdParseError::Syntax(line, "expected: s td <#bags> <max-bag-size> <n>".into()));
                }
                let nb: usize = fields[2]
                    .parse()
                    .map_err(|_| TdParseError::Syntax(line, "bad bag count".into()))?;
                let mb: usize = fields[3]
                    .parse()
                    .map_err(|_| TdParseError::Syntax(line, "bad bag size".into()))?;
                let n: u32 = fields[4]
                    .parse()
                    .map_err(|_| TdParseError::Syntax(line, "bad vertex count".into()))?;
                header = Some((nb, mb, n));
                bags = vec![None; nb];
            }
            "b" => {
                let (nb, _, _) = header.ok_or(TdParseError::MissingHeader)?;
                if fields.len() < 2 {
                    return Err(TdParseError::Syntax(line, "expected: b <id> <v...>".into()));
                }
                let id: usize = fields[1]
                    .parse()
                    .map_err(|_| TdParseError::Syntax(line, "bad bag id".into()))?;
                if id == 0 || id > nb {
                    return Err(TdParseError::BadBagId(id, nb));
                }
                if bags[id - 1].is_some() {
                    return Err(TdParseError::DuplicateBag(id));
                }
                let mut bag = BTreeSet::new();
                for f in &fields[2..] {
                    let v: u32 =
                        f.parse().map_err(|_| TdParseError::Syntax(line, "bad vertex".into()))?;
                    bag.insert(v);
                }
                bags[id - 1] = Some(bag);
            }
            _ => {
                let (nb, _, _) = header.ok_or(TdParseError::MissingHeader)?;
                let [a, b] = fields[..] else {
                    return Err(TdParseError::Syntax(line, "expected: <id> <id>".into()));
                };
                let a: usize = a.parse().map_err(|_| TdParseError::Syntax(line, "bad id".into()))?;
                let b: usize = b.parse().map_err(|_| TdParseError::Syntax(line, "bad id".into()))?;
                if a == 0 || a > nb {
                    return Err(TdParseError::BadBagId(a, nb));
                }
                if b == 0 || b > nb {
                    return Err(TdParseError::BadBagId(b, nb));
                }
                tree_edges.push((a - 1, b - 1));
            }
        }
    }
    let (nb, _, _) = header.ok_or(TdParseError::MissingHeader)?;
    let bags: Vec<BTreeSet<u32>> = bags.into_iter().map(|b| b.unwrap_or_default()).collect();
    if nb >= 1 && tree_edges.len() != nb - 1 {
        return Err(TdParseError::NotATree);
    }
    // Root at bag 1 and orient edges by BFS.
    let mut adj = vec![Vec::new(); nb];
    for &(a, b) in &tree_edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent: Vec<Option<usize>> = vec![None; nb];
    let mut seen = vec![false; nb];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(t) = queue.pop_front() {
        for &u in &adj[t] {
            if !seen[u] {
                seen[u] = true;
                parent[u] = Some(t);
                queue.push_back(u);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(TdParseError::NotATree);
    }
    Ok(TreeDecomposition::new(bags, parent)?)
}

/// Render in `.td` format; nodes are renumbered so the root has id 1.
pub fn serialize_td(td: &TreeDecomposition) -> String {
    let order = td.topo_order();
    let mut rank = vec![0usize; td.num_nodes()];
    for (i, &t) in order.iter().enumerate() {
        rank[t] = i + 1;
    }
    let max_bag = td.bags().iter().map(BTreeSet::len).max().unwrap_or(0);
    let n = td.bags().iter().flatten().max().copied().unwrap_or(0);
    let mut out = format!("s td {} {} {}\n", td.num_nodes(), max_bag, n);
    for &t in &order {
        let verts: Vec<String> = td.bag(t).iter().map(u32::to_string).collect();
        out.push_str(&format!("b {} {}\n", rank[t], verts.join(" ")).replace(" \n", "\n"));
    }
    for &t in &order {
        if let Some(p) = td.parent(t) {
            out.push_str(&format!("{} {}\n", rank[p], rank[t]));
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TdBuildError {
    #[error("circuit is not leveled: {0}")]
    NotLeveled(String),
    #[error("input decomposition is invalid: {0}")]
    InvalidInput(String),
    #[error("graph has {0} vertices; exact treewidth is capped at {1}")]
    TooLarge(u32, u32),
}

/// Path decomposition of a leveled circuit: one bag per adjacent level pair.
pub fn td_from_leveled(c: &Circuit) -> Result<TreeDecomposition, TdBuildError> {
    let levels = match c.levels() {
        Some(l) => l.to_vec(),
        None => c.infer_levels().map_err(|e| TdBuildError::NotLeveled(e.to_string()))?,
    };
    let m = levels.iter().copied().max().unwrap_or(0) as usize;
    let mut by_level: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); m + 1];
    for (i, &l) in levels.iter().enumerate() {
        by_level[l as usize].insert(i as u32 + 1);
    }
    if m == 0 {
        return Ok(TreeDecomposition::single_bag(by_level[0].clone()));
    }
    // Bag j covers levels j and j+1; root at the topmost bag so the output
    // level sits in the root.
    let nbags = m;
    let mut bags = Vec::with_capacity(nbags);
    let mut parent = Vec::with_capacity(nbags);
    for j in 0..nbags {
        let mut bag = by_level[j].clone();
        bag.extend(by_level[j + 1].iter().copied());
        bags.push(bag);
        parent.push(if j + 1 < nbags { Some(j + 1) } else { None });
    }
    Ok(TreeDecomposition::new(bags, parent).expect("path is a tree"))
}

/// Make the root bag contain `v` by inserting `v` into every bag on the path
/// from the root to the nearest bag containing it.
pub fn root_with_vertex(td: &TreeDecomposition, v: u32) -> TreeDecomposition {
    if td.bag(td.root()).contains(&v) {
        return td.clone();
    }
    // BFS from the root; stop at the first bag containing v.
    let mut pred: BTreeMap<usize, usize> = BTreeMap::new();
    let mut queue = VecDeque::from([td.root()]);
    let mut hit = None;
    let mut seen = BTreeSet::from([td.root()]);
    'bfs: while let Some(t) = queue.pop_front() {
        for &u in td.children(t) {
            if seen.insert(u) {
                pred.insert(u, t);
                if td.bag(u).contains(&v) {
                    hit = Some(u);
                    break 'bfs;
                }
                queue.push_back(u);
            }
        }
    }
    let mut bags = td.bags().to_vec();
    match hit {
        Some(mut t) => {
            while t != td.root() {
                t = pred[&t];
                bags[t].insert(v);
            }
        }
        // Vertex occurs nowhere; the augmented root is its only occurrence.
        None => {
            bags[td.root()].insert(v);
        }
    }
    let parent: Vec<Option<usize>> = (0..bags.len()).map(|t| td.parent(t)).collect();
    TreeDecomposition::new(bags, parent).expect("structure unchanged")
}

/// Root adjustment for circuits: ensure the output gate lies in the root bag.
pub fn root_with_output(td: &TreeDecomposition, c: &Circuit) -> TreeDecomposition {
    root_with_vertex(td, c.output().0)
}

/// Smallest t with (5/4)^t ≥ n.
pub fn ceil_log_5_4(n: u64) -> u32 {
    let n = BigUint::from(n.max(1));
    let mut num = BigUint::from(1u32);
    let mut den = BigUint::from(1u32);
    let mut t = 0;
    while num < &n * &den {
        num *= 5u32;
        den *= 4u32;
        t += 1;
    }
    t
}

/// Rebalance a valid decomposition of width k into a binary one of width at
/// most 3k+2 whose depth is logarithmic in the vertex count.
///
/// The decomposition is first reduced by merging bags contained in a
/// neighbouring bag, then rebuilt by recursively rooting at an
/// occurrence-weighted centroid: the centroid bag joined with up to two
/// inherited anchor bags becomes the local root, each remaining component
/// recurses with the centroid bag as a fresh anchor, and multiway splits are
/// binarized through duplicated root bags, lightest components deepest.
pub fn balance_td(g: &Graph, td: &TreeDecomposition) -> Result<TreeDecomposition, TdBuildError> {
    let report = td.validate(g);
    if let Some(v) = report.first() {
        return Err(TdBuildError::InvalidInput(v.to_string()));
    }

    // Reduction: absorb any bag that is a subset of a neighbour.
    let n_nodes = td.num_nodes();
    let mut alive: Vec<bool> = vec![true; n_nodes];
    let bags: Vec<BTreeSet<u32>> = td.bags().to_vec();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_nodes];
    for t in 0..n_nodes {
        if let Some(p) = td.parent(t) {
            adj[t].insert(p);
            adj[p].insert(t);
        }
    }
    loop {
        let mut merged = false;
        'scan: for u in 0..n_nodes {
            if !alive[u] {
                continue;
            }
            for &v in adj[u].clone().iter() {
                if bags[u].is_subset(&bags[v]) {
                    // Absorb u into v.
                    let nbrs: Vec<usize> = adj[u].iter().copied().filter(|&w| w != v).collect();
                    for w in nbrs {
                        adj[w].remove(&u);
                        adj[w].insert(v);
                        adj[v].insert(w);
                    }
                    adj[v].remove(&u);
                    adj[u].clear();
                    alive[u] = false;
                    merged = true;
                    break 'scan;
                }
            }
        }
        if !merged {
            break;
        }
    }

    let nodes: BTreeSet<usize> = (0..n_nodes).filter(|&t| alive[t]).collect();
    let mut b = Balancer { bags: &bags, adj: &adj, out_bags: Vec::new(), out_children: Vec::new() };
    let root = b.build(&nodes, &[]);
    let mut parent = vec![None; b.out_bags.len()];
    for (t, ch) in b.out_children.iter().enumerate() {
        for &c in ch {
            parent[c] = Some(t);
        }
    }
    let mut out = TreeDecomposition::new(b.out_bags, parent).expect("balancer builds a tree");
    if out.root() != root {
        out = out.re_root(root);
    }
    debug_assert!(out.is_binary());
    debug_assert!(out.validate(g).is_empty());
    debug_assert!(out.width() <= 3 * td.width() + 2);
    debug_assert!(out.depth() <= 2 * ceil_log_5_4(g.n().max(1) as u64) as usize);
    Ok(out)
}

struct Balancer<'a> {
    bags: &'a [BTreeSet<u32>],
    adj: &'a [BTreeSet<usize>],
    out_bags: Vec<BTreeSet<u32>>,
    out_children: Vec<Vec<usize>>,
}

impl Balancer<'_> {
    fn push(&mut self, bag: BTreeSet<u32>, children: Vec<usize>) -> usize {
        self.out_bags.push(bag);
        self.out_children.push(children);
        self.out_bags.len() - 1
    }

    fn weight(&self, s: &BTreeSet<usize>) -> u64 {
        s.iter().map(|&t| self.bags[t].len() as u64).sum()
    }

    /// Build a binary decomposition of the sub-decomposition induced by
    /// `nodes`. Each anchor (a, A) promises that every vertex of A occurring
    /// in `nodes` occurs in the bag of a; the result's root bag contains all
    /// anchor sets.
    fn build(&mut self, nodes: &BTreeSet<usize>, anchors: &[(usize, BTreeSet<u32>)]) -> usize {
        assert!(anchors.len() <= 2);
        // Candidate centroids: with two anchors only the path between them
        // keeps each component to at most one inherited anchor.
        let candidates: Vec<usize> = if anchors.len() == 2 {
            self.path(nodes, anchors[0].0, anchors[1].0)
        } else {
            nodes.iter().copied().collect()
        };
        let mut centroid = candidates[0];
        let mut best = u64::MAX;
        for &c in &candidates {
            let score = self
                .components(nodes, c)
                .iter()
                .map(|(comp, _)| self.weight(comp))
                .max()
                .unwrap_or(0);
            if score < best {
                best = score;
                centroid = c;
            }
        }

        let mut root_bag = self.bags[centroid].clone();
        for (_, a) in anchors {
            root_bag.extend(a.iter().copied());
        }
        let comps = self.components(nodes, centroid);
        let mut built: Vec<(u64, usize)> = Vec::new();
        for (comp, attach) in &comps {
            let mut sub_anchors = vec![(*attach, self.bags[centroid].clone())];
            for (a, set) in anchors {
                if comp.contains(a) {
                    sub_anchors.push((*a, set.clone()));
                }
            }
            let w = self.weight(comp);
            let child = self.build(comp, &sub_anchors);
            built.push((w, child));
        }
        // Binarize: repeatedly join the two lightest subtrees under a
        // duplicate of the root bag, so heavy components stay shallow.
        let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize)>> =
            built.into_iter().map(std::cmp::Reverse).collect();
        while heap.len() > 2 {
            let std::cmp::Reverse((wa, a)) = heap.pop().unwrap();
            let std::cmp::Reverse((wb, b)) = heap.pop().unwrap();
            let joined = self.push(root_bag.clone(), vec![a, b]);
            heap.push(std::cmp::Reverse((wa + wb, joined)));
        }
        let children: Vec<usize> = heap.into_sorted_vec().into_iter().map(|r| r.0 .1).collect();
        self.push(root_bag, children)
    }

    /// Connected components of `nodes` minus `c`, each with its node adjacent
    /// to c.
    fn components(&self, nodes: &BTreeSet<usize>, c: usize) -> Vec<(BTreeSet<usize>, usize)> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::from([c]);
        for &start in self.adj[c].iter().filter(|t| nodes.contains(t)) {
            if seen.contains(&start) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![start];
            seen.insert(start);
            while let Some(t) = stack.pop() {
                comp.insert(t);
                for &u in self.adj[t].iter().filter(|t| nodes.contains(t)) {
                    if seen.insert(u) {
                        stack.push(u);
                    }
                }
            }
            out.push((comp, start));
        }
        out
    }

    fn path(&self, nodes: &BTreeSet<usize>, a: usize, b: usize) -> Vec<usize> {
        if a == b {
            return vec![a];
        }
        let mut pred: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = VecDeque::from([a]);
        let mut seen = BTreeSet::from([a]);
        while let Some(t) = queue.pop_front() {
            for &u in self.adj[t].iter().filter(|t| nodes.contains(t)) {
                if seen.insert(u) {
                    pred.insert(u, t);
                    if u == b {
                        queue.clear();
                        break;
                    }
                    queue.push_back(u);
                }
            }
        }
        let mut path = vec![b];
        let mut t = b;
        while t != a {
            t = pred[&t];
            path.push(t);
        }
        path.reverse();
        path
    }
}

/// Exact treewidth by dynamic programming over vertex subsets, with a
/// witnessing decomposition reconstructed from the optimal elimination order.
pub fn exact_treewidth(g: &Graph) -> Result<(usize, TreeDecomposition), TdBuildError> {
    const CAP: u32 = 13;
    let n = g.n();
    if n > CAP {
        return Err(TdBuildError::TooLarge(n, CAP));
    }
    if n == 0 {
        return Err(TdBuildError::TooLarge(0, CAP));
    }
    let n = n as usize;
    let und = g.underlying_undirected();
    let mut nbr: Vec<u32> = vec![0; n];
    for &(u, v) in und.edges() {
        nbr[u as usize - 1] |= 1 << (v - 1);
        nbr[v as usize - 1] |= 1 << (u - 1);
    }
    // q(s, v): vertices outside s∪{v} reachable from v through s.
    let q = |s: u32, v: usize| -> u32 {
        let mut frontier = nbr[v];
        let mut visited = frontier | (1 << v);
        let mut reach = frontier & !s;
        loop {
            let through = frontier & s;
            let mut next = 0u32;
            let mut rest = through;
            while rest != 0 {
                let w = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                next |= nbr[w];
            }
            next &= !visited;
            if next == 0 {
                break;
            }
            visited |= next;
            frontier = next;
            reach |= next & !s;
        }
        (reach & !(1 << v)).count_ones()
    };
    let full: u32 = if n == 32 { u32::MAX } else { (1 << n) - 1 };
    let mut tw = vec![u8::MAX; full as usize + 1];
    tw[0] = 0;
    for mask in 1..=full {
        let mut best = u8::MAX;
        let mut m = mask;
        while m != 0 {
            let v = m.trailing_zeros() as usize;
            m &= m - 1;
            let rest = mask & !(1 << v);
            let cand = tw[rest as usize].max(q(rest, v) as u8);
            best = best.min(cand);
        }
        tw[mask as usize] = best;
    }
    // Reconstruct the elimination order by peeling the minimiser.
    let mut order_rev = Vec::with_capacity(n);
    let mut mask = full;
    while mask != 0 {
        let mut pick = None;
        let mut m = mask;
        while m != 0 {
            let v = m.trailing_zeros() as usize;
            m &= m - 1;
            let rest = mask & !(1 << v);
            if tw[rest as usize].max(q(rest, v) as u8) == tw[mask as usize] && pick.is_none() {
                pick = Some(v);
            }
        }
        let v = pick.expect("some vertex attains the minimum");
        order_rev.push(v);
        mask &= !(1 << v);
    }
    order_rev.reverse();
    let order = order_rev;

    // Standard bag construction from the elimination order.
    let mut pos = vec![0usize; n];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    let mut h: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(u, v) in und.edges() {
        h[u as usize - 1].insert(v as usize - 1);
        h[v as usize - 1].insert(u as usize - 1);
    }
    let mut bag_of: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut parent_vertex: Vec<Option<usize>> = vec![None; n];
    for &v in &order {
        let nbrs: Vec<usize> = h[v].iter().copied().collect();
        bag_of[v] = nbrs.iter().map(|&w| w as u32 + 1).collect();
        bag_of[v].insert(v as u32 + 1);
        parent_vertex[v] = nbrs.iter().copied().min_by_key(|&w| pos[w]);
        for &a in &nbrs {
            for &b in &nbrs {
                if a != b {
                    h[a].insert(b);
                }
            }
            h[a].remove(&v);
        }
        h[v].clear();
    }
    // Tree nodes in elimination order; stray roots of other components hang
    // off the last bag.
    let last = *order.last().unwrap();
    let mut bags = Vec::with_capacity(n);
    let mut parent = Vec::with_capacity(n);
    for &v in &order {
        bags.push(bag_of[v].clone());
        parent.push(match parent_vertex[v] {
            Some(p) => Some(pos[p]),
            None if v != last => Some(pos[last]),
            None => None,
        });
    }
    let td = TreeDecomposition::new(bags, parent).expect("elimination tree is a tree");
    debug_assert!(td.validate(g).is_empty());
    Ok((tw[full as usize] as usize, td))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::parse_circuit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bag(vs: &[u32]) -> BTreeSet<u32> {
        vs.iter().copied().collect()
    }

    #[test]
    fn validate_path_graph() {
        let g = Graph::undirected(3, [(1, 2), (2, 3)]).unwrap();
        let td = TreeDecomposition::new(vec![bag(&[1, 2]), bag(&[2, 3])], vec![None, Some(0)]).unwrap();
        assert!(td.validate(&g).is_empty());

        let bad = TreeDecomposition::new(vec![bag(&[1]), bag(&[3])], vec![None, Some(0)]).unwrap();
        let report = bad.validate(&g);
        assert!(report.contains(&TdViolation::VertexNotCovered { vertex: 2 }));
        assert!(report.contains(&TdViolation::EdgeNotCovered { u: 1, v: 2 }));
    }

    #[test]
    fn validate_triangle_missing_edge() {
        let g = Graph::undirected(3, [(1, 2), (2, 3), (1, 3)]).unwrap();
        let td = TreeDecomposition::new(vec![bag(&[1, 2]), bag(&[2, 3])], vec![None, Some(0)]).unwrap();
        let report = td.validate(&g);
        assert_eq!(report, vec![TdViolation::EdgeNotCovered { u: 1, v: 3 }]);
    }

    #[test]
    fn validate_disconnected_occurrences() {
        let g = Graph::undirected(3, [(1, 2), (2, 3)]).unwrap();
        let td = TreeDecomposition::new(
            vec![bag(&[1, 2]), bag(&[2]), bag(&[2, 3])],
            vec![None, Some(0), Some(1)],
        )
        .unwrap();
        assert!(td.validate(&g).is_empty());
        let td = TreeDecomposition::new(
            vec![bag(&[1, 2]), bag(&[3]), bag(&[2, 3])],
            vec![None, Some(0), Some(1)],
        )
        .unwrap();
        let report = td.validate(&g);
        assert!(matches!(report[0], TdViolation::OccurrencesDisconnected { vertex: 2, .. }));
    }

    #[test]
    fn metrics() {
        let td = TreeDecomposition::single_bag(bag(&[1, 2, 3, 4]));
        assert_eq!(td.width(), 3);
        assert_eq!(td.depth(), 0);
        let path = TreeDecomposition::new(
            vec![bag(&[1]), bag(&[1, 2]), bag(&[2, 3])],
            vec![None, Some(0), Some(1)],
        )
        .unwrap();
        assert_eq!(path.depth(), 2);
        assert_eq!(path.bag_below(path.root()), bag(&[1, 2, 3]));
        assert_eq!(path.bag_below(2), bag(&[2, 3]));
    }

    #[test]
    fn from_leveled_circuit() {
        let c = parse_circuit(
            "input x1\ninput x2\ngate a add x1 x2\ngate b mul x1 x2\ngate o mul a b\noutput o",
        )
        .unwrap();
        let td = td_from_leveled(&c).unwrap();
        assert_eq!(td.num_nodes(), 2);
        assert_eq!(td.bag(0).len(), 4);
        assert_eq!(td.bag(1).len(), 3);
        assert_eq!(td.width(), 3);
        assert!(td.validate(&Graph::of_circuit(&c)).is_empty());
        // Root holds the output gate.
        assert!(td.bag(td.root()).contains(&c.output().0));
    }

    #[test]
    fn from_leveled_single_level() {
        let c = parse_circuit("input x1\noutput x1").unwrap();
        let td = td_from_leveled(&c).unwrap();
        assert_eq!(td.num_nodes(), 1);
    }

    #[test]
    fn root_with_vertex_augments_path() {
        let td = TreeDecomposition::new(
            vec![bag(&[1, 2]), bag(&[2, 3]), bag(&[3, 4])],
            vec![None, Some(0), Some(1)],
        )
        .unwrap();
        let rooted = root_with_vertex(&td, 4);
        assert!(rooted.bag(rooted.root()).contains(&4));
        assert_eq!(rooted.width(), td.width() + 1);
        let g = Graph::undirected(4, [(1, 2), (2, 3), (3, 4)]).unwrap();
        assert!(rooted.validate(&g).is_empty());
        // Already present: unchanged.
        let same = root_with_vertex(&rooted, 4);
        assert_eq!(same, rooted);
    }

    #[test]
    fn log_5_4() {
        assert_eq!(ceil_log_5_4(1), 0);
        assert_eq!(ceil_log_5_4(2), 4);
        assert_eq!(ceil_log_5_4(16), 13);
    }

    #[test]
    fn balance_path_16() {
        // Path graph on 17 vertices, path decomposition of 16 width-1 bags.
        let n = 17u32;
        let g = Graph::undirected(n, (1..n).map(|v| (v, v + 1))).unwrap();
        let bags: Vec<BTreeSet<u32>> = (1..n).map(|v| bag(&[v, v + 1])).collect();
        let parent: Vec<Option<usize>> = (0..bags.len()).map(|i| i.checked_sub(1)).collect();
        let td = TreeDecomposition::new(bags, parent).unwrap();
        let balanced = balance_td(&g, &td).unwrap();
        assert!(balanced.validate(&g).is_empty());
        assert!(balanced.is_binary());
        assert!(balanced.width() <= 5);
        assert!(balanced.depth() <= 2 * ceil_log_5_4(n as u64) as usize);
    }

    #[test]
    fn balance_single_bag() {
        let g = Graph::undirected(3, [(1, 2), (2, 3)]).unwrap();
        let td = TreeDecomposition::single_bag(bag(&[1, 2, 3]));
        let balanced = balance_td(&g, &td).unwrap();
        assert_eq!(balanced.depth(), 0);
        assert_eq!(balanced.num_nodes(), 1);
    }

    #[test]
    fn balance_rejects_invalid() {
        let g = Graph::undirected(3, [(1, 2), (2, 3)]).unwrap();
        let td = TreeDecomposition::new(vec![bag(&[1]), bag(&[3])], vec![None, Some(0)]).unwrap();
        assert!(matches!(balance_td(&g, &td), Err(TdBuildError::InvalidInput(_))));
    }

    /// Random valid decomposition: random tree, each vertex occupies a path
    /// from a random node toward the root, graph drawn within bags.
    fn random_instance(rng: &mut ChaCha8Rng) -> (Graph, TreeDecomposition) {
        let nodes = rng.gen_range(1..=12usize);
        let parent: Vec<Option<usize>> =
            (0..nodes).map(|i| if i == 0 { None } else { Some(rng.gen_range(0..i)) }).collect();
        let n = rng.gen_range(1..=10u32);
        let mut bags: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); nodes];
        for v in 1..=n {
            let mut t = rng.gen_range(0..nodes);
            bags[t].insert(v);
            for _ in 0..rng.gen_range(0..4usize) {
                match parent[t] {
                    Some(p) => {
                        t = p;
                        bags[t].insert(v);
                    }
                    None => break,
                }
            }
        }
        let mut edges = Vec::new();
        for b in &bags {
            let vs: Vec<u32> = b.iter().copied().collect();
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    if rng.gen_bool(0.5) {
                        edges.push((vs[i], vs[j]));
                    }
                }
            }
        }
        let g = Graph::undirected(n, edges).unwrap();
        let td = TreeDecomposition::new(bags, parent).unwrap();
        (g, td)
    }

    #[test]
    fn balance_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..120 {
            let (g, td) = random_instance(&mut rng);
            let k = td.width();
            let balanced = balance_td(&g, &td).unwrap();
            assert!(balanced.validate(&g).is_empty(), "balanced td invalid");
            assert!(balanced.is_binary());
            assert!(balanced.width() <= 3 * k + 2, "width {} vs k {}", balanced.width(), k);
            assert!(balanced.depth() <= 2 * ceil_log_5_4(g.n().max(1) as u64) as usize);
        }
    }

    #[test]
    fn exact_treewidth_examples() {
        // Tree on 7 vertices.
        let g = Graph::undirected(7, [(1, 2), (1, 3), (2, 4), (2, 5), (3, 6), (3, 7)]).unwrap();
        let (w, td) = exact_treewidth(&g).unwrap();
        assert_eq!(w, 1);
        assert!(td.validate(&g).is_empty());
        assert_eq!(td.width(), 1);

        let k4 = Graph::undirected(4, [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap();
        let (w, td) = exact_treewidth(&k4).unwrap();
        assert_eq!(w, 3);
        assert!(td.validate(&k4).is_empty());

        // 3x3 grid.
        let mut edges = Vec::new();
        for r in 0..3u32 {
            for c in 0..3u32 {
                let v = r * 3 + c + 1;
                if c < 2 {
                    edges.push((v, v + 1));
                }
                if r < 2 {
                    edges.push((v, v + 3));
                }
            }
        }
        let grid = Graph::undirected(9, edges).unwrap();
        let (w, td) = exact_treewidth(&grid).unwrap();
        assert_eq!(w, 3);
        assert!(td.validate(&grid).is_empty());
    }

    #[test]
    fn exact_treewidth_cap() {
        let g = Graph::undirected(14, [(1, 2)]).unwrap();
        assert!(matches!(exact_treewidth(&g), Err(TdBuildError::TooLarge(14, 13))));
    }

    /// Naive oracle: minimum over all elimination orders of the maximum
    /// degree at elimination time.
    fn naive_treewidth(g: &Graph) -> usize {
        fn go(h: &mut Vec<BTreeSet<usize>>, remaining: &mut Vec<usize>, best: &mut usize, cur: usize) {
            if remaining.is_empty() {
                *best = (*best).min(cur);
                return;
            }
            if cur >= *best {
                return;
            }
            for idx in 0..remaining.len() {
                let v = remaining[idx];
                let nbrs: Vec<usize> = h[v].iter().copied().collect();
                let step = cur.max(nbrs.len());
                if step >= *best {
                    continue;
                }
                let mut added = Vec::new();
                for i in 0..nbrs.len() {
                    for j in i + 1..nbrs.len() {
                        if h[nbrs[i]].insert(nbrs[j]) {
                            h[nbrs[j]].insert(nbrs[i]);
                            added.push((nbrs[i], nbrs[j]));
                        }
                    }
                }
                for &w in &nbrs {
                    h[w].remove(&v);
                }
                remaining.swap_remove(idx);
                go(h, remaining, best, step);
                remaining.push(v);
                let last = remaining.len() - 1;
                remaining.swap(idx, last);
                for &w in &nbrs {
                    h[w].insert(v);
                }
                for (a, b) in added {
                    h[a].remove(&b);
                    h[b].remove(&a);
                }
            }
        }
        let n = g.n() as usize;
        let mut h = vec![BTreeSet::new(); n];
        for &(u, v) in g.underlying_undirected().edges() {
            h[u as usize - 1].insert(v as usize - 1);
            h[v as usize - 1].insert(u as usize - 1);
        }
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut best = n;
        go(&mut h, &mut remaining, &mut best, 0);
        best
    }

    #[test]
    fn exact_treewidth_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.gen_range(1..=7u32);
            let mut edges = Vec::new();
            for u in 1..=n {
                for v in u + 1..=n {
                    if rng.gen_bool(0.4) {
                        edges.push((u, v));
                    }
                }
            }
            let g = Graph::undirected(n, edges).unwrap();
            let (w, td) = exact_treewidth(&g).unwrap();
            assert_eq!(w, naive_treewidth(&g));
            assert!(td.validate(&g).is_empty());
            assert_eq!(td.width(), w);
        }
    }

    #[test]
    fn exact_treewidth_lower_bounds_valid_tds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..60 {
            let (g, td) = random_instance(&mut rng);
            if g.n() > 10 {
                continue;
            }
            let (w, _) = exact_treewidth(&g).unwrap();
            assert!(w <= td.width(), "exact {} vs td width {}", w, td.width());
        }
    }

    #[test]
    fn gr_round_trip() {
        let text = "c comment\np tw 4 3\n1 2\n2 3\n3 4\n";
        let g = parse_gr(text, false).unwrap();
        assert_eq!(g.n(), 4);
        assert_eq!(g.edges().len(), 3);
        assert_eq!(serialize_gr(&g), "p tw 4 3\n1 2\n2 3\n3 4\n");
        assert!(parse_gr("1 2\n", false).is_err());
        assert!(parse_gr("p tw 2 2\n1 2\n", false).is_err());
    }

    #[test]
    fn td_round_trip() {
        let text = "c c\ns td 2 2 3\nb 1 1 2\nb 2 2 3\n1 2\n";
        let td = parse_td(text).unwrap();
        assert_eq!(td.num_nodes(), 2);
        assert_eq!(td.root(), 0);
        assert_eq!(td.bag(0), &bag(&[1, 2]));
        let out = serialize_td(&td);
        let again = parse_td(&out).unwrap();
        assert_eq!(again.bags(), td.bags());
        assert!(parse_td("s td 3 2 3\nb 1 1\nb 2 2\nb 3 3\n1 2\n").is_err());
    }

    #[test]
    fn td_parse_cycle_rejected() {
        let text = "s td 3 2 3\nb 1 1\nb 2 2\nb 3 3\n1 2\n2 3\n3 1\n";
        assert!(parse_td(text).is_err());
    }

    #[test]
    fn re_root_keeps_validity() {
        let g = Graph::undirected(4, [(1, 2), (2, 3), (3, 4)]).unwrap();
        let td = TreeDecomposition::new(
            vec![bag(&[1, 2]), bag(&[2, 3]), bag(&[3, 4])],
            vec![None, Some(0), Some(1)],
        )
        .unwrap();
        let r = td.re_root(2);
        assert_eq!(r.root(), 2);
        assert!(r.validate(&g).is_empty());
        assert_eq!(r.depth(), 2);
    }
}
