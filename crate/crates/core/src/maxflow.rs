//! Dinic's maximum flow on integer capacities.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct FlowGraph {
    n: usize,
    start: Vec<usize>,
    to: Vec<u32>,
    cap: Vec<i64>,
    rev: Vec<u32>,
}

/// Edge list accumulated before freezing into compressed adjacency.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    n: usize,
    edges: Vec<(u32, u32, i64, i64)>,
}

impl GraphBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, edges: Vec::new() }
    }

    /// Arc `u → v` with capacity `c_uv` and reverse capacity `c_vu`.
    pub fn add_edge(&mut self, u: usize, v: usize, c_uv: i64, c_vu: i64) {
        debug_assert!(c_uv >= 0 && c_vu >= 0);
        if c_uv == 0 && c_vu == 0 {
            return;
        }
        self.edges.push((u as u32, v as u32, c_uv, c_vu));
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn build(self) -> FlowGraph {
        let mut deg = vec![0usize; self.n + 1];
        for &(u, v, _, _) in &self.edges {
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        let mut start = vec![0usize; self.n + 1];
        for i in 0..self.n {
            start[i + 1] = start[i] + deg[i];
        }
        let m = start[self.n];
        let mut fill = start.clone();
        let mut to = vec![0u32; m];
        let mut cap = vec![0i64; m];
        let mut rev = vec![0u32; m];
        for &(u, v, cuv, cvu) in &self.edges {
            let a = fill[u as usize];
            fill[u as usize] += 1;
            let b = fill[v as usize];
            fill[v as usize] += 1;
            to[a] = v;
            cap[a] = cuv;
            rev[a] = b as u32;
            to[b] = u;
            cap[b] = cvu;
            rev[b] = a as u32;
        }
        FlowGraph {
            n: self.n,
            start,
            to,
            cap,
            rev,
        }
    }
}

impl FlowGraph {
    fn bfs(&self, s: usize, t: usize, level: &mut [i32]) -> bool {
        level.iter_mut().for_each(|l| *l = -1);
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for e in self.start[u]..self.start[u + 1] {
                let v = self.to[e] as usize;
                if self.cap[e] > 0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level[t] >= 0
    }

    /// Maximum flow value from `s` to `t`; leaves the residual graph in place.
    pub fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        let mut flow = 0i64;
        let mut level = vec![-1i32; self.n];
        let mut path: Vec<usize> = Vec::new();
        while self.bfs(s, t, &mut level) {
            let mut it: Vec<usize> = self.start[..self.n].to_vec();
            path.clear();
            let mut u = s;
            loop {
                if u == t {
                    let push = path.iter().map(|&e| self.cap[e]).min().unwrap();
                    for &e in &path {
                        self.cap[e] -= push;
                        let r = self.rev[e] as usize;
                        self.cap[r] += push;
                    }
                    flow += push;
                    // retreat to the tail of the first saturated arc
                    let first = path.iter().position(|&e| self.cap[e] == 0).unwrap();
                    path.truncate(first);
                    u = match path.last() {
                        Some(&e) => self.to[e] as usize,
                        None => s,
                    };
                    continue;
                }
                let end = self.start[u + 1];
                let mut advanced = false;
                while it[u] < end {
                    let e = it[u];
                    let v = self.to[e] as usize;
                    if self.cap[e] > 0 && level[v] == level[u] + 1 {
                        path.push(e);
                        u = v;
                        advanced = true;
                        break;
                    }
                    it[u] += 1;
                }
                if advanced {
                    continue;
                }
                // dead end: prune and back up
                level[u] = -1;
                match path.pop() {
                    None => break,
                    Some(e) => {
                        let r = self.rev[e] as usize;
                        u = self.to[r] as usize;
                        it[u] += 1;
                    }
                }
            }
        }
        flow
    }

    /// Nodes reachable from `s` in the residual graph.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for e in self.start[u]..self.start[u + 1] {
                let v = self.to[e] as usize;
                if self.cap[e] > 0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}
