//! Primal network simplex for the uncapacitated transportation problem.
//!
//! Nodes are the supplies, the demands and an artificial root. Every supply starts connected to
//! the root by an artificial arc carrying its full supply, every demand by an artificial arc
//! delivering its full demand; artificial arcs are priced prohibitively so they drain during the
//! pivots. Degenerate pivots are handled with the strongly-feasible leaving-arc rule.

use crate::error::{Error, Result};

/// Leftover artificial flow tolerated at the optimum (absorbs normalization round-off).
pub const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// Total cost `sum flow_ij * cost_ij`.
    pub cost: f64,
    /// Optimal flow, row-major `supplies x demands`.
    pub flow: Vec<f64>,
    /// Dual potentials of the supply nodes (`d cost / d supply_i` up to a common shift).
    pub supply_potentials: Vec<f64>,
    /// Dual potentials of the demand nodes.
    pub demand_potentials: Vec<f64>,
    pub pivots: usize,
}

struct Network<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    big: f64,
}

impl Network<'_> {
    fn root(&self) -> usize {
        self.m + self.n
    }

    fn real_arcs(&self) -> usize {
        self.m * self.n
    }

    fn endpoints(&self, arc: usize) -> (usize, usize) {
        let real = self.real_arcs();
        if arc < real {
            (arc / self.n, self.m + arc % self.n)
        } else {
            let node = arc - real;
            if node < self.m {
                (node, self.root())
            } else {
                (self.root(), node)
            }
        }
    }

    fn arc_cost(&self, arc: usize) -> f64 {
        if arc < self.real_arcs() {
            self.cost[arc]
        } else {
            self.big
        }
    }
}

struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    stamp: Vec<u64>,
    generation: u64,
}

impl Tree {
    /// Recomputes depths and potentials from parent pointers.
    fn refresh(&mut self, net: &Network<'_>) {
        self.generation += 1;
        let root = net.root();
        self.stamp[root] = self.generation;
        self.depth[root] = 0;
        self.potential[root] = 0.0;
        let mut stack = Vec::new();
        for start in 0..root {
            let mut v = start;
            while self.stamp[v] != self.generation {
                stack.push(v);
                v = self.parent[v];
            }
            while let Some(w) = stack.pop() {
                let p = self.parent[w];
                let arc = self.pred[w];
                let c = net.arc_cost(arc);
                self.depth[w] = self.depth[p] + 1;
                self.potential[w] = if net.endpoints(arc).0 == p {
                    self.potential[p] + c
                } else {
                    self.potential[p] - c
                };
                self.stamp[w] = self.generation;
            }
        }
    }
}

/// Solves `min sum c_ij x_ij` subject to row sums `supply` and column sums `demand`, `x >= 0`.
///
/// `cost` is row-major `supply.len() x demand.len()`; supplies and demands must be positive and
/// balanced up to [`FEASIBILITY_SLACK`].
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<TransportSolution> {
    let (m, n) = (supply.len(), demand.len());
    if cost.len() != m * n {
        return Err(Error::ShapeMismatch { expected: m * n, got: cost.len() });
    }
    if m == 0 || n == 0 {
        return Err(Error::FlowInfeasible("empty supply or demand side".into()));
    }
    if supply.iter().chain(demand).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::FlowInfeasible("supplies and demands must be positive".into()));
    }
    let imbalance = (supply.iter().sum::<f64>() - demand.iter().sum::<f64>()).abs();
    if imbalance > FEASIBILITY_SLACK {
        return Err(Error::FlowInfeasible(format!("supply and demand differ by {imbalance:e}")));
    }
    let max_cost = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let nodes = m + n + 1;
    let net = Network { m, n, cost, big: (max_cost + 1.0) * nodes as f64 };
    let real = net.real_arcs();
    let total_arcs = real + m + n;

    let mut flow = vec![0.0; total_arcs];
    let mut tree = Tree {
        parent: vec![net.root(); nodes],
        pred: vec![usize::MAX; nodes],
        depth: vec![0; nodes],
        potential: vec![0.0; nodes],
        stamp: vec![0; nodes],
        generation: 0,
    };
    for (i, &s) in supply.iter().enumerate() {
        tree.pred[i] = real + i;
        flow[real + i] = s;
    }
    for (j, &d) in demand.iter().enumerate() {
        tree.pred[m + j] = real + m + j;
        flow[real + m + j] = d;
    }
    tree.refresh(&net);

    let block = ((real as f64).sqrt().ceil() as usize).max(1);
    let tol = 1e-12 * (max_cost + 1.0);
    let max_pivots = 50 * total_arcs + 10_000;
    let mut cursor = 0usize;
    let mut pivots = 0usize;
    let mut path_u = Vec::new();
    let mut path_v = Vec::new();

    loop {
        // Block pricing: scan from the cursor, return the most negative arc of the first block
        // that contains one.
        let mut entering = None;
        let mut best = -tol;
        let mut scanned = 0usize;
        while scanned < real {
            let end = (scanned + block).min(real);
            for _ in scanned..end {
                let arc = cursor;
                cursor = if cursor + 1 == real { 0 } else { cursor + 1 };
                if flow[arc] > 0.0 {
                    continue;
                }
                let (u, v) = net.endpoints(arc);
                let rc = cost[arc] + tree.potential[u] - tree.potential[v];
                if rc < best {
                    best = rc;
                    entering = Some(arc);
                }
            }
            scanned = end;
            if entering.is_some() {
                break;
            }
        }
        let Some(enter) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::FlowInfeasible("network simplex exceeded its pivot budget".into()));
        }

        // Tree paths from both endpoints up to the apex of the cycle.
        let (u, v) = net.endpoints(enter);
        path_u.clear();
        path_v.clear();
        let (mut a, mut b) = (u, v);
        while tree.depth[a] > tree.depth[b] {
            path_u.push(a);
            a = tree.parent[a];
        }
        while tree.depth[b] > tree.depth[a] {
            path_v.push(b);
            b = tree.parent[b];
        }
        while a != b {
            path_u.push(a);
            path_v.push(b);
            a = tree.parent[a];
            b = tree.parent[b];
        }

        // Flow travels u -> v, then up from v to the apex, then down from the apex to u.
        // Strongly feasible rule: the last blocking arc met when walking the cycle from the apex.
        let mut theta_v = f64::INFINITY;
        let mut leave_v = None;
        for &w in &path_v {
            let arc = tree.pred[w];
            if net.endpoints(arc).0 != w && flow[arc] <= theta_v {
                theta_v = flow[arc];
                leave_v = Some(w);
            }
        }
        let mut theta_u = f64::INFINITY;
        let mut leave_u = None;
        for &w in &path_u {
            let arc = tree.pred[w];
            if net.endpoints(arc).0 == w && flow[arc] < theta_u {
                theta_u = flow[arc];
                leave_u = Some(w);
            }
        }
        let (theta, leave_node, on_v_side) = match (leave_v, leave_u) {
            (Some(w), _) if theta_v <= theta_u => (theta_v, w, true),
            (_, Some(w)) => (theta_u, w, false),
            _ => return Err(Error::FlowInfeasible("unbounded transport cycle".into())),
        };

        if theta > 0.0 {
            flow[enter] += theta;
            for &w in &path_v {
                let arc = tree.pred[w];
                if net.endpoints(arc).0 == w {
                    flow[arc] += theta;
                } else {
                    flow[arc] -= theta;
                }
            }
            for &w in &path_u {
                let arc = tree.pred[w];
                if net.endpoints(arc).0 == w {
                    flow[arc] -= theta;
                } else {
                    flow[arc] += theta;
                }
            }
        }
        flow[tree.pred[leave_node]] = 0.0;

        // Re-hang the subtree cut off by the leaving arc from the entering arc.
        let (inner, outer) = if on_v_side { (v, u) } else { (u, v) };
        let mut child = inner;
        let mut new_parent = outer;
        let mut new_pred = enter;
        loop {
            let old_parent = tree.parent[child];
            let old_pred = tree.pred[child];
            tree.parent[child] = new_parent;
            tree.pred[child] = new_pred;
            if child == leave_node {
                break;
            }
            new_parent = child;
            new_pred = old_pred;
            child = old_parent;
        }
        tree.refresh(&net);
    }

    let artificial: f64 = flow[real..].iter().sum();
    if artificial > FEASIBILITY_SLACK {
        return Err(Error::FlowInfeasible(format!("artificial arcs still carry {artificial:e}")));
    }
    let transport_cost = flow[..real].iter().zip(cost).map(|(f, c)| f * c).sum();
    flow.truncate(real);
    Ok(TransportSolution {
        cost: transport_cost,
        flow,
        supply_potentials: tree.potential[..m].to_vec(),
        demand_potentials: tree.potential[m..m + n].to_vec(),
        pivots,
    })
}
