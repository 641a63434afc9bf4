//! Slow reference min-cost-flow solver: successive shortest paths with Bellman-Ford on
//! integer-scaled masses. Independent from the library's network simplex.

use meadow::grid::GridDistribution;
use meadow::transport::cell_steps;

pub const SCALE: f64 = 1e12;

/// Rounds masses to integers at `SCALE`, nudging the largest entry so the total is exact.
pub fn integerize(mass: &[f64]) -> Vec<i64> {
    let mut out: Vec<i64> = mass.iter().map(|m| (m * SCALE).round() as i64).collect();
    let target = SCALE as i64;
    let diff = target - out.iter().sum::<i64>();
    let (idx, _) = out.iter().enumerate().max_by_key(|(_, v)| **v).unwrap();
    out[idx] += diff;
    out
}

/// Minimum total cost of moving `supply` onto `demand` (equal integer totals) with integer
/// `cost[i][j]`.
pub fn min_cost(supply: &[i64], demand: &[i64], cost: &[Vec<i64>]) -> i128 {
    let (m, n) = (supply.len(), demand.len());
    let mut excess = supply.to_vec();
    let mut deficit = demand.to_vec();
    let mut flow = vec![vec![0i64; n]; m];
    let mut total: i128 = 0;
    loop {
        if excess.iter().all(|e| *e == 0) {
            break;
        }
        // nodes 0..m supplies, m..m+n demands; distances from a virtual source feeding every
        // supply with excess
        let nodes = m + n;
        let mut dist = vec![i64::MAX; nodes];
        let mut prev = vec![usize::MAX; nodes];
        for i in 0..m {
            if excess[i] > 0 {
                dist[i] = 0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..m {
                for j in 0..n {
                    // forward arc i -> j
                    if dist[i] != i64::MAX && dist[i] + cost[i][j] < dist[m + j] {
                        dist[m + j] = dist[i] + cost[i][j];
                        prev[m + j] = i;
                        changed = true;
                    }
                    // backward arc j -> i where flow is positive
                    if flow[i][j] > 0 && dist[m + j] != i64::MAX && dist[m + j] - cost[i][j] < dist[i]
                    {
                        dist[i] = dist[m + j] - cost[i][j];
                        prev[i] = m + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..n)
            .filter(|&j| deficit[j] > 0 && dist[m + j] != i64::MAX)
            .min_by_key(|&j| dist[m + j])
            .expect("a reachable demand");
        // trace back and find the bottleneck
        let mut node = m + target;
        let mut path = vec![node];
        while node >= m || prev[node] != usize::MAX {
            node = prev[node];
            path.push(node);
        }
        let start = *path.last().unwrap();
        let mut amount = excess[start].min(deficit[target]);
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from >= m {
                amount = amount.min(flow[to][from - m]);
            }
        }
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < m {
                flow[from][to - m] += amount;
                total += amount as i128 * cost[from][to - m] as i128;
            } else {
                flow[to][from - m] -= amount;
                total -= amount as i128 * cost[to][from - m] as i128;
            }
        }
        excess[start] -= amount;
        deficit[target] -= amount;
    }
    total
}

/// Grid W1 through the reference solver.
pub fn reference_w1(mu: &GridDistribution, nu: &GridDistribution) -> f64 {
    let grid = mu.grid();
    let a = integerize(mu.mass());
    let b = integerize(nu.mass());
    let n = grid.cells();
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| (0..n).map(|j| cell_steps(grid, i, j) as i64).collect())
        .collect();
    min_cost(&a, &b, &cost) as f64 / (SCALE * grid.bins() as f64)
}
