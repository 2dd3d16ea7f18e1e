//! Transportation problem by successive shortest paths with node potentials.
//!
//! The network is `source → supply i → demand j → sink`; the only costed arcs
//! are `i → j`. Dijkstra runs on reduced costs over a dense adjacency, which is
//! the right trade-off for complete bipartite graphs of at most 64 + 64 nodes.

use super::TransportError;

const CAP_EPS: f64 = 1e-15;
const MAX_AUGMENTATIONS: usize = 100_000;

/// Optimal coupling of a transportation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub cost: f64,
    /// `plan[i][j]` is the mass moved from supply `i` to demand `j`.
    pub plan: Vec<Vec<f64>>,
}

/// Minimises `Σ plan[i][j]·cost[i][j]` over couplings of `supply` and `demand`.
///
/// Both marginals must have the same total mass.
pub fn solve_transportation(
    supply: &[f64],
    demand: &[f64],
    cost: &[Vec<f64>],
) -> Result<TransportSolution, TransportError> {
    let (m, n) = (supply.len(), demand.len());
    // node layout: 0 = source, 1..=m supplies, m+1..=m+n demands, m+n+1 = sink
    let nodes = m + n + 2;
    let sink = nodes - 1;
    let mut flow = vec![vec![0.0; n]; m];
    let mut sent = vec![0.0; m];
    let mut received = vec![0.0; n];
    let mut potential = vec![0.0; nodes];
    let total: f64 = supply.iter().sum();
    let mut shipped = 0.0;

    for _ in 0..MAX_AUGMENTATIONS {
        if total - shipped <= 1e-13 {
            break;
        }
        // residual arc cost, or None if the arc has no capacity
        let arc = |u: usize,
                   v: usize,
                   sent: &[f64],
                   received: &[f64],
                   flow: &[Vec<f64>]|
         -> Option<f64> {
            if u == 0 && (1..=m).contains(&v) {
                (supply[v - 1] - sent[v - 1] > CAP_EPS).then_some(0.0)
            } else if (1..=m).contains(&u) && (m + 1..=m + n).contains(&v) {
                Some(cost[u - 1][v - m - 1])
            } else if (m + 1..=m + n).contains(&u) && (1..=m).contains(&v) {
                (flow[v - 1][u - m - 1] > CAP_EPS).then(|| -cost[v - 1][u - m - 1])
            } else if (m + 1..=m + n).contains(&u) && v == sink {
                (demand[u - m - 1] - received[u - m - 1] > CAP_EPS).then_some(0.0)
            } else {
                None
            }
        };

        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[0] = 0.0;
        while let Some(u) = (0..nodes)
            .filter(|&u| !done[u] && dist[u].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
        {
            done[u] = true;
            let neighbours: Box<dyn Iterator<Item = usize>> = if u == 0 {
                Box::new(1..=m)
            } else if u <= m {
                Box::new(m + 1..=m + n)
            } else if u < sink {
                Box::new((1..=m).chain(std::iter::once(sink)))
            } else {
                Box::new(std::iter::empty())
            };
            for v in neighbours {
                if done[v] {
                    continue;
                }
                if let Some(c) = arc(u, v, &sent, &received, &flow) {
                    let reduced = (c + potential[u] - potential[v]).max(0.0);
                    let nd = dist[u] + reduced;
                    if nd < dist[v] {
                        dist[v] = nd;
                        prev[v] = u;
                    }
                }
            }
        }
        if !dist[sink].is_finite() {
            if total - shipped <= 1e-9 {
                break;
            }
            return Err(TransportError::Solver(format!(
                "no augmenting path with {:.3e} mass left",
                total - shipped
            )));
        }
        for v in 0..nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }

        // bottleneck along the path
        let mut path = vec![sink];
        while *path.last().unwrap() != 0 {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        let mut delta = total - shipped;
        for w in path.windows(2) {
            let (u, v) = (w[0], w[1]);
            let cap = if u == 0 {
                supply[v - 1] - sent[v - 1]
            } else if v == sink {
                demand[u - m - 1] - received[u - m - 1]
            } else if u <= m {
                f64::INFINITY
            } else {
                flow[v - 1][u - m - 1]
            };
            delta = delta.min(cap);
        }
        for w in path.windows(2) {
            let (u, v) = (w[0], w[1]);
            if u == 0 {
                sent[v - 1] += delta;
            } else if v == sink {
                received[u - m - 1] += delta;
            } else if u <= m {
                flow[u - 1][v - m - 1] += delta;
            } else {
                flow[v - 1][u - m - 1] -= delta;
                if flow[v - 1][u - m - 1] < CAP_EPS {
                    flow[v - 1][u - m - 1] = 0.0;
                }
            }
        }
        shipped += delta;
    }

    let cost_value = flow
        .iter()
        .zip(cost)
        .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>())
        .sum();
    Ok(TransportSolution {
        cost: cost_value,
        plan: flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        // cheaper to cross: cost of identity 2, of swap 0.2
        let cost = vec![vec![1.0, 0.1], vec![0.1, 1.0]];
        let s = solve_transportation(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!((s.cost - 0.1).abs() < 1e-15);
        assert!((s.plan[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn marginals_respected() {
        let cost = vec![vec![3.0, 1.0, 2.0], vec![0.5, 4.0, 1.5]];
        let a = [0.3, 0.7];
        let b = [0.2, 0.5, 0.3];
        let s = solve_transportation(&a, &b, &cost).unwrap();
        for (i, row) in s.plan.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - a[i]).abs() < 1e-12);
        }
        for j in 0..3 {
            let col: f64 = s.plan.iter().map(|r| r[j]).sum();
            assert!((col - b[j]).abs() < 1e-12);
        }
        assert!(s.plan.iter().flatten().all(|&v| v >= 0.0));
    }
}
