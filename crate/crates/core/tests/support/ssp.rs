//! Integer min-cost transport by successive shortest paths (Bellman-Ford on
//! the residual graph). Slow and simple; used as an independent oracle.
#![allow(dead_code)]

struct Edge {
    to: usize,
    cap: i64,
    cost: i64,
}

struct Network {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Network {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, from: usize, to: usize, cap: i64, cost: i64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
    }

    fn min_cost_flow(&mut self, s: usize, t: usize, mut need: i64) -> i64 {
        let n = self.adj.len();
        let mut total = 0;
        while need > 0 {
            let mut dist = vec![i64::MAX; n];
            let mut prev = vec![usize::MAX; n];
            dist[s] = 0;
            for _ in 0..n {
                let mut changed = false;
                for u in 0..n {
                    if dist[u] == i64::MAX {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let edge = &self.edges[e];
                        if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] {
                            dist[edge.to] = dist[u] + edge.cost;
                            prev[edge.to] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            assert!(dist[t] != i64::MAX, "demand cannot be routed");
            let mut push = need;
            let mut v = t;
            while v != s {
                let e = prev[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = prev[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            need -= push;
            total += push * dist[t];
        }
        total
    }
}

/// Minimum of `sum cost[i][j] * flow[i][j]` over integer flows with row sums
/// `supply` and column sums `demand` (which must have equal totals).
pub fn min_cost_transport(supply: &[i64], demand: &[i64], cost: &[Vec<i64>]) -> i64 {
    let total: i64 = supply.iter().sum();
    assert_eq!(total, demand.iter().sum::<i64>(), "unbalanced instance");
    let (m, n) = (supply.len(), demand.len());
    let (s, t) = (m + n, m + n + 1);
    let mut net = Network::new(m + n + 2);
    for (i, &a) in supply.iter().enumerate() {
        net.add(s, i, a, 0);
    }
    for (j, &b) in demand.iter().enumerate() {
        net.add(m + j, t, b, 0);
    }
    for i in 0..m {
        for j in 0..n {
            net.add(i, m + j, total, cost[i][j]);
        }
    }
    net.min_cost_flow(s, t, total)
}
