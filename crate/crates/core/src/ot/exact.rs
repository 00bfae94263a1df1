use super::{check_shapes, EmpiricalMeasure, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest common denominator `exact_ot` will scale masses by.
pub const MAX_SCALE: u64 = 1_000_000;
/// Largest side length `permutation_oracle` will enumerate.
pub const MAX_PERMUTATION_SIZE: usize = 8;

const RATIONAL_TOL: f64 = 1e-12;

/// Exact (unregularized) OT cost and an optimal vertex plan.
///
/// Masses are scaled by the least common denominator `L` of all weights into
/// integer supplies and demands, and the resulting transportation problem is
/// solved by successive shortest paths with node potentials. The flow is
/// rescaled by `1/L` on return.
pub fn exact_ot(
    c: &Matrix,
    alpha: &EmpiricalMeasure,
    beta: &EmpiricalMeasure,
) -> Result<TransportPlan> {
    check_shapes(c, alpha, beta)?;
    let (n, m) = c.shape();

    let scale = common_denominator(alpha.weights().iter().chain(beta.weights()))?;
    let to_units = |w: &f64| (w * scale as f64).round() as i64;
    let supply: Vec<i64> = alpha.weights().iter().map(to_units).collect();
    let demand: Vec<i64> = beta.weights().iter().map(to_units).collect();
    let total = supply.iter().sum::<i64>();
    if total != scale as i64 || demand.iter().sum::<i64>() != total {
        return Err(Error::UnsupportedMeasure(format!(
            "masses do not scale to {scale} integer units on both sides"
        )));
    }

    // Shifting every cost by a constant moves the objective by that constant
    // times the total mass and keeps all initial edge costs non-negative.
    let min_cost = c.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let mut net = FlowNetwork::new(n + m + 2);
    let (source, sink) = (0, n + m + 1);
    for (i, &s) in supply.iter().enumerate() {
        net.add_edge(source, 1 + i, s, 0.0);
    }
    let mut transport_edges = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            transport_edges.push(net.add_edge(1 + i, 1 + n + j, total, c[(i, j)] - min_cost));
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        net.add_edge(1 + n + j, sink, d, 0.0);
    }

    let shipped = net.min_cost_flow(source, sink, total);
    debug_assert_eq!(shipped, total);

    let plan = Matrix::from_fn(n, m, |i, j| {
        net.flow(transport_edges[i * m + j]) as f64 / scale as f64
    });
    Ok(TransportPlan::from_plan(plan, c, alpha, beta, 0, true))
}

/// Brute-force uniform-marginal OT on a square cost matrix.
///
/// With uniform marginals the optimum sits at a permutation matrix, so the
/// minimum over all `N!` assignments is the exact OT cost.
pub fn permutation_oracle(c: &Matrix) -> Result<f64> {
    let n = c.rows();
    if n != c.cols() || n == 0 || n > MAX_PERMUTATION_SIZE {
        return Err(Error::Unsupported(format!(
            "permutation oracle needs a square matrix with 1..={MAX_PERMUTATION_SIZE} rows, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }

    let assignment_cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum::<f64>();

    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    let mut best = assignment_cost(&perm);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(assignment_cost(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

fn common_denominator<'a>(weights: impl Iterator<Item = &'a f64>) -> Result<u64> {
    let mut lcm = 1u64;
    for &w in weights {
        let den = denominator(w).ok_or_else(|| {
            Error::UnsupportedMeasure(format!("weight {w} has no denominator <= {MAX_SCALE}"))
        })?;
        lcm = lcm / gcd(lcm, den) * den;
        if lcm > MAX_SCALE {
            return Err(Error::UnsupportedMeasure(format!(
                "common denominator of the weights exceeds {MAX_SCALE}"
            )));
        }
    }
    Ok(lcm)
}

/// Smallest `q <= MAX_SCALE` with `x` within `RATIONAL_TOL` of some `p/q`,
/// found along the continued-fraction convergents of `x`.
fn denominator(x: f64) -> Option<u64> {
    let (mut h_prev, mut h) = (0.0f64, 1.0f64);
    let (mut k_prev, mut k) = (1.0f64, 0.0f64);
    let mut rest = x;
    for _ in 0..64 {
        let a = rest.floor();
        (h_prev, h) = (h, a * h + h_prev);
        (k_prev, k) = (k, a * k + k_prev);
        if k > MAX_SCALE as f64 {
            return None;
        }
        if (x - h / k).abs() <= RATIONAL_TOL {
            return Some(k as u64);
        }
        let frac = rest - a;
        if frac == 0.0 {
            return None;
        }
        rest = 1.0 / frac;
    }
    None
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
    rev: usize,
}

/// Residual network for successive shortest paths with Dijkstra and potentials.
struct FlowNetwork {
    graph: Vec<Vec<Edge>>,
    original_cap: Vec<(usize, usize, i64)>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self { graph: (0..nodes).map(|_| Vec::new()).collect(), original_cap: Vec::new() }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        let fwd = self.graph[from].len();
        let bwd = self.graph[to].len() + usize::from(from == to);
        self.graph[from].push(Edge { to, cap, cost, rev: bwd });
        self.graph[to].push(Edge { to: from, cap: 0, cost: -cost, rev: fwd });
        self.original_cap.push((from, fwd, cap));
        self.original_cap.len() - 1
    }

    fn flow(&self, id: usize) -> i64 {
        let (from, idx, cap) = self.original_cap[id];
        cap - self.graph[from][idx].cap
    }

    fn min_cost_flow(&mut self, source: usize, sink: usize, limit: i64) -> i64 {
        let n = self.graph.len();
        let mut potential = vec![0.0f64; n];
        let mut dist = vec![f64::INFINITY; n];
        let mut visited = vec![false; n];
        let mut prev = vec![(usize::MAX, usize::MAX); n];
        let mut flow = 0;

        while flow < limit {
            dist.fill(f64::INFINITY);
            visited.fill(false);
            dist[source] = 0.0;
            // Dense Dijkstra: the networks here have few nodes and many edges.
            loop {
                let next = (0..n)
                    .filter(|&v| !visited[v] && dist[v].is_finite())
                    .min_by(|&a, &b| dist[a].total_cmp(&dist[b]));
                let Some(v) = next else { break };
                visited[v] = true;
                if v == sink {
                    break;
                }
                for (idx, e) in self.graph[v].iter().enumerate() {
                    if e.cap == 0 || visited[e.to] {
                        continue;
                    }
                    let reduced = (e.cost - potential[e.to] + potential[v]).max(0.0);
                    let nd = dist[v] + reduced;
                    if nd < dist[e.to] {
                        dist[e.to] = nd;
                        prev[e.to] = (v, idx);
                    }
                }
            }
            if !visited[sink] {
                break;
            }
            for v in 0..n {
                if visited[v] {
                    potential[v] -= dist[sink] - dist[v];
                }
            }

            let mut push = limit - flow;
            let mut v = sink;
            while v != source {
                let (u, idx) = prev[v];
                push = push.min(self.graph[u][idx].cap);
                v = u;
            }
            let mut v = sink;
            while v != source {
                let (u, idx) = prev[v];
                let rev = self.graph[u][idx].rev;
                self.graph[u][idx].cap -= push;
                self.graph[v][rev].cap += push;
                v = u;
            }
            flow += push;
        }
        flow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::uniform_measure;

    fn uniform(n: usize) -> EmpiricalMeasure {
        uniform_measure(n).unwrap()
    }

    /// Enumerates every integer flow of a 2x3 transport problem with supplies
    /// (3, 3) and demands (2, 2, 2), the L = 6 scaling of uniform(2) x uniform(3).
    fn enumerate_2x3(c: &Matrix) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..=2i64 {
            for b in 0..=2i64 {
                let first_row = [a, b, 3 - a - b];
                if !(0..=2).contains(&first_row[2]) {
                    continue;
                }
                let cost: f64 = (0..3)
                    .map(|j| first_row[j] as f64 * c[(0, j)] + (2 - first_row[j]) as f64 * c[(1, j)])
                    .sum();
                best = best.min(cost / 6.0);
            }
        }
        best
    }

    #[test]
    fn zero_cost() {
        let t = exact_ot(&Matrix::zeros(3, 4), &uniform(3), &uniform(4)).unwrap();
        assert_eq!(t.cost, 0.0);
        assert!(t.marginal_err <= 1e-12);
    }

    #[test]
    fn zero_cost_permutation_exists() {
        for n in 1..=5 {
            let c = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
            let t = exact_ot(&c, &uniform(n), &uniform(n)).unwrap();
            assert_eq!(t.cost, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let expected = if i == j { 1.0 / n as f64 } else { 0.0 };
                    assert!((t.plan[(i, j)] - expected).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn two_by_three_matches_enumeration() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let enumerated = enumerate_2x3(&c);
        assert!((enumerated - 1.0 / 3.0).abs() < 1e-15);
        let t = exact_ot(&c, &uniform(2), &uniform(3)).unwrap();
        assert!((t.cost - enumerated).abs() < 1e-15);
        assert!(t.marginal_err <= 1e-12);

        let c = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.1, 0.4, 0.25]]).unwrap();
        let t = exact_ot(&c, &uniform(2), &uniform(3)).unwrap();
        assert!((t.cost - enumerate_2x3(&c)).abs() < 1e-15);
    }

    #[test]
    fn permutation_examples() {
        let c = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(permutation_oracle(&c).unwrap(), 0.0);
        let c = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(permutation_oracle(&c).unwrap(), 0.0);
        let anti = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(permutation_oracle(&anti).unwrap(), 0.0);
        assert!(permutation_oracle(&Matrix::zeros(2, 3)).is_err());
        assert!(permutation_oracle(&Matrix::zeros(9, 9)).is_err());
    }

    #[test]
    fn heap_enumeration_visits_every_permutation() {
        // Only the anti-diagonal assignment avoids every entry >= 1.
        let n = 5;
        let c = Matrix::from_fn(n, n, |i, j| if i + j == n - 1 { 0.0 } else { 1.0 + (i * n + j) as f64 });
        assert_eq!(permutation_oracle(&c).unwrap(), 0.0);
    }

    #[test]
    fn non_uniform_rational_measures() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = EmpiricalMeasure::new(vec![0.25, 0.75]).unwrap();
        let b = EmpiricalMeasure::new(vec![0.5, 0.5]).unwrap();
        let t = exact_ot(&c, &a, &b).unwrap();
        assert!((t.cost - 0.25).abs() < 1e-15);
    }

    #[test]
    fn irrational_measure_is_rejected() {
        let w = 1.0 / std::f64::consts::PI;
        let a = EmpiricalMeasure::new(vec![w, 1.0 - w]).unwrap();
        let err = exact_ot(&Matrix::zeros(2, 2), &a, &uniform(2)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMeasure(_)));
    }

    #[test]
    fn denominators() {
        assert_eq!(denominator(0.0), Some(1));
        assert_eq!(denominator(1.0), Some(1));
        assert_eq!(denominator(1.0 / 3.0), Some(3));
        assert_eq!(denominator(1.0 / 7.0), Some(7));
        assert_eq!(denominator(0.6), Some(5));
        assert_eq!(common_denominator([1.0 / 12.0, 1.0 / 10.0].iter()).unwrap(), 60);
    }
}
