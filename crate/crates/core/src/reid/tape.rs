//! Scalar reverse-mode tape in `f64`, used for the metric losses.
//!
//! Losses are written once over [`S`] handles; their gradient w.r.t. the
//! embedding (or logit) matrix is then fed back into the tensor trace as a
//! single custom op.

/// Handle to a scalar on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct S(usize);

#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    /// `(start, end)` into `edges` for every node.
    spans: Vec<(usize, usize)>,
    edges: Vec<(usize, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn node(&mut self, value: f64, parents: impl IntoIterator<Item = (S, f64)>) -> S {
        let start = self.edges.len();
        self.edges.extend(parents.into_iter().map(|(p, d)| (p.0, d)));
        self.spans.push((start, self.edges.len()));
        self.vals.push(value);
        S(self.vals.len() - 1)
    }

    pub fn var(&mut self, value: f64) -> S {
        self.node(value, [])
    }

    pub fn constant(&mut self, value: f64) -> S {
        self.node(value, [])
    }

    pub fn value(&self, s: S) -> f64 {
        self.vals[s.0]
    }

    pub fn add(&mut self, a: S, b: S) -> S {
        self.node(self.vals[a.0] + self.vals[b.0], [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: S, b: S) -> S {
        self.node(self.vals[a.0] - self.vals[b.0], [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: S, b: S) -> S {
        let (x, y) = (self.vals[a.0], self.vals[b.0]);
        self.node(x * y, [(a, y), (b, x)])
    }

    pub fn div(&mut self, a: S, b: S) -> S {
        let (x, y) = (self.vals[a.0], self.vals[b.0]);
        self.node(x / y, [(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn scale(&mut self, a: S, c: f64) -> S {
        self.node(self.vals[a.0] * c, [(a, c)])
    }

    pub fn add_const(&mut self, a: S, c: f64) -> S {
        self.node(self.vals[a.0] + c, [(a, 1.0)])
    }

    pub fn neg(&mut self, a: S) -> S {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: S) -> S {
        let e = self.vals[a.0].exp();
        self.node(e, [(a, e)])
    }

    pub fn ln(&mut self, a: S) -> S {
        let x = self.vals[a.0];
        self.node(x.ln(), [(a, 1.0 / x)])
    }

    pub fn square(&mut self, a: S) -> S {
        let x = self.vals[a.0];
        self.node(x * x, [(a, 2.0 * x)])
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: S) -> S {
        let r = self.vals[a.0].sqrt();
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.node(r, [(a, d)])
    }

    /// `max(a, 0)`.
    pub fn hinge(&mut self, a: S) -> S {
        let x = self.vals[a.0];
        if x > 0.0 {
            self.node(x, [(a, 1.0)])
        } else {
            self.node(0.0, [])
        }
    }

    pub fn sum(&mut self, xs: &[S]) -> S {
        let v = xs.iter().map(|s| self.vals[s.0]).sum();
        self.node(v, xs.iter().map(|&s| (s, 1.0)).collect::<Vec<_>>())
    }

    pub fn mean(&mut self, xs: &[S]) -> S {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// Largest element; the gradient goes to the first maximizer.
    pub fn max(&mut self, xs: &[S]) -> S {
        let best = xs
            .iter()
            .copied()
            .reduce(|a, b| if self.vals[b.0] > self.vals[a.0] { b } else { a })
            .expect("max of an empty set");
        self.node(self.vals[best.0], [(best, 1.0)])
    }

    /// Smallest element; the gradient goes to the first minimizer.
    pub fn min(&mut self, xs: &[S]) -> S {
        let best = xs
            .iter()
            .copied()
            .reduce(|a, b| if self.vals[b.0] < self.vals[a.0] { b } else { a })
            .expect("min of an empty set");
        self.node(self.vals[best.0], [(best, 1.0)])
    }

    pub fn dot(&mut self, a: &[S], b: &[S]) -> S {
        let v = a.iter().zip(b).map(|(x, y)| self.vals[x.0] * self.vals[y.0]).sum();
        let parents: Vec<(S, f64)> = a
            .iter()
            .zip(b)
            .flat_map(|(&x, &y)| [(x, self.vals[y.0]), (y, self.vals[x.0])])
            .collect();
        self.node(v, parents)
    }

    /// Squared Euclidean distance.
    pub fn sq_dist(&mut self, a: &[S], b: &[S]) -> S {
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| self.vals[x.0] - self.vals[y.0]).collect();
        let v = diffs.iter().map(|d| d * d).sum();
        let parents: Vec<(S, f64)> = a
            .iter()
            .zip(b)
            .zip(&diffs)
            .flat_map(|((&x, &y), &d)| [(x, 2.0 * d), (y, -2.0 * d)])
            .collect();
        self.node(v, parents)
    }

    /// Euclidean distance (zero gradient at coincident points).
    pub fn dist(&mut self, a: &[S], b: &[S]) -> S {
        let sq = self.sq_dist(a, b);
        self.sqrt(sq)
    }

    /// `log(sum exp(x))`, shifted by the (constant) maximum for stability.
    pub fn logsumexp(&mut self, xs: &[S]) -> S {
        let m = xs.iter().map(|s| self.vals[s.0]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|s| (self.vals[s.0] - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let parents: Vec<(S, f64)> = xs.iter().zip(&exps).map(|(&s, e)| (s, e / z)).collect();
        self.node(m + z.ln(), parents)
    }

    /// Vector divided by its Euclidean norm.
    pub fn normalize(&mut self, v: &[S]) -> Vec<S> {
        let sq = self.dot(v, v);
        let n = self.sqrt(sq);
        v.iter().map(|&x| self.div(x, n)).collect()
    }

    /// Adjoint of every node w.r.t. `out`.
    pub fn gradient(&self, out: S) -> Vec<f64> {
        let mut adj = vec![0.0; out.0 + 1];
        adj[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = self.spans[i];
            for &(p, d) in &self.edges[s..e] {
                adj[p] += a * d;
            }
        }
        adj
    }

    pub fn grad_of(adj: &[f64], s: S) -> f64 {
        adj.get(s.0).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_division() {
        let mut t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(2.0);
        let q = t.div(x, y);
        let e = t.exp(q);
        let adj = t.gradient(e);
        let v = 1.5f64.exp();
        assert!((Tape::grad_of(&adj, x) - v / 2.0).abs() < 1e-12);
        assert!((Tape::grad_of(&adj, y) + v * 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_is_stable() {
        let mut t = Tape::new();
        let xs: Vec<S> = [1000.0, 1000.0].iter().map(|&v| t.var(v)).collect();
        let l = t.logsumexp(&xs);
        assert!((t.value(l) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
