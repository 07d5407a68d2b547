//! Re-identification losses over scalar-tape embeddings.
//!
//! `d` is the Euclidean distance throughout. Every loss takes the rows of
//! an `N x d` matrix of tape variables plus integer identity labels.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, S};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Trace, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BatchHard,
    Triplet,
    TripletMargin,
    Contrastive,
    Quadruplet,
    Hap2s,
    Magnet,
    CrossEntropy,
    CosineSoftmax,
    PartCe,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::BatchHard,
        LossKind::Triplet,
        LossKind::TripletMargin,
        LossKind::Contrastive,
        LossKind::Quadruplet,
        LossKind::Hap2s,
        LossKind::Magnet,
        LossKind::CrossEntropy,
        LossKind::CosineSoftmax,
        LossKind::PartCe,
    ];

    /// Losses that need a classifier on top of the embedding.
    pub fn needs_classifier(self) -> bool {
        matches!(self, LossKind::CrossEntropy | LossKind::CosineSoftmax | LossKind::PartCe)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// `m` (and `m_1` for the quadruplet loss).
    pub margin: f64,
    /// `m_2` of the quadruplet loss.
    pub margin2: f64,
    /// Cosine-softmax scale.
    pub kappa: f64,
    /// Temperature of the HAP2S point-to-set weighting.
    pub hap2s_sigma: f64,
    /// Number of embedding chunks for the part-based loss.
    pub parts: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            margin: 0.3,
            margin2: 0.15,
            kappa: 16.0,
            hap2s_sigma: 1.0,
            parts: 2,
        }
    }
}

fn check_batch(f: &[Vec<S>], labels: &[usize], min: usize) -> Result<()> {
    if f.len() != labels.len() {
        return Err(Error::shape("loss", "label count", f.len(), labels.len()));
    }
    if f.len() < min {
        return Err(Error::invalid(format!("loss needs at least {min} samples, got {}", f.len())));
    }
    Ok(())
}

fn distances(t: &mut Tape, f: &[Vec<S>]) -> Vec<Vec<Option<S>>> {
    let n = f.len();
    let mut d = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = t.dist(&f[i], &f[j]);
            d[i][j] = Some(v);
            d[j][i] = Some(v);
        }
    }
    d
}

/// `1/N_s sum_a [m + max_p d(a,p) - min_n d(a,n)]_+` over anchors that have
/// both a positive and a negative in the batch.
pub fn batch_hard(t: &mut Tape, f: &[Vec<S>], labels: &[usize], margin: f64) -> Result<S> {
    check_batch(f, labels, 2)?;
    let d = distances(t, f);
    let mut terms = Vec::new();
    for a in 0..f.len() {
        let pos: Vec<S> = (0..f.len()).filter(|&p| p != a && labels[p] == labels[a]).filter_map(|p| d[a][p]).collect();
        let neg: Vec<S> = (0..f.len()).filter(|&n| labels[n] != labels[a]).filter_map(|n| d[a][n]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let hp = t.max(&pos);
        let hn = t.min(&neg);
        let diff = t.sub(hp, hn);
        let arg = t.add_const(diff, margin);
        terms.push(t.hinge(arg));
    }
    if terms.is_empty() {
        return Err(Error::invalid("batch-hard loss: no anchor has both a positive and a negative"));
    }
    Ok(t.mean(&terms))
}

fn triplets(labels: &[usize]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let n = labels.len();
    (0..n).flat_map(move |a| {
        (0..n)
            .filter(move |&p| p != a && labels[p] == labels[a])
            .flat_map(move |p| (0..n).filter(move |&q| labels[q] != labels[a]).map(move |q| (a, p, q)))
    })
}

/// Mean of `[m + d(a,p) - d(a,n)]_+` over every valid triplet; `m = 0`
/// gives the plain triplet loss.
pub fn triplet(t: &mut Tape, f: &[Vec<S>], labels: &[usize], margin: f64) -> Result<S> {
    check_batch(f, labels, 3)?;
    let d = distances(t, f);
    let mut terms = Vec::new();
    for (a, p, n) in triplets(labels) {
        let diff = t.sub(d[a][p].expect("a != p"), d[a][n].expect("a != n"));
        let arg = t.add_const(diff, margin);
        terms.push(t.hinge(arg));
    }
    if terms.is_empty() {
        return Err(Error::invalid("triplet loss: batch has no (anchor, positive, negative) triplet"));
    }
    Ok(t.mean(&terms))
}

/// `1/(2N) sum [(1-y) d^2 + y max(0, m - d^2)]` over all unordered pairs,
/// with `y = 1` for pairs of different identities.
pub fn contrastive(t: &mut Tape, f: &[Vec<S>], labels: &[usize], margin: f64) -> Result<S> {
    check_batch(f, labels, 2)?;
    let mut terms = Vec::new();
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            let d2 = t.sq_dist(&f[i], &f[j]);
            if labels[i] == labels[j] {
                terms.push(d2);
            } else {
                let neg = t.neg(d2);
                let arg = t.add_const(neg, margin);
                terms.push(t.hinge(arg));
            }
        }
    }
    let s = t.sum(&terms);
    Ok(t.scale(s, 0.5 / terms.len() as f64))
}

/// Triplet term with margin `m1` plus the pair-of-negatives term with
/// margin `m2` (`y_a = y_p`, `y_n != y_a`, `y_k` differing from both);
/// each term is averaged over its own tuples.
pub fn quadruplet(t: &mut Tape, f: &[Vec<S>], labels: &[usize], m1: f64, m2: f64) -> Result<S> {
    check_batch(f, labels, 4)?;
    let d = distances(t, f);
    let n = f.len();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (a, p, q) in triplets(labels) {
        let dap = d[a][p].expect("a != p");
        let diff = t.sub(dap, d[a][q].expect("a != n"));
        let arg = t.add_const(diff, m1);
        first.push(t.hinge(arg));
        for k in (0..n).filter(|&k| labels[k] != labels[q] && labels[k] != labels[a]) {
            let diff = t.sub(dap, d[q][k].expect("n != k"));
            let arg = t.add_const(diff, m2);
            second.push(t.hinge(arg));
        }
    }
    if first.is_empty() || second.is_empty() {
        return Err(Error::invalid("quadruplet loss needs a positive pair and two further identities"));
    }
    let a = t.mean(&first);
    let b = t.mean(&second);
    Ok(t.add(a, b))
}

/// Softmax-weighted distance from an anchor to a set: weights grow with
/// `sign * d / sigma`, so `sign = +1` emphasizes far members.
fn point_to_set(t: &mut Tape, ds: &[S], sign: f64, sigma: f64) -> S {
    let logits: Vec<S> = ds.iter().map(|&d| t.scale(d, sign / sigma)).collect();
    let lse = t.logsumexp(&logits);
    let weighted: Vec<S> = ds
        .iter()
        .zip(&logits)
        .map(|(&d, &l)| {
            let shifted = t.sub(l, lse);
            let w = t.exp(shifted);
            t.mul(w, d)
        })
        .collect();
    t.sum(&weighted)
}

/// Hard-aware point-to-set loss: `[m + d(a, S_p) - d(a, S_n)]_+` averaged
/// over anchors with soft-hard weighted set distances.
pub fn hap2s(t: &mut Tape, f: &[Vec<S>], labels: &[usize], margin: f64, sigma: f64) -> Result<S> {
    check_batch(f, labels, 2)?;
    if sigma <= 0.0 {
        return Err(Error::invalid("HAP2S temperature must be positive"));
    }
    let d = distances(t, f);
    let mut terms = Vec::new();
    for a in 0..f.len() {
        let pos: Vec<S> = (0..f.len()).filter(|&p| p != a && labels[p] == labels[a]).filter_map(|p| d[a][p]).collect();
        let neg: Vec<S> = (0..f.len()).filter(|&n| labels[n] != labels[a]).filter_map(|n| d[a][n]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let sp = point_to_set(t, &pos, 1.0, sigma);
        let sn = point_to_set(t, &neg, -1.0, sigma);
        let diff = t.sub(sp, sn);
        let arg = t.add_const(diff, margin);
        terms.push(t.hinge(arg));
    }
    if terms.is_empty() {
        return Err(Error::invalid("HAP2S loss: no anchor has both a positive and a negative"));
    }
    Ok(t.mean(&terms))
}

/// Magnet loss with batch class means `mu_k` and pooled variance
/// `sigma^2 = 1/(N-1) sum_i ||f_i - mu(f_i)||^2`:
/// `1/N sum_i [-log(exp(-d(f_i, mu(f_i))/(2 sigma^2) - m) / sum_k exp(-d(f_i, mu_k)/(2 sigma^2)))]_+`.
pub fn magnet(t: &mut Tape, f: &[Vec<S>], labels: &[usize], margin: f64) -> Result<S> {
    check_batch(f, labels, 2)?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("magnet loss needs at least two classes in the batch"));
    }
    let dim = f[0].len();
    let means: Vec<Vec<S>> = classes
        .iter()
        .map(|&c| {
            let members: Vec<usize> = (0..f.len()).filter(|&i| labels[i] == c).collect();
            (0..dim)
                .map(|k| {
                    let col: Vec<S> = members.iter().map(|&i| f[i][k]).collect();
                    t.mean(&col)
                })
                .collect()
        })
        .collect();
    let class_of = |y: usize| classes.binary_search(&y).expect("label is a class");
    let spread: Vec<S> = (0..f.len()).map(|i| t.sq_dist(&f[i], &means[class_of(labels[i])])).collect();
    let total = t.sum(&spread);
    let var = t.scale(total, 1.0 / (f.len() - 1) as f64);
    if t.value(var) <= 0.0 {
        return Err(Error::invalid("magnet loss: zero within-class variance"));
    }
    let two_var = t.scale(var, 2.0);
    let mut terms = Vec::new();
    for i in 0..f.len() {
        let logits: Vec<S> = means
            .iter()
            .map(|mu| {
                let d = t.dist(&f[i], mu);
                let q = t.div(d, two_var);
                t.neg(q)
            })
            .collect();
        let own = logits[class_of(labels[i])];
        let own = t.add_const(own, -margin);
        let lse = t.logsumexp(&logits);
        let nll = t.sub(lse, own);
        terms.push(t.hinge(nll));
    }
    Ok(t.mean(&terms))
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(t: &mut Tape, logits: &[Vec<S>], labels: &[usize]) -> Result<S> {
    check_batch(logits, labels, 1)?;
    let classes = logits[0].len();
    let mut terms = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        let lse = t.logsumexp(row);
        terms.push(t.sub(lse, row[y]));
    }
    Ok(t.mean(&terms))
}

/// Cross-entropy over `kappa * cos(W_k, f_i)`.
pub fn cosine_softmax(t: &mut Tape, f: &[Vec<S>], weight: &[Vec<S>], labels: &[usize], kappa: f64) -> Result<S> {
    if kappa <= 0.0 {
        return Err(Error::invalid("cosine-softmax scale must be positive"));
    }
    let zero = |t: &Tape, v: &[S]| v.iter().all(|s| t.value(*s) == 0.0);
    if f.iter().chain(weight).any(|v| zero(t, v)) {
        return Err(Error::invalid("cosine softmax: zero-norm vector"));
    }
    let wn: Vec<Vec<S>> = weight.iter().map(|w| t.normalize(w)).collect();
    let logits: Vec<Vec<S>> = f
        .iter()
        .map(|row| {
            let fnorm = t.normalize(row);
            wn.iter()
                .map(|w| {
                    let c = t.dot(w, &fnorm);
                    t.scale(c, kappa)
                })
                .collect()
        })
        .collect();
    cross_entropy(t, &logits, labels)
}

/// Sum of per-part cross-entropies.
pub fn part_ce(t: &mut Tape, part_logits: &[Vec<Vec<S>>], labels: &[usize]) -> Result<S> {
    if part_logits.is_empty() {
        return Err(Error::invalid("part loss needs at least one part"));
    }
    let parts: Vec<S> = part_logits
        .iter()
        .map(|l| cross_entropy(t, l, labels))
        .collect::<Result<_>>()?;
    Ok(t.sum(&parts))
}

/// Embedding-only (metric) losses by kind.
pub fn metric_loss(t: &mut Tape, kind: LossKind, f: &[Vec<S>], labels: &[usize], p: &LossParams) -> Result<S> {
    match kind {
        LossKind::BatchHard => batch_hard(t, f, labels, p.margin),
        LossKind::Triplet => triplet(t, f, labels, 0.0),
        LossKind::TripletMargin => triplet(t, f, labels, p.margin),
        LossKind::Contrastive => contrastive(t, f, labels, p.margin),
        LossKind::Quadruplet => quadruplet(t, f, labels, p.margin, p.margin2),
        LossKind::Hap2s => hap2s(t, f, labels, p.margin, p.hap2s_sigma),
        LossKind::Magnet => magnet(t, f, labels, p.margin),
        other => Err(Error::invalid(format!("{other:?} needs classifier weights"))),
    }
}

/// Tape variables for every entry of a rank-2 tensor, as rows.
pub fn leaves(t: &mut Tape, m: &Tensor) -> Result<Vec<Vec<S>>> {
    if m.rank() != 2 {
        return Err(Error::invalid(format!("expected a matrix, got shape {:?}", m.shape())));
    }
    Ok(m.data()
        .chunks(m.dim(1))
        .map(|row| row.iter().map(|&v| t.var(f64::from(v))).collect())
        .collect())
}

/// Evaluates a tape loss over the values of matrix-valued trace variables
/// and records it on the trace with its gradient.
pub fn traced_loss<F>(trace: &mut Trace, inputs: &[Var], build: F) -> Result<(Var, f64)>
where
    F: FnOnce(&mut Tape, &[Vec<Vec<S>>]) -> Result<S>,
{
    let mut tape = Tape::new();
    let mats: Vec<Vec<Vec<S>>> = inputs
        .iter()
        .map(|v| leaves(&mut tape, trace.value(*v)))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &mats)?;
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let adj = tape.gradient(out);
    let partials = mats
        .iter()
        .map(|m| m.iter().flatten().map(|s| Tape::grad_of(&adj, *s) as f32).collect())
        .collect();
    let var = trace.custom(inputs.to_vec(), value as f32, partials)?;
    Ok((var, value))
}

/// Metric loss value and gradient on a plain embedding matrix.
pub fn metric_loss_value(kind: LossKind, f: &Tensor, labels: &[usize], p: &LossParams) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let rows = leaves(&mut t, f)?;
    let out = metric_loss(&mut t, kind, &rows, labels, p)?;
    let adj = t.gradient(out);
    Ok((t.value(out), rows.iter().flatten().map(|s| Tape::grad_of(&adj, *s)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(t: &mut Tape, data: &[&[f64]]) -> Vec<Vec<S>> {
        data.iter().map(|r| r.iter().map(|&v| t.var(v)).collect()).collect()
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let mut t = Tape::new();
        let f = rows(&mut t, &[&[1.0, 1.0][..]; 4]);
        let l = batch_hard(&mut t, &f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((t.value(l) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut t = Tape::new();
        let l = rows(&mut t, &[&[0.5; 5][..], &[0.5; 5]]);
        let v = cross_entropy(&mut t, &l, &[1, 4]).unwrap();
        assert!((t.value(v) - 5f64.ln()).abs() < 1e-12);
        let mut t = Tape::new();
        let l = rows(&mut t, &[&[0.0; 5][..]]);
        assert!(cross_entropy(&mut t, &l, &[5]).is_err());
    }

    #[test]
    fn contrastive_boundaries() {
        let mut t = Tape::new();
        let f = rows(&mut t, &[&[1.0, 0.0], &[1.0, 0.0], &[3.0, 0.0]]);
        // pairs: (0,1) positive d=0; (0,2),(1,2) negative d^2=4 >= m
        let l = contrastive(&mut t, &f, &[0, 0, 1], 4.0).unwrap();
        assert_eq!(t.value(l), 0.0);
    }

    #[test]
    fn quadruplet_zero_margins_equal_distances() {
        // points of a regular simplex are pairwise equidistant
        let mut t = Tape::new();
        let s = 1.0 / 2f64.sqrt();
        let f = rows(&mut t, &[&[s, 0.0, 0.0, 0.0], &[0.0, s, 0.0, 0.0], &[0.0, 0.0, s, 0.0], &[0.0, 0.0, 0.0, s]]);
        let l = quadruplet(&mut t, &f, &[0, 0, 1, 2], 0.0, 0.0).unwrap();
        assert!(t.value(l).abs() < 1e-12);
    }

    #[test]
    fn single_part_equals_cross_entropy() {
        let mut t = Tape::new();
        let l = rows(&mut t, &[&[0.2, -1.0, 0.7], &[1.5, 0.1, -0.3]]);
        let a = cross_entropy(&mut t, &l, &[2, 0]).unwrap();
        let b = part_ce(&mut t, std::slice::from_ref(&l), &[2, 0]).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }
}
