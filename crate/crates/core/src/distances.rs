//! Sequence distance (soft ordered temporal alignment over cosine costs),
//! token-wise consistency distance, and the distance-to-probability head.

use fsar_tensor::{CustomOp, Graph, Scalar, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings of the sequence distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqDisConfig {
    /// Smooth-min temperature.
    pub gamma: f64,
    /// Average the alignment of the cost matrix with that of its transpose.
    pub bidirectional: bool,
}

impl Default for SeqDisConfig {
    fn default() -> Self {
        Self { gamma: 0.1, bidirectional: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5 }
    }
}

/// `-gamma * log(sum(exp(-x / gamma)))`, shifted by the minimum.
pub fn softmin<S: Scalar>(xs: &[S], gamma: S) -> S {
    let m = xs.iter().copied().fold(S::infinity(), S::min);
    if m == S::infinity() {
        return m;
    }
    let s: S = xs.iter().map(|&x| (-(x - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Accumulated-cost table of the padded alignment for one `tq x ts` cost
/// matrix. The table has `ts + 2` columns; columns `0` and `ts + 1` are the
/// zero-cost padding. Returns the table, whose last cell is the distance.
///
/// Moves into `(i, j)`: from `(i, j-1)` and `(i-1, j-1)` anywhere, and from
/// `(i-1, j)` only in the padding columns.
pub fn otam_table<S: Scalar>(cost: &[S], tq: usize, ts: usize, gamma: S) -> Vec<S> {
    let w = ts + 2;
    let d = |i: usize, j: usize| if j == 0 || j == ts + 1 { S::zero() } else { cost[i * ts + j - 1] };
    let mut r = vec![S::zero(); tq * w];
    for j in 1..w {
        r[j] = r[j - 1] + d(0, j);
    }
    let mut cand = [S::zero(); 3];
    for i in 1..tq {
        r[i * w] = r[(i - 1) * w];
        for j in 1..w {
            cand[0] = r[i * w + j - 1];
            cand[1] = r[(i - 1) * w + j - 1];
            let n = if j == ts + 1 {
                cand[2] = r[(i - 1) * w + j];
                3
            } else {
                2
            };
            r[i * w + j] = d(i, j) + softmin(&cand[..n], gamma);
        }
    }
    r
}

/// Gradient of the last table cell with respect to `cost`.
pub fn otam_backward<S: Scalar>(cost: &[S], table: &[S], tq: usize, ts: usize, gamma: S) -> Vec<S> {
    let w = ts + 2;
    let d = |i: usize, j: usize| if j == 0 || j == ts + 1 { S::zero() } else { cost[i * ts + j - 1] };
    let mut e = vec![S::zero(); tq * w];
    e[tq * w - 1] = S::one();
    let mut grad = vec![S::zero(); tq * ts];
    for i in (0..tq).rev() {
        for j in (0..w).rev() {
            let cell = i * w + j;
            let ec = e[cell];
            if j >= 1 && j <= ts {
                grad[i * ts + j - 1] = ec;
            }
            if ec == S::zero() {
                continue;
            }
            let base = table[cell] - d(i, j);
            let push = |p: usize, e: &mut [S]| {
                let wgt = ((base - table[p]) / gamma).exp();
                e[p] += ec * wgt;
            };
            if i == 0 {
                if j > 0 {
                    push(cell - 1, &mut e);
                }
            } else if j == 0 {
                push(cell - w, &mut e);
            } else {
                push(cell - 1, &mut e);
                push(cell - w - 1, &mut e);
                if j == ts + 1 {
                    push(cell - w, &mut e);
                }
            }
        }
    }
    grad
}

struct SoftOtam<S> {
    tq: usize,
    ts: usize,
    gamma: S,
    tables: Vec<Vec<S>>,
}

impl<S: Scalar> CustomOp<S> for SoftOtam<S> {
    fn name(&self) -> &str {
        "soft_otam"
    }

    fn backward(&self, inputs: &[&[S]], _output: &[S], grad_out: &[S]) -> Vec<Option<Vec<S>>> {
        let cell = self.tq * self.ts;
        let mut grad = Vec::with_capacity(inputs[0].len());
        for (b, table) in self.tables.iter().enumerate() {
            let c = &inputs[0][b * cell..(b + 1) * cell];
            let g = otam_backward(c, table, self.tq, self.ts, self.gamma);
            grad.extend(g.into_iter().map(|x| x * grad_out[b]));
        }
        vec![Some(grad)]
    }
}

/// Soft alignment distance of every matrix in a batch of costs `[.., Tq, Ts]`,
/// giving `[..]`.
pub fn soft_otam<S: Scalar>(g: &mut Graph<S>, cost: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("smooth-min gamma must be positive, got {gamma}")));
    }
    let shape = g.shape(cost).to_vec();
    if shape.len() < 2 {
        return Err(TensorError::Dimension(format!("cost matrix needs rank >= 2, got {shape:?}")).into());
    }
    let (tq, ts) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch_shape = shape[..shape.len() - 2].to_vec();
    let gm = S::lit(gamma);
    let data = g.data(cost);
    let mut tables = Vec::with_capacity(data.len() / (tq * ts));
    let mut out = Vec::with_capacity(tables.capacity());
    for c in data.chunks_exact(tq * ts) {
        let t = otam_table(c, tq, ts, gm);
        out.push(t[t.len() - 1]);
        tables.push(t);
    }
    if let Some(k) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sequence distance {k} of the batch is not finite")));
    }
    Ok(g.custom(&[cost], batch_shape, out, Box::new(SoftOtam { tq, ts, gamma: gm, tables }))?)
}

/// `1 - cos` between every query frame and every support frame:
/// `[.., Tq, C] x [.., Ts, C] -> [.., Tq, Ts]` with broadcast batch axes.
pub fn cost_matrix<S: Scalar>(g: &mut Graph<S>, query: Var, support: Var) -> Result<Var> {
    let qc = *g.shape(query).last().unwrap_or(&0);
    let sc = *g.shape(support).last().unwrap_or(&0);
    if qc != sc {
        return Err(TensorError::Dimension(format!(
            "frame widths differ: query {:?}, support {:?}",
            g.shape(query),
            g.shape(support)
        ))
        .into());
    }
    let q = g.normalize(query, -1).map_err(zero_frame)?;
    let s = g.normalize(support, -1).map_err(zero_frame)?;
    let st = g.transpose_last(s)?;
    let cos = g.matmul(q, st)?;
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

fn zero_frame(e: TensorError) -> Error {
    match e {
        TensorError::Numeric(m) => Error::Numeric(format!("cosine undefined: {m}")),
        other => other.into(),
    }
}

/// Sequence distance between query and support sequences with broadcast batch
/// axes: `[.., Tq, C] x [.., Ts, C] -> [..]`.
pub fn seq_dis<S: Scalar>(g: &mut Graph<S>, query: Var, support: Var, cfg: &SeqDisConfig) -> Result<Var> {
    let cost = cost_matrix(g, query, support)?;
    let fwd = soft_otam(g, cost, cfg.gamma)?;
    if !cfg.bidirectional {
        return Ok(fwd);
    }
    let ct = g.transpose_last(cost)?;
    let bwd = soft_otam(g, ct, cfg.gamma)?;
    let sum = g.add(fwd, bwd)?;
    Ok(g.scale(sum, 0.5))
}

/// Distance of every query `[Q, T, C]` to every prototype `[N, T, C]`, giving
/// `[Q, N]`.
pub fn pairwise_seq_dis<S: Scalar>(
    g: &mut Graph<S>,
    queries: Var,
    prototypes: Var,
    cfg: &SeqDisConfig,
) -> Result<Var> {
    let (qs, ps) = (g.shape(queries).to_vec(), g.shape(prototypes).to_vec());
    if qs.len() != 3 || ps.len() != 3 {
        return Err(TensorError::Dimension(format!("expected [Q,T,C] and [N,T,C], got {qs:?} and {ps:?}")).into());
    }
    let q = g.reshape(queries, &[qs[0], 1, qs[1], qs[2]])?;
    let p = g.reshape(prototypes, &[1, ps[0], ps[1], ps[2]])?;
    seq_dis(g, q, p, cfg)
}

/// Mean over tokens of the Euclidean norm of the token-wise difference:
/// `[.., P, C] x [.., P, C] -> [..]`.
pub fn con_dis<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::Dimension(format!(
            "consistency distance needs equal shapes, got {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        ))
        .into());
    }
    if g.shape(a).len() < 2 {
        return Err(TensorError::Dimension(format!("expected [.., P, C], got {:?}", g.shape(a))).into());
    }
    let diff = g.sub(a, b)?;
    let norms = g.l2norm(diff, -1, false)?;
    Ok(g.mean(norms, -1, false)?)
}

/// `lambda1 * d_padm + lambda2 * d_spm`.
pub fn combined_distance<S: Scalar>(g: &mut Graph<S>, d_padm: Var, d_spm: Var, w: &DistanceWeights) -> Result<Var> {
    let a = g.scale(d_padm, w.lambda1);
    let b = g.scale(d_spm, w.lambda2);
    Ok(g.add(a, b)?)
}

/// Softmax of negated distances over the last axis.
pub fn class_probabilities_var<S: Scalar>(g: &mut Graph<S>, distances: Var) -> Result<Var> {
    let n = g.neg(distances);
    Ok(g.softmax(n, -1)?)
}

/// `exp(-d_o) / sum_n exp(-d_n)`, shifted by the smallest distance.
pub fn class_probabilities(distances: &[f64]) -> Vec<f64> {
    let m = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|&d| (m - d).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsar_tensor::Tensor;

    #[test]
    fn softmin_limits() {
        let v = softmin(&[1.0f64, 1.0], 0.1);
        assert!((v - (1.0 - 0.1 * 2f64.ln())).abs() < 1e-12);
        assert!((softmin(&[3.0f64, 0.5, 2.0], 1e-4) - 0.5).abs() < 1e-9);
        assert_eq!(softmin(&[1e6f64], 0.1), 1e6);
    }

    #[test]
    fn single_frames_give_single_cell() {
        let mut g = Graph::<f64>::new();
        let q = g.constant_from(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let s = g.constant_from(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let d = seq_dis(&mut g, q, s, &SeqDisConfig::default()).unwrap();
        assert!((g.item(d) - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn zero_frame_is_numeric_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = g.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(seq_dis(&mut g, q, s, &SeqDisConfig::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn con_dis_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant_from(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let b = g.constant_from(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let d = con_dis(&mut g, a, b).unwrap();
        assert_eq!(g.item(d), 5.0);
        let z = con_dis(&mut g, a, a).unwrap();
        assert_eq!(g.item(z), 0.0);
        let c = g.constant(&Tensor::zeros(vec![2, 2]));
        assert!(con_dis(&mut g, a, c).is_err());
    }

    #[test]
    fn combined_hand_value() {
        let mut g = Graph::<f64>::new();
        let a = g.constant_from(vec![], vec![2.0]).unwrap();
        let b = g.constant_from(vec![], vec![4.0]).unwrap();
        let d = combined_distance(&mut g, a, b, &DistanceWeights::default()).unwrap();
        assert_eq!(g.item(d), 4.0);
    }

    #[test]
    fn probability_head() {
        let p = class_probabilities(&[0.0, 2f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = class_probabilities(&[0.3; 5]);
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-12));
        let p = class_probabilities(&[0.0, 1e6]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }
}
