use super::{GradSink, Graph, Op, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_offsets, broadcast_shape, numel};

struct MatmulPlan {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// Per output batch: (batch index into a, batch index into b).
    batches: Vec<(usize, usize)>,
}

fn plan(sa: &[usize], sb: &[usize]) -> Result<MatmulPlan> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(TensorError::Dimension(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(TensorError::Dimension(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let batch = broadcast_shape(ba, bb)
        .map_err(|_| TensorError::Dimension(format!("matmul batch dimensions of {sa:?} and {sb:?} do not broadcast")))?;
    let oa = broadcast_offsets(&batch, ba);
    let ob = broadcast_offsets(&batch, bb);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan { out_shape, m, k, n, batches: oa.into_iter().zip(ob).collect() })
}

/// c += a·b with a: m×k, b: k×n.
fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// ga += g·bᵀ with g: m×n, b: k×n.
fn mm_acc_bt<S: Scalar>(g: &[S], b: &[S], ga: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            ga[i * k + p] += s;
        }
    }
}

/// gb += aᵀ·g with a: m×k, g: m×n.
fn mm_acc_at<S: Scalar>(a: &[S], g: &[S], gb: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (x, &y) in gbrow.iter_mut().zip(grow) {
                *x += av * y;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (p.m, p.k, p.n);
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![S::zero(); numel(&p.out_shape)];
        for (bi, &(ia, ib)) in p.batches.iter().enumerate() {
            mm_acc(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(p.out_shape, out, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Dimension(format!("transpose needs rank >= 2, got {:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }
}

pub(super) fn backward_matmul<S: Scalar>(a: Var, b: Var, _out: &[usize], g: &[S], sink: &mut GradSink<'_, S>) {
    let p = plan(sink.shape(a), sink.shape(b)).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let da = sink.data(a);
    let db = sink.data(b);
    if let Some(ga) = sink.slot(a) {
        for (bi, &(ia, ib)) in p.batches.iter().enumerate() {
            mm_acc_bt(
                &g[bi * m * n..(bi + 1) * m * n],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut ga[ia * m * k..(ia + 1) * m * k],
                m,
                k,
                n,
            );
        }
    }
    if let Some(gb) = sink.slot(b) {
        for (bi, &(ia, ib)) in p.batches.iter().enumerate() {
            mm_acc_at(
                &da[ia * m * k..(ia + 1) * m * k],
                &g[bi * m * n..(bi + 1) * m * n],
                &mut gb[ib * k * n..(ib + 1) * k * n],
                m,
                k,
                n,
            );
        }
    }
}
