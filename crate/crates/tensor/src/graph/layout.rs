use super::{GradSink, Graph, Op, Var};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, numel, split_axis, strides};

impl<S: Scalar> Graph<S> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        let ax = normalize_axis(axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != ax && d != base[i]) {
                return dim_err(format!("concat along axis {ax}: {base:?} vs {s:?}"));
            }
            total += s[ax];
        }
        let (outer, _, inner) = split_axis(&base, ax);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[ax];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[ax] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis: ax }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        if len == 0 || start + len > shape[ax] {
            return dim_err(format!("narrow [{start}, {}) out of range for axis {ax} of {shape:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&shape, ax);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            out.extend_from_slice(&x[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[ax] = len;
        Ok(self.push(out_shape, out, Op::Narrow { input: a, axis: ax, start }))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, sizes: &[usize], axis: isize) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        if sizes.iter().sum::<usize>() != shape[ax] {
            return dim_err(format!("split sizes {sizes:?} do not sum to axis {ax} of {shape:?}"));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(a, ax as isize, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(a), &shape, perm);
        Ok(self.push(out_shape, data, Op::Permute { input: a, perm: perm.to_vec() }))
    }

    /// Gathers slices along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: isize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        if indices.is_empty() {
            return dim_err("index_select with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[ax]) {
            return dim_err(format!("index {bad} out of range for axis {ax} of {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, ax);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let b = (o * len + i) * inner;
                out.extend_from_slice(&x[b..b + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[ax] = indices.len();
        Ok(self.push(out_shape, out, Op::IndexSelect { input: a, axis: ax, indices: indices.to_vec() }))
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if axis > shape.len() {
            return dim_err(format!("unsqueeze axis {axis} for shape {shape:?}"));
        }
        shape.insert(axis, 1);
        self.reshape(a, &shape)
    }
}

fn permute_data<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let r = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(super) fn backward_concat<S: Scalar>(
    inputs: &[Var],
    axis: usize,
    out_shape: &[usize],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let (outer, total, inner) = split_axis(out_shape, axis);
    let mut offset = 0;
    for &v in inputs {
        let len = sink.shape(v)[axis];
        if let Some(gv) = sink.slot(v) {
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                let dst = o * len * inner;
                for (d, &s) in gv[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                    *d += s;
                }
            }
        }
        offset += len;
    }
}

pub(super) fn backward_narrow<S: Scalar>(
    input: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let (outer, full, inner) = split_axis(sink.shape(input), axis);
    let len = out_shape[axis];
    if let Some(gi) = sink.slot(input) {
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            for (d, &s) in gi[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                *d += s;
            }
        }
    }
}

pub(super) fn backward_permute<S: Scalar>(input: Var, perm: &[usize], g: &[S], sink: &mut GradSink<'_, S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| sink.shape(input)[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let back = permute_data(g, &out_shape, &inverse);
    sink.add_to(input, &back);
}

pub(super) fn backward_index_select<S: Scalar>(
    input: Var,
    axis: usize,
    indices: &[usize],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let (outer, len, inner) = split_axis(sink.shape(input), axis);
    let k = indices.len();
    if let Some(gi) = sink.slot(input) {
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let dst = (o * len + i) * inner;
                let src = (o * k + j) * inner;
                for (d, &s) in gi[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn permute_matches_transpose() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = g.transpose_last(x).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn index_select_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.index_select(x, 0, &[1, 1, 0]).unwrap();
        assert_eq!(g.data(y), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(g.index_select(x, 0, &[2]).is_err());
    }

    #[test]
    fn split_rejects_bad_sizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::zeros(vec![4, 2]));
        assert!(g.split(x, &[1, 2], 0).is_err());
        assert!(g.reshape(x, &[3, 3]).is_err());
        assert!(g.permute(x, &[0, 0]).is_err());
    }
}
