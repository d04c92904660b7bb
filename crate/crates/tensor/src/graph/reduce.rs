use super::{GradSink, Graph, Op, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, split_axis};

impl<S: Scalar> Graph<S> {
    fn reduce_axis(&mut self, a: Var, axis: isize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, ax);
        let x = self.data(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = S::one() / S::lit(len as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
        }
        let op = if mean { Op::Mean { input: a, axis: ax } } else { Op::Sum { input: a, axis: ax } };
        Ok(self.push(out_shape, out, op))
    }

    pub fn sum(&mut self, a: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(a, axis, keepdim, false)
    }

    pub fn mean(&mut self, a: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(a, axis, keepdim, true)
    }

    /// Sum of every element, as a shape-`[]` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }
}

pub(super) fn backward_sum<S: Scalar>(input: Var, axis: usize, factor: S, g: &[S], sink: &mut GradSink<'_, S>) {
    let (outer, len, inner) = split_axis(sink.shape(input), axis);
    if let Some(gi) = sink.slot(input) {
        for o in 0..outer {
            let src = &g[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, &v) in gi[base..base + inner].iter_mut().zip(src) {
                    *d += v * factor;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn mean_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(vec![3, 4, 2], 2.5));
        for axis in 0..3 {
            let m = g.mean(x, axis, false).unwrap();
            assert!(g.data(m).iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn keepdim_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::ones(vec![2, 3, 4]));
        let a = g.sum(x, 1, true).unwrap();
        let b = g.sum(x, -1, false).unwrap();
        assert_eq!(g.shape(a), &[2, 1, 4]);
        assert_eq!(g.shape(b), &[2, 3]);
        assert!(g.data(a).iter().all(|&v| v == 3.0));
        assert!(g.sum(x, 3, false).is_err());
    }
}
