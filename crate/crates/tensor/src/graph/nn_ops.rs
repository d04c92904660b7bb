use super::{GradSink, Graph, Op, Var};
use crate::error::{dim_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, split_axis};

/// Calls `f(offset_of_first, stride)` for every 1-D lane along `axis`.
fn for_lanes(outer: usize, len: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: isize, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, ax);
        let x = self.data(a);
        let mut out = vec![S::zero(); x.len()];
        for_lanes(outer, len, inner, |base, stride| {
            let mut mx = S::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[base + l * stride]);
            }
            let mut z = S::zero();
            for l in 0..len {
                z += (x[base + l * stride] - mx).exp();
            }
            let lz = z.ln();
            for l in 0..len {
                let i = base + l * stride;
                out[i] = if log { x[i] - mx - lz } else { (x[i] - mx).exp() / z };
            }
        });
        let op = if log { Op::LogSoftmax { input: a, axis: ax } } else { Op::Softmax { input: a, axis: ax } };
        Ok(self.push(shape, out, op))
    }

    /// Layer normalization over the last axis with optional affine gain/bias
    /// (each of shape `[C]`).
    pub fn layernorm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::Dimension("layernorm of a scalar".into()))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [c] {
                return dim_err(format!("layernorm parameter {:?} for input {shape:?}", self.shape(p)));
            }
        }
        let eps = S::lit(eps);
        let xd = self.data(x);
        let rows = xd.len() / c;
        let inv_c = S::one() / S::lit(c as f64);
        let mut normalized = vec![S::zero(); xd.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (n, &v) in normalized[r * c..(r + 1) * c].iter_mut().zip(row) {
                *n = (v - mu) * rs;
            }
        }
        let gd = gain.map(|v| self.data(v));
        let bd = bias.map(|v| self.data(v));
        let out = normalized
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let j = i % c;
                let y = gd.map_or(n, |g| n * g[j]);
                bd.map_or(y, |b| y + b[j])
            })
            .collect();
        Ok(self.push(shape, out, Op::LayerNorm { input: x, gain, bias, normalized, rstd }))
    }

    /// Euclidean norm along `axis`.
    pub fn l2norm(&mut self, a: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, ax);
        let x = self.data(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = S::zero();
                for l in 0..len {
                    let v = x[(o * len + l) * inner + i];
                    s += v * v;
                }
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
        }
        Ok(self.push(out_shape, out, Op::L2Norm { input: a, axis: ax }))
    }

    /// Scales every lane along `axis` to unit Euclidean norm. A zero lane has
    /// no direction and is reported as a numeric error.
    pub fn normalize(&mut self, a: Var, axis: isize) -> Result<Var> {
        let n = self.l2norm(a, axis, true)?;
        if let Some(pos) = self.data(n).iter().position(|&v| v == S::zero() || !v.is_finite()) {
            return Err(TensorError::Numeric(format!(
                "cannot normalize lane {pos} of a {:?} tensor: norm is {}",
                self.shape(a),
                self.data(n)[pos]
            )));
        }
        self.div(a, n)
    }
}

pub(super) fn backward_softmax<S: Scalar>(input: Var, axis: usize, y: &[S], g: &[S], sink: &mut GradSink<'_, S>) {
    let (outer, len, inner) = split_axis(sink.shape(input), axis);
    let mut gx = vec![S::zero(); y.len()];
    for_lanes(outer, len, inner, |base, stride| {
        let mut dot = S::zero();
        for l in 0..len {
            let i = base + l * stride;
            dot += g[i] * y[i];
        }
        for l in 0..len {
            let i = base + l * stride;
            gx[i] = y[i] * (g[i] - dot);
        }
    });
    sink.add_to(input, &gx);
}

pub(super) fn backward_log_softmax<S: Scalar>(
    input: Var,
    axis: usize,
    y: &[S],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let (outer, len, inner) = split_axis(sink.shape(input), axis);
    let mut gx = vec![S::zero(); y.len()];
    for_lanes(outer, len, inner, |base, stride| {
        let mut gsum = S::zero();
        for l in 0..len {
            gsum += g[base + l * stride];
        }
        for l in 0..len {
            let i = base + l * stride;
            gx[i] = g[i] - y[i].exp() * gsum;
        }
    });
    sink.add_to(input, &gx);
}

pub(super) fn backward_layernorm<S: Scalar>(
    input: Var,
    gain: Option<Var>,
    bias: Option<Var>,
    normalized: &[S],
    rstd: &[S],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let c = *sink.shape(input).last().expect("rank checked in forward");
    let rows = rstd.len();
    let gd = gain.map(|v| sink.data(v));
    if let Some(b) = bias {
        let mut gb = vec![S::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                gb[j] += g[r * c + j];
            }
        }
        sink.add_to(b, &gb);
    }
    if let Some(gv) = gain {
        let mut gg = vec![S::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                gg[j] += g[r * c + j] * normalized[r * c + j];
            }
        }
        sink.add_to(gv, &gg);
    }
    if sink.slot(input).is_some() {
        let inv_c = S::one() / S::lit(c as f64);
        let mut gx = vec![S::zero(); g.len()];
        let mut gn = vec![S::zero(); c];
        for r in 0..rows {
            let off = r * c;
            for j in 0..c {
                gn[j] = gd.map_or(g[off + j], |w| g[off + j] * w[j]);
            }
            let mean_gn = gn.iter().copied().sum::<S>() * inv_c;
            let mean_gnx = gn.iter().zip(&normalized[off..off + c]).map(|(&a, &b)| a * b).sum::<S>() * inv_c;
            for j in 0..c {
                gx[off + j] = rstd[r] * (gn[j] - mean_gn - normalized[off + j] * mean_gnx);
            }
        }
        sink.add_to(input, &gx);
    }
}

pub(super) fn backward_l2norm<S: Scalar>(input: Var, axis: usize, norms: &[S], g: &[S], sink: &mut GradSink<'_, S>) {
    let (outer, len, inner) = split_axis(sink.shape(input), axis);
    let x = sink.data(input);
    if let Some(gi) = sink.slot(input) {
        for o in 0..outer {
            for i in 0..inner {
                let n = norms[o * inner + i];
                // Subgradient 0 at the origin.
                if n == S::zero() {
                    continue;
                }
                let scale = g[o * inner + i] / n;
                for l in 0..len {
                    let k = (o * len + l) * inner + i;
                    gi[k] += scale * x[k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(vec![2, 4], 3.0));
        let y = g.softmax(x, -1).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_along_inner_axis_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let s = g.sum(y, 0, false).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_lane() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(g.normalize(x, -1).is_err());
    }

    #[test]
    fn l2norm_hand_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let n = g.l2norm(x, -1, false).unwrap();
        assert_eq!(g.data(n), &[5.0]);
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = g.layernorm(x, None, None, 0.0).unwrap();
        for row in g.data(y).chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
