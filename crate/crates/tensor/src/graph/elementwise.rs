use super::{GradSink, Graph, Op, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_offsets, broadcast_shape};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn apply<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    // Split by sign so that large |x| saturates to exactly 0 or 1 without overflow.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// tanh approximation of GELU.
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let value = half * x * (S::one() + t);
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (value, deriv)
}

impl<S: Scalar> Graph<S> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let da = self.data(a);
        let db = self.data(b);
        let (shape, data) = if sa == sb {
            (sa, da.iter().zip(db).map(|(&x, &y)| kind.apply(x, y)).collect())
        } else {
            let shape = broadcast_shape(&sa, &sb).map_err(|_| {
                TensorError::Dimension(format!("elementwise operands {sa:?} and {sb:?} do not broadcast"))
            })?;
            let oa = broadcast_offsets(&shape, &sa);
            let ob = broadcast_offsets(&shape, &sb);
            let data = oa.iter().zip(&ob).map(|(&i, &j)| kind.apply(da[i], db[j])).collect();
            (shape, data)
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        Ok(self.push(shape, data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = S::lit(k);
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::lit(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }
}

pub(super) fn backward_binary<S: Scalar>(
    op: &Op<S>,
    a: Var,
    b: Var,
    out_shape: &[usize],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let da = sink.data(a);
    let db = sink.data(b);
    let oa = broadcast_offsets(out_shape, sink.shape(a));
    let ob = broadcast_offsets(out_shape, sink.shape(b));
    if let Some(ga) = sink.slot(a) {
        for i in 0..g.len() {
            ga[oa[i]] += match op {
                Op::Add(..) | Op::Sub(..) => g[i],
                Op::Mul(..) => g[i] * db[ob[i]],
                Op::Div(..) => g[i] / db[ob[i]],
                _ => unreachable!(),
            };
        }
    }
    if let Some(gb) = sink.slot(b) {
        for i in 0..g.len() {
            gb[ob[i]] += match op {
                Op::Add(..) => g[i],
                Op::Sub(..) => -g[i],
                Op::Mul(..) => g[i] * da[oa[i]],
                Op::Div(..) => {
                    let y = db[ob[i]];
                    -g[i] * da[oa[i]] / (y * y)
                }
                _ => unreachable!(),
            };
        }
    }
}

pub(super) fn backward_unary<S: Scalar>(op: &Op<S>, a: Var, out: &[S], g: &[S], sink: &mut GradSink<'_, S>) {
    let x = sink.data(a);
    let ga: Vec<S> = (0..g.len())
        .map(|i| {
            let d = match op {
                Op::Sigmoid(_) => out[i] * (S::one() - out[i]),
                Op::Gelu(_) => gelu_parts(x[i]).1,
                Op::Relu(_) => {
                    if x[i] > S::zero() {
                        S::one()
                    } else {
                        S::zero()
                    }
                }
                Op::Exp(_) => out[i],
                Op::Log(_) => S::one() / x[i],
                _ => unreachable!(),
            };
            g[i] * d
        })
        .collect();
    sink.add_to(a, &ga);
}
