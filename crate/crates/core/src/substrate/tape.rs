//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every value it produces. Values are `rows x cols`
//! matrices; scalars are `1 x 1`. Shapes are checked eagerly and a mismatch
//! panics, because it can only come from a bug in the calling model code.
//! Parameters enter through [`Tape::param`] and carry their offset into the
//! owning [`ParamVector`], so [`Tape::backward`] returns a gradient laid out
//! exactly like the parameter vector.

use ndarray::{s, Array2, Axis, Zip};

use super::mlp::{Activation, Mlp};
use super::params::{bias_name, weight_name, ParamVector};
use crate::error::{ensure_finite, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { offset: usize },
    Linear { x: Var, w: Var, b: Var },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    GaussLogPdf { x: Var, mean: Var, logvar: Var },
    Sum(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl Tape {
    /// A tape whose gradients will have length `n_params`.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            n_params,
        }
    }

    pub fn for_params(params: &ParamVector) -> Self {
        Self::new(params.len())
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn filled(&mut self, rows: usize, cols: usize, v: f64) -> Var {
        self.constant(Array2::from_elem((rows, cols), v))
    }

    pub fn param(&mut self, params: &ParamVector, name: &str) -> Result<Var> {
        let slot = params.slot(name)?;
        let offset = slot.offset;
        let value = params.to_matrix(name)?;
        assert!(
            offset + value.len() <= self.n_params,
            "tape sized for a different parameter vector"
        );
        Ok(self.push(value, Op::Param { offset }))
    }

    /// `x W^T + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width");
        assert_eq!(bv.dim(), (1, wv.nrows()), "linear: bias shape");
        let out = xv.dot(&wv.t()) + bv;
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let out = self.value(x).mapv(|v| act.apply(v));
        self.push(out, Op::Act { x, act })
    }

    /// Runs `net`'s architecture with the weights stored in `params` under `prefix`.
    pub fn mlp(&mut self, params: &ParamVector, prefix: &str, net: &Mlp, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, layer) in net.layers().iter().enumerate() {
            let w = self.param(params, &weight_name(prefix, k))?;
            let b = self.param(params, &bias_name(prefix, k))?;
            h = self.linear(h, w, b);
            h = self.activation(h, layer.activation);
        }
        Ok(h)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "elementwise op on mismatched shapes");
        let out = Zip::from(av).and(bv).map_collect(|&x, &y| f(x, y));
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) + c;
        self.push(out, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Elementwise `log N(x; mean, exp(logvar))`.
    pub fn gauss_logpdf(&mut self, x: Var, mean: Var, logvar: Var) -> Var {
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(logvar));
        assert_eq!(xv.dim(), mv.dim(), "gauss_logpdf: mean shape");
        assert_eq!(xv.dim(), lv.dim(), "gauss_logpdf: logvar shape");
        let out = Zip::from(xv).and(mv).and(lv).map_collect(|&x, &m, &l| {
            -HALF_LN_2PI - 0.5 * l - 0.5 * (x - m) * (x - m) * (-l).exp()
        });
        self.push(out, Op::GaussLogPdf { x, mean, logvar })
    }

    /// Elementwise standard-normal log density.
    pub fn std_normal_logpdf(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let half = self.scale(sq, -0.5);
        self.offset(half, -HALF_LN_2PI)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), rows * cols, "reshape changes element count");
        let flat: Vec<f64> = v.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked length");
        self.push(out, Op::Reshape(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        assert!(start <= end && end <= v.ncols(), "slice_cols out of range");
        let out = v.slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// `out[i] = x[index[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let v = self.value(x);
        let out = v.select(Axis(0), &index);
        self.push(out, Op::GatherRows { x, index })
    }

    /// Gradient of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Vec<f64> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut param_grad = vec![0.0; self.n_params];

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (dst, src) in param_grad[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g.iter())
                    {
                        *dst += src;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut grads, *x, g.dot(wv));
                    accumulate(&mut grads, *w, g.t().dot(xv));
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Act { x, act } => {
                    let xv = self.value(*x);
                    let dx = Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| gi * act.derivative(xi));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = &g / bv;
                    let db = Zip::from(&g)
                        .and(&node.value)
                        .and(bv)
                        .map_collect(|&gi, &q, &bi| -gi * q / bi);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g * *c),
                Op::Offset(x) => accumulate(&mut grads, *x, g),
                Op::Exp(x) => accumulate(&mut grads, *x, g * &node.value),
                Op::Log(x) => accumulate(&mut grads, *x, g / self.value(*x)),
                Op::Softplus(x) => {
                    let dx = Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gi, &xi| gi * sigmoid(xi));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let dx = Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gi, &xi| 2.0 * gi * xi);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GaussLogPdf { x, mean, logvar } => {
                    let (xv, mv, lv) = (self.value(*x), self.value(*mean), self.value(*logvar));
                    let mut dx = Array2::zeros(g.dim());
                    let mut dl = Array2::zeros(g.dim());
                    Zip::from(&mut dx)
                        .and(&mut dl)
                        .and(&g)
                        .and(xv)
                        .and(mv)
                        .and(lv)
                        .for_each(|dx, dl, &gi, &x, &m, &l| {
                            let prec = (-l).exp();
                            let r = x - m;
                            *dx = -gi * r * prec;
                            *dl = gi * (-0.5 + 0.5 * r * r * prec);
                        });
                    accumulate(&mut grads, *mean, -&dx);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *logvar, dl);
                }
                Op::Sum(x) => {
                    let shape = self.shape(*x);
                    accumulate(&mut grads, *x, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Array2::from_shape_vec(shape, flat).expect("same count"),
                    );
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        accumulate(&mut grads, *p, g.slice(s![row..row + r, ..]).to_owned());
                        row += r;
                    }
                }
                Op::GatherRows { x, index } => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        param_grad
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value and exact gradient of a scalar loss built on a tape.
pub fn loss_grad<F>(params: &ParamVector, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var>,
{
    let mut tape = Tape::for_params(params);
    let out = loss(&mut tape, params)?;
    let value = ensure_finite("loss", tape.scalar(out))?;
    Ok((value, tape.backward(out)))
}

/// Loss value only (no backward pass).
pub fn loss_value<F>(params: &ParamVector, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var>,
{
    let mut tape = Tape::for_params(params);
    let out = loss(&mut tape, params)?;
    Ok(tape.scalar(out))
}

/// Largest relative disagreement between the tape gradient and central
/// finite differences with step `eps`:
/// `max_i |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|)`.
///
/// Anything non-finite along the way yields `f64::INFINITY`.
pub fn grad_check<F>(loss: F, params: &ParamVector, eps: f64) -> f64
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let Ok((_, analytic)) = loss_grad(params, &loss) else {
        return f64::INFINITY;
    };
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for (i, &g) in analytic.iter().enumerate() {
        let base = params.values()[i];
        probe.values_mut()[i] = base + eps;
        let up = loss_value(&probe, &loss);
        probe.values_mut()[i] = base - eps;
        let down = loss_value(&probe, &loss);
        probe.values_mut()[i] = base;
        let (Ok(up), Ok(down)) = (up, down) else {
            return f64::INFINITY;
        };
        let fd = (up - down) / (2.0 * eps);
        let err = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn scalar_params(v: f64) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push("p", array![[v]].view()).unwrap();
        pv
    }

    #[test]
    fn square_gradient() {
        let pv = scalar_params(3.0);
        let (val, g) = loss_grad(&pv, |t, p| {
            let x = t.param(p, "p")?;
            let sq = t.square(x);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(val, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let pv = scalar_params(1.25);
        let loss = |t: &mut Tape, _: &ParamVector| Ok(t.filled(1, 1, 4.0));
        let (_, g) = loss_grad(&pv, loss).unwrap();
        assert_eq!(g, vec![0.0]);
        assert_eq!(grad_check(loss, &pv, 1e-5), 0.0);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut pv = ParamVector::new();
        pv.push("p", array![[0.3, -1.7, 2.2]].view()).unwrap();
        let err = grad_check(
            |t, p| {
                let x = t.param(p, "p")?;
                let c = t.constant(array![[1.0, 2.0, -0.5]]);
                let d = t.sub(x, c);
                let sq = t.square(d);
                let w = t.constant(array![[1.0, 3.0, 0.5]]);
                let ws = t.mul(sq, w);
                Ok(t.sum(ws))
            },
            &pv,
            1e-5,
        );
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let pv = scalar_params(-1.0);
        let res = loss_grad(&pv, |t, p| {
            let x = t.param(p, "p")?;
            let l = t.log(x);
            Ok(t.sum(l))
        });
        assert!(matches!(res, Err(crate::Error::Numeric { ref term, .. }) if term == "loss"));
    }

    #[test]
    fn mlp_squared_error_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::random(&[3, 6, 2], Activation::LeakyRelu(0.2), &mut rng);
        let mut pv = ParamVector::new();
        pv.push_mlp("net", &net).unwrap();
        // Non-zero biases so that no pre-activation sits on the kink.
        for v in pv.values_mut() {
            *v += 0.05;
        }
        let x = array![[0.5, -1.0, 0.25], [1.5, 0.3, -0.7], [-0.2, 0.9, 1.1]];
        let y = array![[0.1, 0.2], [-0.3, 0.4], [0.0, 1.0]];
        let err = grad_check(
            |t, p| {
                let xin = t.constant(x.clone());
                let out = t.mlp(p, "net", &net, xin)?;
                let target = t.constant(y.clone());
                let d = t.sub(out, target);
                let sq = t.square(d);
                Ok(t.sum(sq))
            },
            &pv,
            1e-5,
        );
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut pv = ParamVector::new();
        pv.push("a", array![[0.4, -0.3, 1.2], [0.7, 0.1, -0.9]].view())
            .unwrap();
        pv.push("b", array![[1.3, 0.8, 0.6], [0.5, 1.1, 2.0]].view())
            .unwrap();
        pv.push("w", array![[0.2, -0.5, 0.3], [0.9, 0.4, -0.1]].view())
            .unwrap();
        pv.push("bias", array![[0.05, -0.02]].view()).unwrap();
        let err = grad_check(
            |t, p| {
                let a = t.param(p, "a")?;
                let b = t.param(p, "b")?;
                let w = t.param(p, "w")?;
                let bias = t.param(p, "bias")?;
                let lin = t.linear(a, w, bias);
                let act = t.activation(lin, Activation::LeakyRelu(0.2));
                let sp = t.softplus(act);
                let d = t.div(a, b);
                let e = t.exp(d);
                let l = t.log(b);
                let m = t.mul(e, l);
                let cols = t.slice_cols(m, 1, 3);
                let joined = t.concat_cols(&[cols, sp]);
                let r = t.reshape(joined, 4, 2);
                let g = t.gather_rows(r, vec![3, 0, 0, 2]);
                let stacked = t.concat_rows(&[g, r]);
                let sq = t.square(stacked);
                let half = t.scale(sq, 0.5);
                let sh = t.offset(half, 1.0);
                let mean = t.slice_cols(stacked, 0, 1);
                let lv = t.slice_cols(sh, 1, 2);
                let x = t.slice_cols(stacked, 1, 2);
                let lp = t.gauss_logpdf(x, mean, lv);
                let n = t.std_normal_logpdf(lp);
                let neg = t.neg(n);
                let s1 = t.sum(neg);
                let s2 = t.sum(sh);
                let tot = t.add(s1, s2);
                let minus = t.sub(tot, s2);
                Ok(t.add(minus, s1))
            },
            &pv,
            1e-5,
        );
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn gauss_logpdf_values() {
        let mut t = Tape::new(0);
        let x = t.constant(array![[0.0, 1.0, 1.0]]);
        let m = t.constant(array![[0.0, 0.0, 0.0]]);
        let lv = t.constant(array![[0.0, 0.0, 0.0]]);
        let out = t.gauss_logpdf(x, m, lv);
        let v = t.value(out);
        assert!((v[[0, 0]] + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v[[0, 1]] + v[[0, 2]] - (-(2.0 * PI).ln() - 1.0)).abs() < 1e-12);
    }
}
