//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

type ScalarFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

/// Maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Param(format!("grad_check step must be positive, got {step}")));
    }
    let mut tape = Tape::with_finite_checks();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::with_finite_checks();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite function value during grad_check".into()));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// A named scalar function of one tensor, checked by [`GradCase::run`].
pub struct GradCase {
    pub name: String,
    pub input: Tensor,
    f: ScalarFn,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn new<F>(name: impl Into<String>, input: Tensor, f: F) -> Self
    where
        F: Fn(&mut Tape, Var) -> Result<Var> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            input,
            f: Box::new(f),
        }
    }

    pub fn run(&self, step: f64) -> Result<GradReport> {
        let max_rel_error = grad_check(|t, x| (self.f)(t, x), &self.input, step)?;
        Ok(GradReport {
            name: self.name.clone(),
            max_rel_error,
        })
    }

    /// Every differentiable tensor op, each reduced to a scalar through a
    /// fixed random weighting so that no gradient is trivially zero.
    pub fn op_suite(seed: u64) -> Vec<GradCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let mut cases = Vec::new();

        fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
            let w = t.constant(w.clone());
            let p = t.mul(y, w)?;
            t.sum(p)
        }

        macro_rules! case {
            ($name:expr, $input:expr, $wshape:expr, |$t:ident, $x:ident| $body:expr) => {{
                let w = rand_t(&$wshape, -1.0, 1.0);
                cases.push(GradCase::new($name, $input, move |$t: &mut Tape, $x: Var| {
                    let y = $body?;
                    weighted($t, y, &w)
                }));
            }};
        }

        let b = rand_t(&[3, 3], -1.0, 1.0);
        case!("matmul", rand_t(&[3, 3], -1.0, 1.0), [3, 3], |t, x| {
            let b = t.constant(b.clone());
            t.matmul(x, b)
        });
        let a = rand_t(&[2, 3, 4], -1.0, 1.0);
        case!("matmul_batched_rhs", rand_t(&[4, 2], -1.0, 1.0), [2, 3, 2], |t, x| {
            let a = t.constant(a.clone());
            t.matmul(a, x)
        });
        let xin = rand_t(&[2, 3, 4], -1.0, 1.0);
        let bias = rand_t(&[5], -1.0, 1.0);
        case!("linear", rand_t(&[5, 4], -1.0, 1.0), [2, 3, 5], |t, w| {
            let x = t.constant(xin.clone());
            let b = t.constant(bias.clone());
            t.linear(x, w, Some(b))
        });
        let other = rand_t(&[4], -1.0, 1.0);
        case!("add_broadcast", rand_t(&[3, 4], -1.0, 1.0), [3, 4], |t, x| {
            let o = t.constant(other.clone());
            t.add(x, o)
        });
        case!("add_broadcast_rhs", rand_t(&[3, 1], -1.0, 1.0), [2, 3, 4], |t, x| {
            let o = t.constant(Tensor::zeros(&[2, 1, 4]));
            t.add(o, x)
        });
        let other = rand_t(&[3, 4], -1.0, 1.0);
        case!("sub", rand_t(&[3, 4], -1.0, 1.0), [3, 4], |t, x| {
            let o = t.constant(other.clone());
            t.sub(o, x)
        });
        case!("mul_self", rand_t(&[3, 4], -1.0, 1.0), [3, 4], |t, x| t.mul(x, x));
        let num = rand_t(&[3, 4], -1.0, 1.0);
        case!("div", rand_t(&[3, 4], 0.5, 2.0), [3, 4], |t, x| {
            let n = t.constant(num.clone());
            let q = t.div(n, x)?;
            t.div(q, x)
        });
        case!("scale", rand_t(&[5], -1.0, 1.0), [5], |t, x| t.scale(x, -2.5));
        case!("add_scalar", rand_t(&[5], -1.0, 1.0), [5], |t, x| t.add_scalar(x, 0.7));
        case!("exp", rand_t(&[2, 3], -1.0, 1.0), [2, 3], |t, x| t.exp(x));
        case!("log", rand_t(&[2, 3], 0.5, 2.0), [2, 3], |t, x| t.log(x));
        case!("gelu", rand_t(&[2, 5], -2.0, 2.0), [2, 5], |t, x| t.gelu(x));
        case!("softmax", rand_t(&[3, 5], -1.0, 1.0), [3, 5], |t, x| t.softmax(x, 0.5));
        case!("log_softmax", rand_t(&[3, 5], -1.0, 1.0), [3, 5], |t, x| t
            .log_softmax(x, 0.3));
        let (gain, lb) = (rand_t(&[4], 0.5, 1.5), rand_t(&[4], -0.5, 0.5));
        case!("layer_norm", rand_t(&[3, 4], -1.0, 1.0), [3, 4], |t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(lb.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
        let xin = rand_t(&[3, 4], -1.0, 1.0);
        let lb2 = rand_t(&[4], -0.5, 0.5);
        case!("layer_norm_gain", rand_t(&[4], 0.5, 1.5), [3, 4], |t, g| {
            let x = t.constant(xin.clone());
            let b = t.constant(lb2.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
        case!("l2_normalize", rand_t(&[3, 4], -1.0, 1.0), [3, 4], |t, x| t
            .l2_normalize(x, 1e-12));
        case!("sum_axis", rand_t(&[2, 3, 4], -1.0, 1.0), [2, 4], |t, x| t
            .sum_axis(x, 1));
        case!("mean_axis", rand_t(&[2, 3, 4], -1.0, 1.0), [3, 4], |t, x| t
            .mean_axis(x, 0));
        case!("mean", rand_t(&[2, 3], -1.0, 1.0), [0usize; 0], |t, x| t.mean(x));
        let other = rand_t(&[2, 2, 4], -1.0, 1.0);
        case!("concat", rand_t(&[2, 3, 4], -1.0, 1.0), [2, 5, 4], |t, x| {
            let o = t.constant(other.clone());
            t.concat(&[x, o], 1)
        });
        case!("slice", rand_t(&[2, 5, 3], -1.0, 1.0), [2, 2, 3], |t, x| t
            .slice(x, 1, 2, 4));
        case!("reshape", rand_t(&[2, 6], -1.0, 1.0), [3, 4], |t, x| t
            .reshape(x, &[3, 4]));
        case!("permute", rand_t(&[2, 3, 4], -1.0, 1.0), [4, 2, 3], |t, x| t
            .permute(x, &[2, 0, 1]));
        case!("transpose", rand_t(&[2, 3, 4], -1.0, 1.0), [2, 4, 3], |t, x| t
            .transpose(x, 1, 2));
        cases
    }

    /// A deliberately wrong backward: `x * sg(x)` claims `dx = x` where the truth is `2x`.
    pub fn faulty_fixture() -> GradCase {
        let input = Tensor::vector(&[0.5, -1.5, 2.0]);
        GradCase::new("faulty_square", input, |t, x| {
            let d = t.detach(x);
            let y = t.mul(x, d)?;
            t.sum(y)
        })
    }
}
