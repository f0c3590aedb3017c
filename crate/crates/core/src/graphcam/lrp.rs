//! Relevance propagation rules for the transformer layers.
//!
//! Every rule maps the relevance at a layer's output to its inputs. Linear
//! layers use the α=1, β=0 rule; residual additions split relevance in
//! proportion to each input's contribution and then rescale so the total is
//! conserved; the two attention products share relevance evenly between
//! their operands. Layer norm, GELU and softmax pass relevance through.

use crate::numerics::{kernels, Tensor};

pub const EPS: f64 = 1e-9;

/// `a / b` stabilized away from zero, and 0 where `b` is exactly 0.
pub fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / (b + EPS * b.signum())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `x · w` with `x: [n, k]`, `w: [k, m]`, relevance `r: [n, m]` → `[n, k]`.
pub fn linear(x: &Tensor, w: &Tensor, r: &Tensor) -> Tensor {
    let (n, k, m) = (x.rows(), x.cols(), w.cols());
    let px = x.map(|v| v.max(0.0));
    let nx = x.map(|v| v.min(0.0));
    let pw = w.map(|v| v.max(0.0));
    let nw = w.map(|v| v.min(0.0));
    let mut z = kernels::matmul(px.data(), pw.data(), n, k, m);
    kernels::matmul_acc(nx.data(), nw.data(), &mut z, n, k, m);
    let s: Vec<f64> = r.data().iter().zip(&z).map(|(&a, &b)| safe_div(a, b)).collect();
    let mut cp = vec![0.0; n * k];
    kernels::matmul_nt_acc(&s, pw.data(), &mut cp, n, m, k);
    let mut cn = vec![0.0; n * k];
    kernels::matmul_nt_acc(&s, nw.data(), &mut cn, n, m, k);
    let data = (0..n * k).map(|i| px.data()[i] * cp[i] + nx.data()[i] * cn[i]).collect();
    Tensor::new(vec![n, k], data).expect("shape")
}

/// `a + b`, returning the relevance of each summand.
pub fn add(a: &Tensor, b: &Tensor, r: &Tensor) -> (Tensor, Tensor) {
    let z = zip_map(a, b, |x, y| x + y);
    let s = zip_map(r, &z, safe_div);
    let mut ra = zip_map(a, &s, |x, y| x * y);
    let mut rb = zip_map(b, &s, |x, y| x * y);
    let (a_sum, b_sum, total) = (ra.sum(), rb.sum(), r.sum());
    let a_fact = safe_div(a_sum.abs(), a_sum.abs() + b_sum.abs()) * total;
    let b_fact = safe_div(b_sum.abs(), a_sum.abs() + b_sum.abs()) * total;
    let (ka, kb) = (safe_div(a_fact, a_sum), safe_div(b_fact, b_sum));
    ra.data_mut().iter_mut().for_each(|v| *v *= ka);
    rb.data_mut().iter_mut().for_each(|v| *v *= kb);
    (ra, rb)
}

/// A tensor fed to several consumers: the branch relevances are summed.
pub fn clone(x: &Tensor, branches: &[&Tensor]) -> Tensor {
    let mut c = Tensor::zeros(x.shape());
    for r in branches {
        let s = zip_map(r, x, safe_div);
        c.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
    }
    zip_map(x, &c, |a, b| a * b)
}

/// Product of two activations `x · y`, relevance split by contribution.
pub fn matmul(x: &Tensor, y: &Tensor, r: &Tensor) -> (Tensor, Tensor) {
    let (n, k, m) = (x.rows(), x.cols(), y.cols());
    let z = kernels::matmul(x.data(), y.data(), n, k, m);
    let s: Vec<f64> = r.data().iter().zip(&z).map(|(&a, &b)| safe_div(a, b)).collect();
    let mut gx = vec![0.0; n * k];
    kernels::matmul_nt_acc(&s, y.data(), &mut gx, n, m, k);
    let mut gy = vec![0.0; k * m];
    kernels::matmul_tn_acc(x.data(), &s, &mut gy, k, n, m);
    let rx = x.data().iter().zip(&gx).map(|(a, b)| a * b).collect();
    let ry = y.data().iter().zip(&gy).map(|(a, b)| a * b).collect();
    (
        Tensor::new(vec![n, k], rx).expect("shape"),
        Tensor::new(vec![k, m], ry).expect("shape"),
    )
}
