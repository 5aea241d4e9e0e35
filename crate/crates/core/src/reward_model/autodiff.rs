//! Minimal reverse-mode automatic differentiation.
//!
//! Losses are written once against the [`Scalar`] trait and evaluated either on
//! plain `f64` or on [`Var`], which records every operation on a thread-local
//! tape. [`gradient`] runs a closure on fresh leaves and back-propagates.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }

    /// Same value with the gradient cut.
    fn detach(self) -> Self {
        Self::cst(self.value())
    }
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

/// A tape-recorded scalar. Constants carry no tape entry.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    fn push(val: f64, parents: [u32; 2], partials: [f64; 2]) -> Var {
        if parents[0] == NO_PARENT && parents[1] == NO_PARENT {
            return Var { idx: NO_PARENT, val };
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = u32::try_from(t.len()).expect("autodiff tape overflow");
            t.push(Node { parents, partials });
            Var { idx, val }
        })
    }

    fn leaf(val: f64) -> Var {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = u32::try_from(t.len()).expect("autodiff tape overflow");
            t.push(Node {
                parents: [NO_PARENT; 2],
                partials: [0.0; 2],
            });
            Var { idx, val }
        })
    }

    fn unary(self, val: f64, d: f64) -> Var {
        Var::push(val, [self.idx, NO_PARENT], [d, 0.0])
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        Var::push(self.val + o.val, [self.idx, o.idx], [1.0, 1.0])
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        Var::push(self.val - o.val, [self.idx, o.idx], [1.0, -1.0])
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        Var::push(self.val * o.val, [self.idx, o.idx], [o.val, self.val])
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::push(q, [self.idx, o.idx], [1.0 / o.val, -q / o.val])
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Scalar for Var {
    fn cst(x: f64) -> Self {
        Var { idx: NO_PARENT, val: x }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid(self.val))
    }
}

/// Clears the tape on creation and on drop.
struct Session;

impl Session {
    fn start() -> Self {
        TAPE.with(|t| t.borrow_mut().clear());
        Session
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.clear();
            t.shrink_to(1 << 16);
        });
    }
}

/// Value and gradient of `f` at `x`.
pub fn gradient<F>(x: &[f64], f: F) -> (f64, Vec<f64>)
where
    F: FnOnce(&[Var]) -> Var,
{
    let _session = Session::start();
    let leaves: Vec<Var> = x.iter().map(|&v| Var::leaf(v)).collect();
    let out = f(&leaves);
    let mut grad = vec![0.0; x.len()];
    if out.idx == NO_PARENT {
        return (out.val, grad);
    }
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0; out.idx as usize + 1];
        adj[out.idx as usize] = 1.0;
        for i in (0..=out.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = t[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        for (g, leaf) in grad.iter_mut().zip(&leaves) {
            *g = adj[leaf.idx as usize];
        }
    });
    (out.val, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient() {
        let (v, g) = gradient(&[2.0, 3.0], |x| x[0] * x[0] * x[1] + x[1] / x[0]);
        assert_eq!(v, 12.0 + 1.5);
        assert!((g[0] - (2.0 * 2.0 * 3.0 - 3.0 / 4.0)).abs() < 1e-15);
        assert!((g[1] - (4.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn transcendental_gradients() {
        let (_, g) = gradient(&[0.3], |x| x[0].tanh() + x[0].exp() + x[0].sqrt() + x[0].ln() + x[0].softplus());
        let x: f64 = 0.3;
        let expect = 1.0 - x.tanh().powi(2) + x.exp() + 0.5 / x.sqrt() + 1.0 / x + sigmoid(x);
        assert!((g[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn detach_blocks_gradient() {
        let (_, g) = gradient(&[1.5], |x| x[0] * x[0].detach());
        assert_eq!(g[0], 1.5);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus_f64(1000.0), 1000.0);
        assert!(softplus_f64(-1000.0) >= 0.0);
        assert!((softplus_f64(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
