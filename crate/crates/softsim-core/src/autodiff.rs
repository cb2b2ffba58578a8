//! Tape-based reverse-mode differentiation over scalar primitives.
//!
//! The tape is an append-only Wengert list: each recorded node stores up
//! to two parent indices with the local partial derivatives computed
//! during the forward pass. A backward sweep in reverse index order then
//! yields the gradient of one scalar output with respect to all marked
//! inputs. Control flow executed while recording (nearest-neighbor
//! assignments, convergence exits, divergence guards) is frozen: the
//! backward pass never revisits those decisions.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::math::{f64_exp, f64_sqrt, Real, V3};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Recording tape. One tape per differentiated scalar computation; tapes
/// are not shared across threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    poisoned: Cell<Option<&'static str>>,
}

/// Raised when a recorded computation produced a non-finite value; names
/// the primitive that first produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientNan {
    pub primitive: &'static str,
}

impl core::fmt::Display for GradientNan {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "non-finite value in autodiff primitive `{}`", self.primitive)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GradientNan {}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            poisoned: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Marks `value` as a differentiable input and returns its variable.
    pub fn input(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// A constant carried on no tape; never contributes gradient.
    pub fn constant(value: f64) -> Var<'static> {
        Var {
            tape: None,
            idx: NONE,
            val: value,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    fn record(&self, name: &'static str, val: f64, parents: [u32; 2], partials: [f64; 2]) -> u32 {
        if !val.is_finite() && self.poisoned.get().is_none() {
            self.poisoned.set(Some(name));
        }
        self.push(Node { parents, partials })
    }

    /// Adjoints of every node for the scalar `output`, by one reverse
    /// sweep. Fails if any recorded primitive went non-finite.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, GradientNan> {
        if let Some(name) = self.poisoned.get() {
            return Err(GradientNan { primitive: name });
        }
        if !output.val.is_finite() {
            return Err(GradientNan { primitive: "output" });
        }
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0f64; nodes.len()];
        if output.idx != NONE {
            adj[output.idx as usize] = 1.0;
            for i in (0..nodes.len()).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let n = &nodes[i];
                for k in 0..2 {
                    if n.parents[k] != NONE {
                        adj[n.parents[k] as usize] += n.partials[k] * a;
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass; indexed by input variables.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> f64 {
        if var.idx == NONE {
            0.0
        } else {
            self.adj[var.idx as usize]
        }
    }
}

/// Scalar variable, either recorded on a tape or a free constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    fn tape_of(a: Var<'t>, b: Var<'t>) -> Option<&'t Tape> {
        a.tape.or(b.tape)
    }

    fn binary(
        name: &'static str,
        a: Var<'t>,
        b: Var<'t>,
        val: f64,
        da: f64,
        db: f64,
    ) -> Var<'t> {
        match Self::tape_of(a, b) {
            None => Var {
                tape: None,
                idx: NONE,
                val,
            },
            Some(t) => {
                let idx = t.record(name, val, [a.idx, b.idx], [da, db]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn unary(name: &'static str, a: Var<'t>, val: f64, da: f64) -> Var<'t> {
        match a.tape {
            None => Var {
                tape: None,
                idx: NONE,
                val,
            },
            Some(t) => {
                let idx = t.record(name, val, [a.idx, NONE], [da, 0.0]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        Var::binary("add", self, o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        Var::binary("sub", self, o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        Var::binary("mul", self, o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Self) -> Self {
        let v = self.val / o.val;
        Var::binary("div", self, o, v, 1.0 / o.val, -v / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        Var::unary("neg", self, -self.val, -1.0)
    }
}

impl<'t> Real for Var<'t> {
    fn lit(v: f64) -> Self {
        Tape::constant(v)
    }
    fn val(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let v = f64_sqrt(self.val);
        Var::unary("sqrt", self, v, 0.5 / v)
    }
    fn exp(self) -> Self {
        let v = f64_exp(self.val);
        Var::unary("exp", self, v, v)
    }
    fn abs(self) -> Self {
        if self.val < 0.0 {
            -self
        } else {
            self
        }
    }
}

/// Marks a whole position array as tape inputs.
pub fn input_positions<'t>(tape: &'t Tape, xs: &[V3<f64>]) -> Vec<V3<Var<'t>>> {
    xs.iter()
        .map(|p| V3::new(tape.input(p.x), tape.input(p.y), tape.input(p.z)))
        .collect()
}

/// Lifts positions as constants (no gradient flows into them).
pub fn const_positions<'t>(xs: &[V3<f64>]) -> Vec<V3<Var<'t>>> {
    xs.iter().map(|p| V3::lit(*p)).collect()
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Independent verification oracle for the tape; shares no code with the
/// backward pass.
pub fn finite_diff_gradient<F>(mut f: F, at: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}
