//! Reverse-mode automatic differentiation.
//!
//! Every differentiable routine in the crate is written once, generic over
//! [`Real`]. Instantiated with `f64` it is a plain forward evaluation (used for
//! finite differences and fast renders); instantiated with [`Var`] each
//! arithmetic operation is appended to the thread's active [`Tape`].
//!
//! A tape records nodes with at most two parents. Constants never allocate a
//! node, so mixing `Var` with `T::cst(..)` values is cheap. Tapes can be
//! parked (moved out of the thread-local slot) after recording and have
//! `backward` run later, possibly on another thread.

use std::cell::{Cell, RefCell, UnsafeCell};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar type the differentiable pipeline is generic over.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Mul<f64, Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Send
    + Sync
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn square(self) -> Self {
        self * self
    }
    /// Absolute value, branching on the current value.
    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }
    /// Larger of two values; the losing branch receives no gradient.
    fn max(self, other: Self) -> Self {
        if other.val() > self.val() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.val() < self.val() {
            other
        } else {
            self
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        let v = self.val();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
    fn sigmoid(self) -> Self {
        // split on sign so exp never overflows
        if self.val() >= 0.0 {
            Self::one() / ((-self).exp() + 1.0)
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }
    /// Same value, no gradient.
    fn detach(self) -> Self {
        Self::cst(self.val())
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tan(self) -> Self {
        f64::tan(self)
    }
}

const NIL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
}

struct Active {
    nodes: UnsafeCell<Vec<Node>>,
    on: Cell<bool>,
}

thread_local! {
    static ACTIVE: Active = const {
        Active {
            nodes: UnsafeCell::new(Vec::new()),
            on: Cell::new(false),
        }
    };
    /// Released node and adjoint buffers, kept so that their capacity is reused.
    static SPARE_NODES: RefCell<Vec<Vec<Node>>> = const { RefCell::new(Vec::new()) };
    static SPARE_ADJ: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Buffers kept per thread and kind.
const SPARE_LIMIT: usize = 2;

#[inline]
fn push(node: Node) -> u32 {
    ACTIVE.with(|a| {
        assert!(a.on.get(), "differentiable operation outside of Tape::record");
        // SAFETY: the buffer is only touched by this thread, and neither push
        // nor record hand out references that outlive the call.
        let nodes = unsafe { &mut *a.nodes.get() };
        let idx = nodes.len();
        assert!(idx < NIL as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    })
}

fn take_spare<T>(pool: &'static std::thread::LocalKey<RefCell<Vec<Vec<T>>>>) -> Vec<T> {
    pool.with(|p| p.borrow_mut().pop()).map_or_else(Vec::new, |mut v| {
        v.clear();
        v
    })
}

fn give_spare<T>(pool: &'static std::thread::LocalKey<RefCell<Vec<Vec<T>>>>, v: Vec<T>) {
    if v.capacity() == 0 {
        return;
    }
    // the pool may already be gone during thread teardown
    let _ = pool.try_with(|p| {
        let mut p = p.borrow_mut();
        if p.len() < SPARE_LIMIT {
            p.push(v);
        }
    });
}

/// A scalar recorded on the active tape (or a constant, which is not).
#[derive(Clone, Copy, Debug)]
pub struct Var {
    v: f64,
    i: u32,
}

impl Var {
    /// A new independent variable on the active tape.
    pub fn leaf(v: f64) -> Var {
        let i = push(Node {
            a: NIL,
            b: NIL,
            da: 0.0,
            db: 0.0,
        });
        Var { v, i }
    }

    pub fn is_const(self) -> bool {
        self.i == NIL
    }

    #[inline]
    fn unary(v: f64, a: Var, da: f64) -> Var {
        if a.i == NIL {
            return Var { v, i: NIL };
        }
        let i = push(Node { a: a.i, b: NIL, da, db: 0.0 });
        Var { v, i }
    }

    #[inline]
    fn binary(v: f64, a: Var, da: f64, b: Var, db: f64) -> Var {
        match (a.i == NIL, b.i == NIL) {
            (true, true) => Var { v, i: NIL },
            (false, true) => Var::unary(v, a, da),
            (true, false) => Var::unary(v, b, db),
            (false, false) => {
                let i = push(Node { a: a.i, b: b.i, da, db });
                Var { v, i }
            }
        }
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::binary(self.v + o.v, self, 1.0, o, 1.0)
    }
}
impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::binary(self.v - o.v, self, 1.0, o, -1.0)
    }
}
impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::binary(self.v * o.v, self, o.v, o, self.v)
    }
}
impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        Var::binary(q, self, inv, o, -q * inv)
    }
}
impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        Var::unary(-self.v, self, -1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, c: f64) -> Var {
        Var::unary(self.v * c, self, c)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, c: f64) -> Var {
        Var::unary(self.v + c, self, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, c: f64) -> Var {
        Var::unary(self.v - c, self, 1.0)
    }
}
impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}
impl SubAssign for Var {
    #[inline]
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}
impl MulAssign for Var {
    #[inline]
    fn mul_assign(&mut self, o: Var) {
        *self = *self * o;
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var { v, i: NIL }
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Var::unary(e, self, e)
    }
    fn ln(self) -> Self {
        Var::unary(self.v.ln(), self, 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Var::unary(s, self, 0.5 / s)
    }
    fn sin(self) -> Self {
        Var::unary(self.v.sin(), self, self.v.cos())
    }
    fn cos(self) -> Self {
        Var::unary(self.v.cos(), self, -self.v.sin())
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        Var::unary(t, self, 1.0 + t * t)
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        Var::unary(r, self, -r * r)
    }
    fn square(self) -> Self {
        Var::unary(self.v * self.v, self, 2.0 * self.v)
    }
    fn sigmoid(self) -> Self {
        let s = if self.v >= 0.0 {
            1.0 / (1.0 + (-self.v).exp())
        } else {
            let e = self.v.exp();
            e / (1.0 + e)
        };
        Var::unary(s, self, s * (1.0 - s))
    }
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Tape {
        Tape {
            nodes: take_spare(&SPARE_NODES),
        }
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        give_spare(&SPARE_NODES, std::mem::take(&mut self.nodes));
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Runs `f` with this tape active on the current thread. Nested recording
    /// on one thread is not supported.
    pub fn record<R>(&mut self, f: impl FnOnce() -> R) -> R {
        ACTIVE.with(|a| {
            assert!(!a.on.get(), "a tape is already recording on this thread");
            // SAFETY: no reference into the slot is live while not recording
            unsafe { std::ptr::swap(a.nodes.get(), &mut self.nodes) };
            a.on.set(true);
        });
        struct Park<'a>(&'a mut Vec<Node>);
        impl Drop for Park<'_> {
            fn drop(&mut self) {
                ACTIVE.with(|a| {
                    a.on.set(false);
                    // SAFETY: recording has ended on this thread
                    unsafe { std::ptr::swap(a.nodes.get(), &mut *self.0) };
                });
            }
        }
        let _park = Park(&mut self.nodes);
        f()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Propagates the seeded output adjoints back through the whole tape.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Adjoints {
        let mut adj = take_spare(&SPARE_ADJ);
        adj.resize(self.nodes.len(), 0.0);
        for &(v, s) in seeds {
            if v.i != NIL {
                adj[v.i as usize] += s;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            if n.a != NIL {
                adj[n.a as usize] += n.da * g;
            }
            if n.b != NIL {
                adj[n.b as usize] += n.db * g;
            }
        }
        Adjoints { adj }
    }
}

/// Result of a backward pass.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Drop for Adjoints {
    fn drop(&mut self) {
        give_spare(&SPARE_ADJ, std::mem::take(&mut self.adj));
    }
}

impl Adjoints {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.i == NIL {
            0.0
        } else {
            self.adj[v.i as usize]
        }
    }
}

/// Convenience: gradient of a scalar function of a flat parameter vector.
pub fn gradient(params: &[f64], f: impl FnOnce(&[Var]) -> Var) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let (leaves, out) = tape.record(|| {
        let leaves: Vec<Var> = params.iter().map(|&p| Var::leaf(p)).collect();
        let out = f(&leaves);
        (leaves, out)
    });
    let adj = tape.backward(&[(out, 1.0)]);
    (out.val(), leaves.iter().map(|&l| adj.wrt(l)).collect())
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub checked: Vec<FdSample>,
}

#[derive(Clone, Copy, Debug)]
pub struct FdSample {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference check of `analytic` against `f` on the sampled coordinates.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut checked = Vec::with_capacity(coords.len());
    let mut max_rel_err = 0.0;
    let mut worst_coord = None;
    for &c in coords {
        let orig = work[c];
        work[c] = orig + step;
        let fp = f(&work);
        work[c] = orig - step;
        let fm = f(&work);
        work[c] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let rel_err = relative_error(analytic[c], numeric, 1e-6);
        if rel_err > max_rel_err || worst_coord.is_none() {
            max_rel_err = rel_err.max(max_rel_err);
            worst_coord = Some(c);
        }
        checked.push(FdSample {
            coord: c,
            analytic: analytic[c],
            numeric,
            rel_err,
        });
    }
    FdReport {
        max_rel_err,
        worst_coord,
        checked,
    }
}
