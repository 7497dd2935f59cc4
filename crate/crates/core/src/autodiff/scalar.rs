use super::tape::Var;

/// Arithmetic shared by plain `f64` values and tape variables, so closed-form
/// fields and drivers can be written once and evaluated either numerically
/// or on a [`Tape`](super::Tape) for differentiation.
///
/// For [`Var`] the binary methods panic when shapes are incompatible; callers
/// build all operands from columns of one batch.
pub trait Scalar: Clone {
    /// A constant compatible with `self` in elementwise operations.
    fn lift(&self, v: f64) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn shift(&self, c: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powi(&self, n: i32) -> Self;

    fn neg(&self) -> Self {
        self.scale(-1.0)
    }
}

impl Scalar for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn shift(&self, c: f64) -> Self {
        self + c
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

impl Scalar for Var<'_> {
    fn lift(&self, v: f64) -> Self {
        self.tape().scalar(v)
    }
    fn add(&self, o: &Self) -> Self {
        Var::add(self, o).expect("compatible shapes")
    }
    fn sub(&self, o: &Self) -> Self {
        Var::sub(self, o).expect("compatible shapes")
    }
    fn mul(&self, o: &Self) -> Self {
        Var::mul(self, o).expect("compatible shapes")
    }
    fn scale(&self, c: f64) -> Self {
        Var::scale(self, c)
    }
    fn shift(&self, c: f64) -> Self {
        Var::shift(self, c)
    }
    fn sin(&self) -> Self {
        Var::sin(self)
    }
    fn cos(&self) -> Self {
        Var::cos(self)
    }
    fn exp(&self) -> Self {
        Var::exp(self)
    }
    fn tanh(&self) -> Self {
        Var::tanh(self)
    }
    fn powi(&self, n: i32) -> Self {
        Var::powi(self, n)
    }
}
