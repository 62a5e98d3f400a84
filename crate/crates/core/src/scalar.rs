//! Numeric element types the autodiff tape is generic over.
//!
//! `f32` is the training precision, `f64` is used by gradient checks and
//! `Dual<T>` carries a forward-mode tangent through a reverse pass, which is
//! how the gradient penalty obtains exact mixed second derivatives.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;
    /// Primal value, used for branching (ReLU masks, comparisons).
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    /// Numerically stable `ln(1 + e^x)`.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + (-self).exp().ln_1p_small()
        } else {
            self.exp().ln_1p_small()
        }
    }

    /// `ln(1 + y)` for `y` in `[0, 1]`.
    fn ln_1p_small(self) -> Self {
        (Self::one() + self).ln()
    }

    fn sigmoid(self) -> Self {
        if self.value() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// Row-major-agnostic GEMM: `c = alpha * a * b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    let av = a[(i as isize * rsa + p as isize * csa) as usize];
                    let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                    acc += av * bv;
                }
                let ci = (i as isize * rsc + j as isize * csc) as usize;
                c[ci] = if beta.value() == 0.0 {
                    alpha * acc
                } else {
                    alpha * acc + beta * c[ci]
                };
            }
        }
    }
}

macro_rules! float_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn value(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn ln_1p_small(self) -> Self {
                <$t>::ln_1p(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let ci = (i as isize * rsc + j as isize * csc) as usize;
                            c[ci] = if beta == 0.0 { 0.0 } else { beta * c[ci] };
                        }
                    }
                    return;
                }
                // SAFETY: all strided accesses stay inside the slices; callers pass
                // dimensions that match the buffer layouts (checked in debug builds).
                debug_assert!(max_index(m, k, rsa, csa) < a.len());
                debug_assert!(max_index(k, n, rsb, csb) < b.len());
                debug_assert!(max_index(m, n, rsc, csc) < c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

float_scalar!(f32, matrixmultiply::sgemm);
float_scalar!(f64, matrixmultiply::dgemm);

/// Scalars with FFT support (the primitive float types).
pub trait FftScalar: Scalar + rustfft::FftNum {
    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>>;

    fn to_complex(re: Self, im: Self) -> Complex<Self> {
        Complex::new(re, im)
    }
}

macro_rules! fft_scalar {
    ($t:ty, $cache:ident) => {
        thread_local! {
            static $cache: std::cell::RefCell<(FftPlanner<$t>, std::collections::HashMap<(usize, bool), Arc<dyn Fft<$t>>>)> =
                std::cell::RefCell::new((FftPlanner::new(), std::collections::HashMap::new()));
        }

        impl FftScalar for $t {
            fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>> {
                $cache.with(|cell| {
                    let mut guard = cell.borrow_mut();
                    let (planner, plans) = &mut *guard;
                    plans
                        .entry((len, inverse))
                        .or_insert_with(|| {
                            if inverse {
                                planner.plan_fft_inverse(len)
                            } else {
                                planner.plan_fft_forward(len)
                            }
                        })
                        .clone()
                })
            }
        }
    };
}

fft_scalar!(f32, F32_PLANS);
fft_scalar!(f64, F64_PLANS);

/// Forward-mode dual number `v + d·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<T> {
    pub v: T,
    pub d: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(v: T, d: T) -> Self {
        Self { v, d }
    }

    pub fn constant(v: T) -> Self {
        Self { v, d: T::zero() }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.v;
        Self::new(self.v * inv, (self.d * o.v - self.v * o.d) * inv * inv)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl<T: Scalar> AddAssign for Dual<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> SubAssign for Dual<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Scalar> MulAssign for Dual<T> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }

    fn value(self) -> f64 {
        self.v.value()
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, self.d * e)
    }

    fn ln(self) -> Self {
        Self::new(self.v.ln(), self.d / self.v)
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self::new(s, self.d / (T::from_f64(2.0) * s))
    }

    fn ln_1p_small(self) -> Self {
        Self::new(self.v.ln_1p_small(), self.d / (T::one() + self.v))
    }

    /// Splits into primal and tangent products so the inner type's GEMM does the work.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if alpha.d.value() != 0.0 || beta.d.value() != 0.0 {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = Self::zero();
                    for p in 0..k {
                        acc += a[(i as isize * rsa + p as isize * csa) as usize]
                            * b[(p as isize * rsb + j as isize * csb) as usize];
                    }
                    let ci = (i as isize * rsc + j as isize * csc) as usize;
                    c[ci] = alpha * acc + beta * c[ci];
                }
            }
            return;
        }
        let (av, ad): (Vec<T>, Vec<T>) = a.iter().map(|x| (x.v, x.d)).unzip();
        let (bv, bd): (Vec<T>, Vec<T>) = b.iter().map(|x| (x.v, x.d)).unzip();
        let (mut cv, mut cd): (Vec<T>, Vec<T>) = c.iter().map(|x| (x.v, x.d)).unzip();
        let (al, be) = (alpha.v, beta.v);
        T::gemm(m, k, n, al, &av, rsa, csa, &bv, rsb, csb, be, &mut cv, rsc, csc);
        T::gemm(m, k, n, al, &av, rsa, csa, &bd, rsb, csb, be, &mut cd, rsc, csc);
        T::gemm(m, k, n, al, &ad, rsa, csa, &bv, rsb, csb, T::one(), &mut cd, rsc, csc);
        for ((x, v), d) in c.iter_mut().zip(cv).zip(cd) {
            *x = Self::new(v, d);
        }
    }
}
