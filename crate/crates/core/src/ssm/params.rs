use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// State transition matrix, dense or diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMatrix {
    Dense(DMatrix<f64>),
    Diagonal(Vec<f64>),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Dense(m) => m.nrows(),
            StateMatrix::Diagonal(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            StateMatrix::Dense(m) => m.clone(),
            StateMatrix::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            StateMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
            StateMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
        }
    }

    /// `out = self * h`.
    #[inline]
    pub fn mul_vec(&self, h: &[f64], out: &mut [f64]) {
        match self {
            StateMatrix::Dense(m) => {
                let n = m.nrows();
                for (r, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += m[(r, c)] * h[c];
                    }
                    *o = s;
                }
            }
            StateMatrix::Diagonal(d) => {
                for ((o, a), x) in out.iter_mut().zip(d).zip(h) {
                    *o = a * x;
                }
            }
        }
    }
}

/// Continuous single-input single-output SSM with its timescale.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
}

impl SsmParams {
    pub fn new(a: StateMatrix, b: Vec<f64>, c: Vec<f64>, d: f64, delta: f64) -> Result<Self> {
        let n = a.dim();
        if let StateMatrix::Dense(m) = &a {
            if !m.is_square() {
                return Err(Error::dims(format!("A is {}x{}", m.nrows(), m.ncols())));
            }
        }
        if b.len() != n || c.len() != n {
            return Err(Error::dims(format!("state size {n}: B has {}, C has {}", b.len(), c.len())));
        }
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::param(format!("timescale must be positive, got {delta}")));
        }
        let p = Self { a, b, c, d, delta };
        p.check_finite()?;
        Ok(p)
    }

    /// Diagonal `A_ii = -(i + 1)`, the default stable initialisation.
    pub fn diagonal_default(state: usize, b: Vec<f64>, c: Vec<f64>, d: f64, delta: f64) -> Result<Self> {
        let a = StateMatrix::Diagonal((0..state).map(|i| -((i + 1) as f64)).collect());
        Self::new(a, b, c, d, delta)
    }

    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let ok = self.a.is_finite()
            && self.b.iter().chain(&self.c).all(|v| v.is_finite())
            && self.d.is_finite()
            && self.delta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("SSM parameters"))
        }
    }
}

/// Discrete system; only produced by [`super::discretize`] or test fixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl DiscreteSsm {
    /// Builds a discrete system directly, e.g. for kernel experiments.
    pub fn from_parts(a_bar: StateMatrix, b_bar: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        let n = a_bar.dim();
        if b_bar.len() != n || c.len() != n {
            return Err(Error::dims(format!(
                "state size {n}: B_bar has {}, C has {}",
                b_bar.len(),
                c.len()
            )));
        }
        if !(a_bar.is_finite() && b_bar.iter().chain(&c).all(|v| v.is_finite()) && d.is_finite()) {
            return Err(Error::NonFinite("discrete SSM"));
        }
        Ok(Self { a_bar, b_bar, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.dim()
    }
}

/// Causal convolution kernel `K[j] = C A_bar^j B_bar` plus the skip weight `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub taps: Vec<f64>,
    pub skip: f64,
}

impl ConvKernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}
