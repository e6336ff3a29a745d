use nalgebra::{DMatrix, DVector};

use super::params::{DiscreteSsm, SsmParams, StateMatrix};
use crate::error::Result;

/// Below this norm of `ΔA` the input matrix is evaluated by its power series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

const SERIES_REL_TOL: f64 = 1e-15;
const SERIES_MAX_TERMS: usize = 400;
/// Pivot ratio under which the LU solve is treated as singular.
const PIVOT_RATIO_MIN: f64 = 1e-12;

/// Zero-order-hold discretisation.
pub fn discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    p.check_finite()?;
    let delta = p.delta;
    let (a_bar, b_bar) = match &p.a {
        StateMatrix::Diagonal(diag) => {
            let mut a_bar = Vec::with_capacity(diag.len());
            let mut b_bar = Vec::with_capacity(diag.len());
            for (&a, &b) in diag.iter().zip(&p.b) {
                let (ab, scale) = zoh_scalar(a, delta);
                a_bar.push(ab);
                b_bar.push(scale * b);
            }
            (StateMatrix::Diagonal(a_bar), b_bar)
        }
        StateMatrix::Dense(a) => {
            let da = a * delta;
            let exp = da.clone().exp();
            let db = DVector::from_column_slice(&p.b) * delta;
            let b_bar = dense_input_matrix(&da, &exp, &db);
            (StateMatrix::Dense(exp), b_bar.as_slice().to_vec())
        }
    };
    DiscreteSsm::from_parts(a_bar, b_bar, p.c.clone(), p.d)
}

/// Scalar ZOH: returns `(exp(Δa), s)` with `B_bar = s · B`, where
/// `s = (exp(Δa) - 1) / a`, or its series `Δ (1 + Δa/2! + (Δa)²/3! + …)` when
/// `|Δa|` is below [`SERIES_THRESHOLD`].
#[inline]
pub fn zoh_scalar(a: f64, delta: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    if x.abs() < SERIES_THRESHOLD {
        // Three terms already reach 1e-18 relative at |x| < 1e-6.
        (a_bar, delta * (1.0 + x / 2.0 + x * x / 6.0))
    } else {
        (a_bar, x.exp_m1() / a)
    }
}

/// `B_bar = (ΔA)^-1 (exp(ΔA) - I) ΔB`, falling back to the series
/// `Σ_k (ΔA)^k / (k+1)! ΔB` when `ΔA` is tiny or numerically singular.
fn dense_input_matrix(da: &DMatrix<f64>, exp: &DMatrix<f64>, db: &DVector<f64>) -> DVector<f64> {
    let n = da.nrows();
    if da.abs().column_sum().max() < SERIES_THRESHOLD {
        return phi1_series(da, db);
    }
    let lu = da.clone().lu();
    let u = lu.u();
    let diag = u.diagonal().abs();
    let (lo, hi) = (diag.min(), diag.max());
    if hi == 0.0 || lo / hi < PIVOT_RATIO_MIN {
        return phi1_series(da, db);
    }
    let rhs = (exp - DMatrix::<f64>::identity(n, n)) * db;
    match lu.solve(&rhs) {
        Some(x) => x,
        None => phi1_series(da, db),
    }
}

fn phi1_series(da: &DMatrix<f64>, db: &DVector<f64>) -> DVector<f64> {
    let mut term = db.clone();
    let mut sum = term.clone();
    for k in 1..SERIES_MAX_TERMS {
        term = (da * &term) / (k as f64 + 1.0);
        sum += &term;
        if term.amax() <= SERIES_REL_TOL * sum.amax() {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, delta: f64) -> DiscreteSsm {
        let p = SsmParams::new(StateMatrix::Dense(DMatrix::from_element(1, 1, a)), vec![b], vec![1.0], 0.0, delta)
            .unwrap();
        discretize(&p).unwrap()
    }

    #[test]
    fn zero_state_matrix_gives_delta_b() {
        for delta in [1e-3, 0.5, 3.0] {
            let d = scalar(0.0, 2.5, delta);
            assert_eq!(d.a_bar.to_dense()[(0, 0)], 1.0);
            assert!((d.b_bar[0] - delta * 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_rate_over_ln2_doubles() {
        let d = scalar(1.0, 0.75, std::f64::consts::LN_2);
        assert!((d.a_bar.to_dense()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((d.b_bar[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn diagonal_and_dense_agree() {
        let diag = vec![-1.0, -2.0, -0.5, 0.0];
        let b = vec![1.0, 0.5, -2.0, 3.0];
        let c = vec![1.0; 4];
        let pd = SsmParams::new(StateMatrix::Diagonal(diag.clone()), b.clone(), c.clone(), 0.3, 0.2).unwrap();
        let pm = SsmParams::new(StateMatrix::Dense(StateMatrix::Diagonal(diag).to_dense()), b, c, 0.3, 0.2).unwrap();
        let (dd, dm) = (discretize(&pd).unwrap(), discretize(&pm).unwrap());
        assert!((dd.a_bar.to_dense() - dm.a_bar.to_dense()).amax() < 1e-14);
        for (x, y) in dd.b_bar.iter().zip(&dm.b_bar) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zoh_scalar_is_continuous_across_threshold() {
        let a = 1.0;
        let (_, below) = zoh_scalar(a, 0.999e-6);
        let (_, above) = zoh_scalar(a, 1.001e-6);
        assert!((above - below - 0.002e-6).abs() < 1e-14);
    }

    #[test]
    fn singular_dense_matrix_uses_series() {
        // Nilpotent: exp(ΔA) = I + ΔA, B_bar = (I + ΔA/2) ΔB exactly.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let p = SsmParams::new(StateMatrix::Dense(a), vec![0.0, 1.0], vec![1.0, 0.0], 0.0, 0.5).unwrap();
        let d = discretize(&p).unwrap();
        assert!((d.b_bar[0] - 0.125).abs() < 1e-15);
        assert!((d.b_bar[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        let p = SsmParams {
            a: StateMatrix::Diagonal(vec![f64::NAN]),
            b: vec![1.0],
            c: vec![1.0],
            d: 0.0,
            delta: 1.0,
        };
        assert!(discretize(&p).is_err());
    }

}
