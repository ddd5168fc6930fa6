//! Linear centered kernel alignment between two feature batches and the
//! knowledge-transfer loss built on it.
//!
//! For batches `T` (n×d_t) and `S` (n×d_s) with matching rows,
//!
//! ```text
//! CKA(T, S) = ‖Sᵀ T‖²_F / (‖Tᵀ T‖_F · ‖Sᵀ S‖_F)
//! ```
//!
//! optionally after subtracting each feature's batch mean. The value lies in
//! `[0, 1]` and is invariant to isotropic scaling and to orthogonal
//! transforms of the feature axes of either argument.

use crate::diffcore::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn check_pair<F: Scalar>(t: &Tensor<F>, s: &Tensor<F>) -> Result<()> {
    if t.shape().len() != 2 || s.shape().len() != 2 {
        return Err(Error::Shape {
            context: "CKA feature batches".into(),
            expected: "rank-2 matrices".into(),
            actual: format!("{:?} and {:?}", t.shape(), s.shape()),
        });
    }
    if t.rows() != s.rows() {
        return Err(Error::Shape {
            context: "CKA batch sizes".into(),
            expected: format!("{} rows", t.rows()),
            actual: format!("{} rows", s.rows()),
        });
    }
    if t.rows() < 2 {
        return Err(Error::DegenerateCka("batch needs at least two rows"));
    }
    if !t.all_finite() || !s.all_finite() {
        return Err(Error::NonFinite {
            entry: "CKA features".into(),
        });
    }
    Ok(())
}

fn check_nonzero<F: Scalar>(t: &Tensor<F>, s: &Tensor<F>) -> Result<()> {
    if t.data().iter().all(|&v| v == F::ZERO) {
        return Err(Error::DegenerateCka(
            "first batch is all zero after centering",
        ));
    }
    if s.data().iter().all(|&v| v == F::ZERO) {
        return Err(Error::DegenerateCka(
            "second batch is all zero after centering",
        ));
    }
    Ok(())
}

/// CKA similarity of two feature batches, in `[0, 1]`.
pub fn cka_similarity<F: Scalar>(t: &Tensor<F>, s: &Tensor<F>, centered: bool) -> Result<F> {
    check_pair(t, s)?;
    let (t, s) = if centered {
        (t.center_columns(), s.center_columns())
    } else {
        (t.clone(), s.clone())
    };
    check_nonzero(&t, &s)?;
    let cross = s.t_matmul(&t).frobenius_sq().to_f64();
    let tt = t.t_matmul(&t).frobenius_sq().to_f64().sqrt();
    let ss = s.t_matmul(&s).frobenius_sq().to_f64().sqrt();
    let value = cross / (tt * ss);
    if !value.is_finite() {
        return Err(Error::DegenerateCka("Gram norms underflow"));
    }
    // Rounding can leave the ratio a few ulps outside the mathematical range.
    Ok(F::from_f64(value.clamp(0.0, 1.0)))
}

/// `1 − CKA(T, S)`.
pub fn kt_loss<F: Scalar>(t: &Tensor<F>, s: &Tensor<F>, centered: bool) -> Result<F> {
    Ok(F::ONE - cka_similarity(t, s, centered)?)
}

/// Differentiable CKA similarity, a scalar node of the batches' graph.
pub fn cka_similarity_var<'g, F: Scalar>(
    t: Var<'g, F>,
    s: Var<'g, F>,
    centered: bool,
) -> Result<Var<'g, F>> {
    check_pair(&t.value(), &s.value())?;
    let (t, s) = if centered {
        (t.center_columns(), s.center_columns())
    } else {
        (t, s)
    };
    check_nonzero(&t.value(), &s.value())?;
    let cross = s.tn_matmul(t).square().sum();
    let tt = t.tn_matmul(t).square().sum().sqrt();
    let ss = s.tn_matmul(s).square().sum().sqrt();
    Ok(cross / (tt * ss))
}

/// Differentiable knowledge-transfer loss `1 − CKA(T, S)`.
pub fn kt_loss_var<'g, F: Scalar>(
    t: Var<'g, F>,
    s: Var<'g, F>,
    centered: bool,
) -> Result<Var<'g, F>> {
    Ok((-cka_similarity_var(t, s, centered)?).add_scalar(F::ONE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let t = m(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
        for centered in [false, true] {
            assert!((cka_similarity(&t, &t, centered).unwrap() - 1.0).abs() < 1e-12);
            assert!(kt_loss(&t, &t, centered).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_batches_score_zero() {
        let t = m(&[&[1.0], &[0.0]]);
        let s = m(&[&[0.0], &[1.0]]);
        assert_eq!(cka_similarity(&t, &s, false).unwrap(), 0.0);
        assert_eq!(kt_loss(&t, &s, false).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_uncentered_example() {
        // ‖SᵀT‖² = 4, ‖TᵀT‖ = √2, ‖SᵀS‖ = 2√2
        let t = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = m(&[&[1.0, 1.0], &[1.0, -1.0]]);
        assert!((cka_similarity(&t, &s, false).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_leaves_loss_at_zero() {
        let t = m(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0], &[-2.0, 1.0]]);
        let (c, s) = (0.6_f64, 0.8_f64);
        let r = m(&[&[c, -s], &[s, c]]);
        let rotated = t.matmul(&r);
        assert!(kt_loss(&t, &rotated, true).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        let t = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let s = m(&[&[1.0], &[3.0]]);
        assert!(matches!(
            cka_similarity(&t, &s, true),
            Err(Error::DegenerateCka(_))
        ));
        assert!(cka_similarity(&t, &s, false).is_ok());
        let single = m(&[&[1.0]]);
        assert!(cka_similarity(&single, &single, false).is_err());
        assert!(matches!(
            cka_similarity(&t, &m(&[&[1.0], &[2.0], &[3.0]]), false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn differentiable_form_matches_numeric() {
        let t = m(&[&[1.0, 2.0, 0.1], &[0.5, -1.0, 0.3], &[3.0, 0.0, -0.2]]);
        let s = m(&[&[0.2, 1.0], &[-0.5, 0.4], &[1.5, 2.0]]);
        let g = Graph::new();
        for centered in [false, true] {
            let v = cka_similarity_var(g.constant(t.clone()), g.constant(s.clone()), centered)
                .unwrap()
                .item();
            let n = cka_similarity(&t, &s, centered).unwrap();
            assert!((v - n).abs() < 1e-14);
        }
    }
}
