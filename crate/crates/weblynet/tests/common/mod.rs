//! Shared test support: the central finite-difference gradient oracle.
//!
//! The oracle only ever calls forward passes; it never touches the
//! backward machinery it is checking.

use weblynet::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;

/// Checks one scalar-valued function of several tensor inputs.
///
/// `build` receives a fresh tape and the current inputs and must return
/// the scalar output variable plus the vars of the inputs whose
/// gradients should be checked (aligned with `inputs`).
pub fn check_gradients<F>(inputs: &[Tensor], build: F, context: &str)
where
    F: Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs);
    assert_eq!(vars.len(), inputs.len(), "{context}: var count mismatch");
    tape.backward(loss).unwrap_or_else(|e| panic!("{context}: backward failed: {e}"));
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();

    // Central differences, one element at a time.
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, perturbed);
        tape.scalar_value(loss)
    };
    let mut worst_rel: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            if denom > ABS_TOL {
                let rel = err / denom;
                worst_rel = worst_rel.max(rel);
                assert!(
                    rel < REL_TOL || err < ABS_TOL,
                    "{context}: input {ti} element {ei}: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
                );
            }
        }
    }
    let _ = worst_rel;
}
