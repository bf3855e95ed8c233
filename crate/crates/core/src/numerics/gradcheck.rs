use super::{NumericsError, ParamStore, Tape, Var};

/// Compare reverse-mode gradients of `f` against central finite differences
/// for every trainable parameter entry.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)`. `f` must be
/// deterministic; it is evaluated twice on the unperturbed store and the
/// two losses must agree bit for bit.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NumericsError::InvalidArgument(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item();
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(NumericsError::NonDeterministic);
    }
    let analytic = tape.backward(loss)?.param_grads(store);

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (id, grad) in &analytic {
        for k in 0..grad.len() {
            let orig = work.value(*id).data()[k];
            work.value_mut(*id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(*id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(*id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::column(vec![0.3, -1.1, 2.0]));
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let err = grad_check(&store, 1e-5, |tape, s| {
            let xv = tape.param(s, x);
            let av = tape.constant(a.clone());
            let ax = tape.matmul(av, xv)?;
            let q = tape.matmul_t(xv, true, ax, false)?;
            tape.sum(q)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let store = ParamStore::new();
        let r = grad_check(&store, 1e-2, |tape, _| Ok(tape.constant(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(NumericsError::InvalidArgument(_))));
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let calls = AtomicUsize::new(0);
        let r = grad_check(&store, 1e-5, |tape, s| {
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let xv = tape.param(s, x);
            tape.scale(xv, 1.0 + k)
        });
        assert!(matches!(r, Err(NumericsError::NonDeterministic)));
    }
}
