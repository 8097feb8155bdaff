use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const MIN_EPS: f64 = 1e-6;
pub const MAX_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
    /// Coordinates skipped because a relu or clamp kink lies inside the
    /// finite-difference stencil.
    pub skipped: usize,
    /// Relu inputs that were exactly zero at the base point.
    pub zero_relu_inputs: usize,
}

impl GradCheckReport {
    /// Parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of every parameter in `store`.
///
/// `f` must be deterministic: any sampling noise has to come from an rng it
/// seeds itself. The error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`. Coordinates whose stencil
/// crosses a relu or clamp kink are skipped and counted.
pub fn gradient_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Error::contract(format!(
            "finite-difference step {eps} outside [{MIN_EPS}, {MAX_EPS}]"
        )));
    }

    let (analytic, base_sig, zero_relu_inputs) = {
        let mut tape = Tape::new(store);
        tape.track_kinks();
        let loss = f(&mut tape)?;
        check_finite(tape.scalar(loss))?;
        let sig = tape.kink_signature().to_vec();
        let zeros = tape.zero_relu_inputs();
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = store
            .iter()
            .map(|(id, p)| match grads.param(id) {
                Some(g) => g.to_dense(&p.value).into_data(),
                None => vec![0.0; p.value.len()],
            })
            .collect();
        (analytic, sig, zeros)
    };

    let eval = |store: &ParamStore| -> Result<(f64, Vec<i8>)> {
        let mut tape = Tape::new(store);
        tape.track_kinks();
        let loss = f(&mut tape)?;
        let v = tape.scalar(loss);
        check_finite(v)?;
        Ok((v, tape.kink_signature().to_vec()))
    };

    let mut per_param = Vec::with_capacity(store.len());
    let mut total_skipped = 0;
    let mut max_err: f64 = 0.0;
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let name = store.get(id).name.clone();
        let n = store.get(id).value.len();
        let mut check = ParamCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for c in 0..n {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        total_skipped += check.skipped;
        max_err = max_err.max(check.max_rel_error);
        per_param.push(check);
    }

    Ok(GradCheckReport {
        max_rel_error: max_err,
        per_param,
        skipped: total_skipped,
        zero_relu_inputs,
    })
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient-check objective".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Fault;
    use crate::autodiff::tensor::Tensor;

    fn linear_mse_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.6]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![0.05, -0.1])).unwrap();
        s
    }

    fn linear_mse(t: &mut Tape<'_>) -> Result<Var> {
        let w = t.params().id("w")?;
        let b = t.params().id("b")?;
        let x = t.vector(vec![1.0, -2.0, 0.5])?;
        let y = t.linear(w, x, Some(b))?;
        let target = t.vector(vec![0.4, -0.3])?;
        let d = t.sub(y, target)?;
        let sq = t.mul(d, d)?;
        let s = t.sum(sq)?;
        t.scale(s, 0.5)
    }

    #[test]
    fn linear_mse_passes() {
        let mut s = linear_mse_store();
        let r = gradient_check(&mut s, 1e-5, linear_mse).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn relu_kink_is_flagged_and_skipped() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let r = gradient_check(&mut s, 1e-5, |t| {
            let w = t.params().id("w")?;
            let x = t.vector(vec![1.0])?;
            let y = t.linear(w, x, None)?;
            let y = t.relu(y)?;
            t.sum(y)
        })
        .unwrap();
        assert_eq!(r.zero_relu_inputs, 1);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.per_param[0].checked, 0);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut s = linear_mse_store();
        let r = gradient_check(&mut s, 1e-5, |t| {
            t.inject_fault(Fault::TanhBackward);
            let l = linear_mse(t)?;
            let l = t.tanh(l)?;
            t.sum(l)
        })
        .unwrap();
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn eps_range_is_enforced() {
        let mut s = linear_mse_store();
        assert!(gradient_check(&mut s, 1e-3, linear_mse).is_err());
        assert!(gradient_check(&mut s, 1e-7, linear_mse).is_err());
    }

    #[test]
    fn check_restores_parameters() {
        let mut s = linear_mse_store();
        let before = s.checksum();
        gradient_check(&mut s, 1e-5, linear_mse).unwrap();
        assert_eq!(before, s.checksum());
    }
}
