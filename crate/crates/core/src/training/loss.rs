use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Cdrnp, GaussianLatent, LatentNodes, TaskLatents};

/// `KL(q ‖ p)` between diagonal Gaussians, summed over dimensions:
/// `Σ log(σ_p/σ_q) + (σ_q² + (μ_q − μ_p)²) / (2σ_p²) − ½`.
pub fn kl_diag_gaussian(tape: &mut Tape<'_>, q: LatentNodes, p: LatentNodes) -> Result<Var> {
    let dims = [q.mu, q.log_sigma, p.mu, p.log_sigma].map(|v| tape.value(v).len());
    if dims.iter().any(|&n| n != dims[0]) {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            left: vec![dims[0], dims[1]],
            right: vec![dims[2], dims[3]],
        });
    }
    let log_ratio = tape.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = tape.scale(q.log_sigma, 2.0)?;
    let var_q = tape.exp(two_lq)?;
    let dmu = tape.sub(q.mu, p.mu)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let num = tape.add(var_q, dmu2)?;
    let neg_two_lp = tape.scale(p.log_sigma, -2.0)?;
    let inv_var_p = tape.exp(neg_two_lp)?;
    let frac = tape.mul(num, inv_var_p)?;
    let frac = tape.scale(frac, 0.5)?;
    let per_dim = tape.add(log_ratio, frac)?;
    let per_dim = tape.offset(per_dim, -0.5)?;
    tape.sum(per_dim)
}

/// Value-level KL, evaluated on a scratch tape.
pub fn kl_divergence(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let qn = q.record(&mut tape)?;
    let pn = p.record(&mut tape)?;
    let kl = kl_diag_gaussian(&mut tape, qn, pn)?;
    Ok(tape.scalar(kl))
}

/// Mean squared error between prediction nodes and constant targets.
pub fn mse(tape: &mut Tape<'_>, predictions: &[Var], targets: &[f64]) -> Result<Var> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::contract(format!(
            "mse over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let p = tape.stack(predictions)?;
    let t = tape.vector(targets.to_vec())?;
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossNodes {
    /// `L_rec + λ·L_KL`
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
}

/// Episode objective: query-set MSE plus `λ·KL(q(z|Q) ‖ q(z|C))`.
pub fn task_loss(
    tape: &mut Tape<'_>,
    predictions: &[Var],
    targets: &[f64],
    latents: &TaskLatents,
    lambda: f64,
) -> Result<LossNodes> {
    let posterior = latents
        .posterior
        .ok_or_else(|| Error::contract("task loss needs the query-set posterior"))?;
    let rec = mse(tape, predictions, targets)?;
    let kl = kl_diag_gaussian(tape, posterior, latents.prior)?;
    let weighted = tape.scale(kl, lambda)?;
    let total = tape.add(rec, weighted)?;
    Ok(LossNodes { total, rec, kl })
}

/// MSE of the source-domain rating head over `(user, source item, rating)`.
pub fn auxiliary_source_loss(tape: &mut Tape<'_>, model: &Cdrnp, batch: &[(usize, usize, f64)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("auxiliary batch is empty"));
    }
    let preds = batch
        .iter()
        .map(|&(u, i, _)| model.aux_prediction(tape, u, i))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = batch.iter().map(|b| b.2).collect();
    mse(tape, &preds, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], sigma: &[f64]) -> GaussianLatent {
        GaussianLatent {
            mu: mu.to_vec(),
            log_sigma: sigma.iter().map(|s| s.ln()).collect(),
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&g(&[0.0, 0.0], &[1.0, 1.0]), &g(&[0.0, 0.0], &[1.0, 1.0])).unwrap(), 0.0);
        assert!((kl_divergence(&g(&[1.0], &[1.0]), &g(&[0.0], &[1.0])).unwrap() - 0.5).abs() < 1e-12);
        let expect = 1.5 - 2f64.ln();
        assert!((kl_divergence(&g(&[0.0], &[2.0]), &g(&[0.0], &[1.0])).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(matches!(
            kl_divergence(&g(&[0.0], &[1.0]), &g(&[0.0, 1.0], &[1.0, 1.0])),
            Err(Error::Shape { .. })
        ));
    }

    fn latents(t: &mut Tape<'_>, post: Option<&GaussianLatent>, prior: &GaussianLatent) -> TaskLatents {
        let prior = prior.record(t).unwrap();
        let posterior = post.map(|p| p.record(t).unwrap());
        let z = prior.mu;
        let h = prior.mu;
        TaskLatents {
            prior,
            posterior,
            z,
            h,
            epsilon: vec![],
        }
    }

    #[test]
    fn task_loss_components() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = [t.vector(vec![3.0]).unwrap(), t.vector(vec![4.5]).unwrap()];
        let prior = g(&[0.0], &[1.0]);
        let post = g(&[1.0], &[1.0]);

        let lat = latents(&mut t, Some(&post), &prior);
        let l = task_loss(&mut t, &p, &[3.0, 4.5], &lat, 0.3).unwrap();
        assert_eq!(t.scalar(l.rec), 0.0);
        assert!((t.scalar(l.total) - 0.15).abs() < 1e-15);

        let lat = latents(&mut t, Some(&prior), &prior);
        let l = task_loss(&mut t, &p, &[2.0, 4.5], &lat, 0.7).unwrap();
        assert_eq!(t.scalar(l.kl), 0.0);
        assert_eq!(t.scalar(l.total), t.scalar(l.rec));

        let lat = latents(&mut t, Some(&post), &prior);
        let l = task_loss(&mut t, &p, &[2.0, 4.5], &lat, 0.0).unwrap();
        assert_eq!(t.scalar(l.total), t.scalar(l.rec));
        assert_eq!(t.scalar(l.rec), 0.5);

        let lat = latents(&mut t, None, &prior);
        assert!(matches!(task_loss(&mut t, &p, &[2.0, 4.5], &lat, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_length_mismatch() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = t.vector(vec![1.0]).unwrap();
        assert!(mse(&mut t, &[p], &[1.0, 2.0]).is_err());
        assert!(mse(&mut t, &[], &[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_is_non_negative(
                mq in prop::collection::vec(-5.0f64..5.0, 3),
                mp in prop::collection::vec(-5.0f64..5.0, 3),
                lq in prop::collection::vec(-3.0f64..3.0, 3),
                lp in prop::collection::vec(-3.0f64..3.0, 3),
            ) {
                let q = GaussianLatent { mu: mq, log_sigma: lq };
                let p = GaussianLatent { mu: mp, log_sigma: lp };
                prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
            }
        }
    }
}
