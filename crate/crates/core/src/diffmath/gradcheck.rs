use super::graph::{eval_with_grads, Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub flagged: Vec<FlaggedEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub slots: Vec<SlotCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.slots.iter().map(|s| s.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.slots.iter().all(|s| s.flagged.is_empty())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences for every
/// trainable entry of `params`.
pub fn grad_check<F>(params: &ParamStore, build: F, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let (_, grads) = eval_with_grads(params, &build)?;
    let mut probe = params.clone();
    let mut slots = Vec::new();
    for id in params.ids() {
        let Some(analytic) = grads.get(id) else { continue };
        let mut check = SlotCheck {
            name: params.slot(id).name.clone(),
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for (index, &a) in analytic.iter().enumerate() {
            let orig = probe.slot(id).data[index];
            probe.slot_mut(id).data[index] = orig + epsilon;
            let (plus, _) = eval_with_grads(&probe, &build)?;
            probe.slot_mut(id).data[index] = orig - epsilon;
            let (minus, _) = eval_with_grads(&probe, &build)?;
            probe.slot_mut(id).data[index] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel_error = relative_error(a, numeric);
            check.max_rel_error = check.max_rel_error.max(rel_error);
            if rel_error > tolerance {
                check.flagged.push(FlaggedEntry {
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
        slots.push(check);
    }
    Ok(GradCheckReport { tolerance, slots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let mut p = ParamStore::new();
        let w = p.add_vector("w", vec![3.0], true).unwrap();
        let report = grad_check(
            &p,
            |g| {
                let x = g.param(w)?;
                g.dot(x, x)
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn constant_expression_passes() {
        let mut p = ParamStore::new();
        p.add_vector("w", vec![1.5, -2.0], true).unwrap();
        let report = grad_check(&p, |g| Ok(g.constant(7.0)), 1e-5, 1e-4).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = ParamStore::new();
        assert!(grad_check(&p, |g| Ok(g.constant(1.0)), 0.1, 1e-4).is_err());
        assert!(grad_check(&p, |g| Ok(g.constant(1.0)), 0.0, 1e-4).is_err());
    }

    #[test]
    fn every_op_in_the_vocabulary_checks_out() {
        let mut p = ParamStore::new();
        let a = p.add_vector("a", vec![0.3, -0.7, 1.1], true).unwrap();
        let b = p.add_vector("b", vec![0.9, 0.2, -0.4], true).unwrap();
        let s = p.add_vector("s", vec![1.7], true).unwrap();
        let w = p
            .add_matrix("w", 2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect(), true)
            .unwrap();
        let e = p
            .add_matrix("e", 4, 3, (0..12).map(|i| (i as f64 * 0.91).cos()).collect(), true)
            .unwrap();
        let report = grad_check(
            &p,
            |g| {
                let a = g.param(a)?;
                let b = g.param(b)?;
                let s = g.param(s)?;
                let r = g.row(e, 2)?;
                let ab = g.add_all(&[a, b, r])?;
                let d = g.sub(ab, b)?;
                let cat = g.concat(&[d, b])?;
                let h = g.matvec(w, cat)?;
                let t = g.tanh(h);
                let sm = g.softmax(t);
                let m = g.mul(s, a)?;
                let q = g.div(m, s)?;
                let ex = g.exp(q);
                let sig = g.sigmoid(ex);
                let lg = g.log(sig)?;
                let n = g.l2norm(b);
                let dot = g.dot(a, r)?;
                let sq = g.sq_dist(a, b)?;
                let mean = g.mean(lg);
                let sum = g.sum(sm);
                let sm0 = g.input(vec![1.0, 0.0])?;
                let pick = g.dot(sm, sm0)?;
                let sc = g.scale(sq, 0.5);
                let mul = g.mul(n, dot)?;
                g.add_all(&[mean, sum, pick, sc, mul])
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
