use super::{DenseArray, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

/// Worst entry found by [`finite_diff_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max relative error between reverse-mode and central-difference gradients.
pub fn finite_diff_check<F>(build: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    Ok(finite_diff_report(build, params, step)?.max_rel_error)
}

/// Like [`finite_diff_check`] but also names the entry with the largest error.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn finite_diff_report<F>(build: F, params: &ParamSet, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::contract(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric {
                node: l.index(),
                op: "finite-difference",
                detail: format!("loss {v} at perturbed point"),
            });
        }
        Ok(v)
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.clone();
    for (name, value) in params {
        let zeros = DenseArray::zeros(value.shape());
        let a = analytic.get(name).unwrap_or(&zeros);
        for j in 0..value.len() {
            let x0 = value.data()[j];
            work.get_mut(name).expect("cloned").data_mut()[j] = x0 + step;
            let up = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[j] = x0 - step;
            let down = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[j] = x0;

            let numeric = (up - down) / (2.0 * step);
            let an = a.data()[j];
            let rel = (an - numeric).abs() / an.abs().max(1e-8);
            if rel > worst.max_rel_error || worst.param.is_empty() {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: name.clone(),
                    index: j,
                    analytic: an,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w".into(), DenseArray::vector(vec![1.0, -2.0, 0.5]));
        let err = finite_diff_check(
            |g, p| {
                let w = g.param("w", &p["w"]);
                let s = g.square(w)?;
                g.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let p = ParamSet::new();
        let r = finite_diff_check(|g, _| Ok(g.constant(DenseArray::scalar(0.0))), &p, 1e-2);
        assert!(r.is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // Random 3-layer graph touching every differentiable primitive.
        for seed in 0..20 {
            let mut rng = StreamRng::new(seed, "fd");
            let d = 2 + rng.below(7);
            let mut p = ParamSet::new();
            p.insert("w1".into(), DenseArray::randn(&[d, d], 0.7, &mut rng));
            p.insert("b1".into(), DenseArray::randn(&[d], 0.3, &mut rng));
            p.insert("w2".into(), DenseArray::randn(&[d, d], 0.7, &mut rng));
            p.insert("w3".into(), DenseArray::randn(&[d, 3], 0.7, &mut rng));
            let x = DenseArray::randn(&[4, d], 1.0, &mut rng);
            let targets: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let err = finite_diff_check(
                |g, p| {
                    let x = g.constant(x.clone());
                    let w1 = g.param("w1", &p["w1"]);
                    let b1 = g.param("b1", &p["b1"]);
                    let w2 = g.param("w2", &p["w2"]);
                    let w3 = g.param("w3", &p["w3"]);
                    let a = g.matmul(x, w1)?;
                    let a = g.add(a, b1)?;
                    let a = g.tanh(a)?;
                    let a = g.layer_norm(a)?;
                    let b = g.matmul(a, w2)?;
                    let e = g.exp(b)?;
                    let e = g.offset(e, 1.0)?;
                    let l = g.log(e)?;
                    let m = g.mul(l, a)?;
                    let m = g.sub(m, b)?;
                    let o = g.matmul(m, w3)?;
                    let ls = g.log_softmax(o)?;
                    let picked = g.pick(ls, &targets)?;
                    let ce = g.mean(picked)?;
                    let sq = g.square(b1)?;
                    let reg = g.sum(sq)?;
                    let reg = g.scale(reg, 0.1)?;
                    g.sub(reg, ce)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
