use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

/// Central finite-difference check of reverse-mode gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            coords_per_tensor: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, coords_per_tensor: usize, seed: u64) -> Self {
        self.coords_per_tensor = Some(coords_per_tensor);
        self.seed = seed;
        self
    }

    /// Maximum of `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`
    /// over the probed coordinates.
    pub fn run<F>(&self, params: &ParamSet, loss_fn: F) -> Result<f64>
    where
        F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::Invalid(format!("eps must be positive, got {}", self.eps)));
        }
        let (graph, loss) = loss_fn(params)?;
        check_finite(graph.value(loss).item())?;
        let analytic = graph.backward(loss, params)?;
        drop(graph);

        let eval = |p: &ParamSet| -> Result<f64> {
            let (g, l) = loss_fn(p)?;
            let v = g.value(l).item();
            check_finite(v)?;
            Ok(v)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let n = params.require(name)?.numel();
            let coords: Vec<usize> = match self.coords_per_tensor {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            let grad = analytic.get(name).expect("gradient map matches params");
            for idx in coords {
                let orig = params.require(name)?.data()[idx];
                probe.get_mut(name).unwrap().data_mut()[idx] = orig + self.eps;
                let plus = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[idx] = orig - self.eps;
                let minus = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[idx] = orig;

                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = grad.data()[idx];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// Checks every coordinate of `params` with step `eps`.
pub fn grad_check<F>(params: &ParamSet, loss_fn: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    GradCheck::new(eps).run(params, loss_fn)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "grad_check" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, data: Vec<f64>) -> ParamSet {
        ParamSet::from_pairs(vec![(name.into(), Tensor::from_vec(data))])
    }

    #[test]
    fn quadratic_loss_matches_closed_form() {
        let params = single("w", vec![0.3, -0.7, 1.1, 0.05]);
        let err = grad_check(
            &params,
            |p| {
                let mut g = Graph::new();
                let w = g.param("w", p.require("w")?.clone());
                let sq = g.mul(w, w)?;
                let s = g.sum(sq)?;
                let half = g.mul_scalar(s, 0.5)?;
                Ok((g, half))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let params = single("w", vec![0.5, 2.0]);
        let err = grad_check(
            &params,
            |p| {
                let mut g = Graph::new();
                let _w = g.param("w", p.require("w")?.clone());
                let c = g.constant(Tensor::scalar(3.0));
                let s = g.sum(c)?;
                Ok((g, s))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let params = single("w", vec![0.5]);
        let r = grad_check(
            &params,
            |p| {
                let mut g = Graph::new();
                let w = g.param("w", p.require("w")?.clone());
                let s = g.sum(w)?;
                Ok((g, s))
            },
            0.0,
        );
        assert!(r.is_err());
    }
}
