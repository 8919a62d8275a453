//! Central finite-difference checks for graph-built scalar functions.
//!
//! The numeric side only ever calls the forward pass, so it is independent of
//! every backward implementation it is used to validate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::nn::{Forward, ParameterSet};

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)`.
    pub rel_error: f64,
}

impl GradCheck {
    pub(crate) fn from_pairs(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        Self {
            analytic,
            numeric,
            rel_error,
        }
    }
}

/// Compares the backward gradient of `f` against central differences.
///
/// `f` builds a scalar from leaves standing for `inputs`. At most `max_coords`
/// coordinates per input are probed, chosen with a fixed seed.
pub fn check<F>(inputs: &[Tensor], step: f64, max_coords: usize, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let len = inputs[k].len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = grads.wrt(*v);
        for i in coords {
            analytic.push(grad.map_or(0.0, |g| g.data()[i]));
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    GradCheck::from_pairs(analytic, numeric)
}

/// Same comparison for a model loss over every trainable tensor of `params`.
///
/// `f` receives a [`Forward`] in training mode; parameters are probed in name
/// order, at most `max_coords` coordinates each.
pub fn check_params<F>(params: &ParameterSet, step: f64, max_coords: usize, f: F) -> GradCheck
where
    F: Fn(&mut Forward) -> Var,
{
    let mut g = Graph::new();
    let out = {
        let mut fw = Forward::new(&mut g, params, true);
        f(&mut fw)
    };
    let grads = g.backward(out).into_named();

    let eval = |ps: &ParameterSet| {
        let mut g = Graph::new();
        let mut fw = Forward::frozen(&mut g, ps, true);
        let out = f(&mut fw);
        g.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = params.clone();
    let names: Vec<String> = params.params().map(|(k, _)| k.clone()).collect();
    for name in names {
        let len = params.get(&name).expect("listed").len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            analytic.push(grads.get(&name).map_or(0.0, |g| g.data()[i]));
            let orig = params.get(&name).expect("listed").data()[i];
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    GradCheck::from_pairs(analytic, numeric)
}
