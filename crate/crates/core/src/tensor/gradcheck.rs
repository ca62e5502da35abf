//! Finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over checked components of `|analytic - numeric| / max(1, |analytic|)`,
/// where `numeric` is a central difference with step `h`, or with step `h/10`
/// when that agrees better. A component whose step straddles a ReLU kink or
/// a max-pool switch is biased at one step size but not at the other; a wrong
/// derivative disagrees at both.
///
/// `build` receives the inputs as gradient-tracking leaves and returns the
/// output node. Non-scalar outputs are contracted with a fixed cotangent so a
/// single sweep checks the full Jacobian-vector product.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(build, inputs, h, usize::MAX, 0)
}

/// Like [`grad_check`], but checks at most `per_input` randomly chosen
/// components of each input.
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[Tensor],
    h: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    if let Some(op) = g.find_nondifferentiable(out) {
        return Err(Error::Unsupported(format!(
            "`{op}` has no registered derivative"
        )));
    }
    let cotangent = cotangent(g.value(out).len());
    g.backward_seeded(out, cotangent.clone())?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .expect("leaf gradients exist after backward")
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(&cotangent)
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let components: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_input).into_vec();
            c.sort_unstable();
            c
        };
        for j in components {
            let a = analytic[i].data()[j];
            let mut err = f64::INFINITY;
            for step in [h, h / 10.0] {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                err = err.min((a - numeric).abs() / a.abs().max(1.0));
                if err < 1e-7 {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn cotangent(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 + 0.5 * ((i as f64) * 0.7381).sin())
        .collect()
}
