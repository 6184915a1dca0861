//! Central finite-difference checks against reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand::rngs::StdRng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many entries per input (sampled without replacement).
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_per_input: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

/// Evaluates `f` and reduces its output to a scalar with fixed pseudo-random
/// weights, so non-scalar outputs are checked along a generic direction.
fn scalar_output<Fun>(f: &Fun, g: &mut Graph<f64>, vars: &[Var]) -> Result<Var>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.value(out).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| {
        let x = ((i as f64 + 1.0) * 0.618_033_988_75).fract();
        x - 0.5
    });
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn eval(f: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = scalar_output(f, &mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the reverse-mode gradient of `f` with respect to every input
/// against central differences.
pub fn check_gradients<Fun>(f: Fun, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = scalar_output(&f, &mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, probes: 0 };
    let mut probe = inputs.to_vec();
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let indices: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            probe[i].data_mut()[idx] = orig + opts.step;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[idx] = orig - opts.step;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, idx));
            }
        }
    }
    Ok(report)
}
