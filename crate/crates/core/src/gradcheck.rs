//! Central-finite-difference verification of tape gradients.

use crate::error::Result;
use crate::rng::{Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare analytic gradients of a scalar loss against central finite
/// differences. `build` must deterministically construct the loss from
/// leaf variables bound to `params` (in order). Returns the maximum of
/// |analytic - numeric| / max(1, |analytic|) over the sampled
/// coordinates (all coordinates when there are at most `max_coords`).
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = Rng::for_stream(seed, Stream::GradCheck);
        // Partial Fisher-Yates: the first max_coords entries become a
        // uniform sample without replacement.
        for i in 0..max_coords {
            let j = i + rng.below(coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, ei) in coords {
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + h;
        let fp = eval(&work)?;
        work[pi].data_mut()[ei] = orig - h;
        let fm = eval(&work)?;
        work[pi].data_mut()[ei] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let exact = analytic[pi].data()[ei];
        let rel = (exact - numeric).abs() / exact.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(w) = w^2 at w = 3: analytic 6.
        let params = [Tensor::scalar(3.0)];
        let err = grad_check(
            |tape, vars| {
                let w = vars[0];
                tape.mul(w, w)
            },
            &params,
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn matmul_chain_gradient_matches() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(3, 4, 1.0, &mut rng);
        let b = Tensor::uniform(4, 2, 1.0, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                let r = tape.relu(c);
                Ok(tape.sum_all(r))
            },
            &[a, b],
            1e-5,
            64,
            1,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }
}
