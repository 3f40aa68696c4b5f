//! Central-difference gradient verification.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Compare analytic gradients of `forward` against central finite differences
/// `(f(θ+h) − f(θ−h)) / 2h`, element by element, over every parameter.
/// Returns the worst relative error. A closure with no parameters scores 0.
///
/// `forward` must be deterministic: it is re-run once per perturbed element.
pub fn grad_check<B>(forward: B, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {step}")));
    }
    if params.is_empty() {
        return Ok(0.0);
    }

    let eval = |theta: &[Tensor<f64>], tracked: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = theta
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_tracked(tracked);
                tape.leaf(t)
            })
            .collect();
        let loss = forward(&mut tape, &vars)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} in grad_check")));
        }
        let grads = if tracked {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.get(v).cloned()).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;

    let mut worst = 0.0f64;
    let mut theta: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            theta[pi].data_mut()[ei] = orig + step;
            let (fp, _) = eval(&theta, false)?;
            theta[pi].data_mut()[ei] = orig - step;
            let (fm, _) = eval(&theta, false)?;
            theta[pi].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi]
                .as_ref()
                .map(|g| g.data()[ei])
                .unwrap_or(0.0);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric("non-finite gradient in grad_check".into()));
            }
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_model_error_below_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::matrix(3, 4, randn(&mut rng, 12)).unwrap();
        let b = Tensor::vector(randn(&mut rng, 4));
        let x = Tensor::matrix(2, 3, randn(&mut rng, 6)).unwrap();
        let err = grad_check(
            |tape, params| {
                let xv = tape.constant(x.clone());
                let h = tape.matmul(xv, params[0])?;
                let h = tape.add_bias(h, params[1])?;
                Ok(tape.sum_all(h))
            },
            &[w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn zero_parameter_closure_scores_zero() {
        let err = grad_check(
            |tape, _| {
                let x = tape.constant(Tensor::scalar(2.0));
                Ok(tape.sum_all(x))
            },
            &[],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composite_mlp_matches_central_differences() {
        // exercises matmul, bias, activations, layer norm, softmax, cross entropy
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let w1 = Tensor::matrix(5, 6, randn(&mut rng, 30)).unwrap();
        let b1 = Tensor::vector(randn(&mut rng, 6));
        let gamma = Tensor::vector(vec![1.0; 6]);
        let beta = Tensor::vector(vec![0.0; 6]);
        let w2 = Tensor::matrix(6, 4, randn(&mut rng, 24)).unwrap();
        let x = Tensor::matrix(3, 5, randn(&mut rng, 15)).unwrap();
        let err = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let h = tape.matmul(xv, p[0])?;
                let h = tape.add_bias(h, p[1])?;
                let h = tape.activation(h, Activation::Gelu);
                let h = tape.layer_norm(h, p[2], p[3], 1e-5)?;
                let h = tape.matmul(h, p[4])?;
                let pooled = tape.mean_axis0(h)?;
                tape.cross_entropy(pooled, 1)
            },
            &[w1, b1, gamma, beta, w2],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "error {err}");
    }

    #[test]
    fn conv_and_attention_primitives_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Tensor::new(vec![3, 4, 2], randn(&mut rng, 24)).unwrap();
        let b = Tensor::vector(randn(&mut rng, 3));
        let gate_w = Tensor::vector(randn(&mut rng, 3));
        let x = Tensor::matrix(12, 2, randn(&mut rng, 24)).unwrap();
        let err = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let h = tape.conv1d(xv, p[0], p[1], 2, 1)?;
                let sm = tape.softmax(h, 1)?;
                let pooled = tape.mean_axis0(sm)?;
                let prod = tape.mul(pooled, p[2])?;
                let s = tape.sum_all(prod);
                let g = tape.sigmoid(s);
                Ok(tape.sum_all(g))
            },
            &[w, b, gate_w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "error {err}");
    }
}
