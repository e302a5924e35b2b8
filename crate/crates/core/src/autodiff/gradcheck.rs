//! Central finite-difference verification of analytic gradients.

use super::tape::{Scalar, Tape, Var};
use ndarray::ArrayD;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at every element of every input. Returns the maximum
/// relative error, with `floor` guarding the denominator.
pub fn max_rel_error<F: Scalar>(
    f: &dyn Fn(&Tape<F>, &[Var<F>]) -> Var<F>,
    inputs: &[ArrayD<F>],
    eps: F,
    floor: F,
) -> f64 {
    // analytic gradients
    let tape = Tape::new();
    let leaves: Vec<Var<F>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&tape, &leaves);
    assert_eq!(loss.len(), 1, "gradcheck expects a scalar loss");
    let grads = tape.backward(&loss);
    let analytic: Vec<ArrayD<F>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, x)| {
            grads
                .get(l)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect();

    let eval = |inputs: &[ArrayD<F>]| -> F {
        let tape = Tape::new();
        let leaves: Vec<Var<F>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        f(&tape, &leaves).scalar()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<F>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = *input.iter().nth(j).unwrap();
            {
                let slot = work[i].iter_mut().nth(j).unwrap();
                *slot = orig + eps;
            }
            let plus = eval(&work);
            {
                let slot = work[i].iter_mut().nth(j).unwrap();
                *slot = orig - eps;
            }
            let minus = eval(&work);
            {
                let slot = work[i].iter_mut().nth(j).unwrap();
                *slot = orig;
            }
            let numeric = (plus - minus) / (F::lit(2.0) * eps);
            let a = *analytic[i].iter().nth(j).unwrap();
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = ((a - numeric).abs() / denom).to_f64();
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};

    #[test]
    fn elementwise_chain() {
        let f = |_t: &Tape<f64>, xs: &[Var<f64>]| {
            xs[0].gelu().mul(&xs[1].sigmoid()).sum_all()
        };
        let a = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let b = arr1(&[-0.5, 0.7, 0.1]).into_dyn();
        let err = max_rel_error(&f, &[a, b], 1e-5, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let f = |_t: &Tape<f64>, xs: &[Var<f64>]| {
            let y = xs[0].matmul(&xs[1]).softmax_last();
            // weighted sum keeps the probe non-symmetric
            let w = xs[0].tape().var(arr2(&[[0.3, -0.7, 1.3], [0.11, 0.5, -0.2]]));
            y.mul(&w).sum_all()
        };
        let a = arr2(&[[0.4, 0.1], [-0.3, 0.8]]).into_dyn();
        let b = arr2(&[[0.2, -0.1, 0.5], [0.7, 0.3, -0.4]]).into_dyn();
        let err = max_rel_error(&f, &[a, b], 1e-5, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn layernorm_chain() {
        let f = |t: &Tape<f64>, xs: &[Var<f64>]| {
            let w = t.var(arr1(&[1.1, 0.9, 1.3, 0.8]));
            let b = t.var(arr1(&[0.0, 0.2, -0.1, 0.05]));
            let probe = t.var(arr2(&[[0.9, -0.3, 0.4, 1.7], [0.2, 0.8, -0.6, 0.3]]));
            xs[0].layernorm(&w, &b, 1e-5).mul(&probe).sum_all()
        };
        let x = arr2(&[[0.5, -1.0, 2.0, 0.3], [1.5, 0.2, -0.7, 0.9]]).into_dyn();
        let err = max_rel_error(&f, &[x], 1e-5, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn conv_and_bilinear_sample_chain() {
        let f = |t: &Tape<f64>, xs: &[Var<f64>]| {
            let b = t.var(arr1(&[0.05, -0.02]));
            let plane = xs[0].conv2d(&xs[1], &b, 1, 1);
            let coords = xs[2].clone();
            let sampled = Var::bilinear_sample(&plane, &coords);
            sampled.sum_all()
        };
        let x = Array::from_shape_fn((2, 5, 5), |(c, i, j)| {
            ((c + 1) as f64 * 0.3 + i as f64 * 0.21 - j as f64 * 0.17).sin()
        })
        .into_dyn();
        let w = Array::from_shape_fn((2, 2, 3, 3), |(a, b, i, j)| {
            0.1 * ((a * 7 + b * 3 + i + 2 * j) as f64 * 0.37).cos()
        })
        .into_dyn();
        let coords = arr2(&[[1.3, 2.6], [0.4, 0.7], [3.2, 1.8]]).into_dyn();
        let err = max_rel_error(&f, &[x, w, coords], 1e-6, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn splat_average_gradient() {
        let f = |_t: &Tape<f64>, xs: &[Var<f64>]| {
            let coords = arr2(&[[0.5, 0.5], [0.5, 0.5], [2.0, 1.0]]);
            let plane = Var::splat_average(&xs[0], &coords, 3, 3);
            plane.mul(&plane).sum_all()
        };
        let feats = arr2(&[[1.0, -0.5], [0.3, 0.8], [2.0, 0.1]]).into_dyn();
        let err = max_rel_error(&f, &[feats], 1e-6, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }
}
