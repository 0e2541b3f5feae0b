//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker evaluates the caller's forward function as a black box:
//! gradients are compared against `(f(x+h) - f(x-h)) / 2h` coordinate by
//! coordinate, so it stays independent of the backward implementation it
//! is judging. Checks run in f64, where the h = 1e-4 stencil leaves plenty
//! of headroom below the 1e-4 relative tolerance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::stream;
use crate::tensor::{backward, Scalar, Tensor};

pub const STENCIL_H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} coords, max rel {:.3e}, max abs {:.3e})",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.coords_checked,
            self.max_rel_err,
            self.max_abs_err,
        )
    }
}

/// Check `build`'s gradient at a random point with inputs drawn uniformly
/// from [-1, 1]. `build` must map leaf tensors of the given shapes to a
/// scalar loss.
pub fn check<B>(name: &str, shapes: &[Vec<usize>], seed: u64, build: B) -> GradCheckReport
where
    B: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let mut rng: ChaCha8Rng = stream(seed, "gradcheck", 0);
    let flats: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    check_at(name, shapes, &flats, build)
}

/// Check `build`'s gradient at an explicit point.
pub fn check_at<B>(
    name: &str,
    shapes: &[Vec<usize>],
    values: &[Vec<f64>],
    build: B,
) -> GradCheckReport
where
    B: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(values)
        .map(|(s, v)| Tensor::leaf(s.clone(), v.clone(), true))
        .collect();
    let loss = build(&leaves);
    let grads = backward(&loss);

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| Tensor::leaf(s.clone(), v.clone(), false))
            .collect();
        build(&inputs).item()
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut coords = 0;
    let mut pass = true;
    for (ti, leaf) in leaves.iter().enumerate() {
        let ad = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.len()]);
        for ci in 0..leaf.len() {
            let mut plus = values.to_vec();
            plus[ti][ci] += STENCIL_H;
            let mut minus = values.to_vec();
            minus[ti][ci] -= STENCIL_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STENCIL_H);
            let a = ad[ci];
            let abs_err = (a - fd).abs();
            let denom = a.abs().max(fd.abs());
            coords += 1;
            if denom < ABS_TOL {
                max_abs = max_abs.max(abs_err);
                if abs_err >= ABS_TOL {
                    pass = false;
                }
            } else {
                let rel = abs_err / denom;
                max_rel = max_rel.max(rel);
                if rel >= REL_TOL {
                    pass = false;
                }
            }
        }
    }
    GradCheckReport {
        name: name.to_string(),
        coords_checked: coords,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        pass,
    }
}

/// Plain central differences of a scalar function, for oracle use in tests.
pub fn central_diff<G: Fn(&[f64]) -> f64>(f: G, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}
