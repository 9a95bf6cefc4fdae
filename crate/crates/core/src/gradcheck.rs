//! Central finite differences against the tape, for single ops and for the
//! full encoder + projector + cosine loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference derivative of `f` along coordinate `index` of `x`.
pub fn central_difference(f: &impl Fn(&Tensor) -> Result<f64>, x: &Tensor, index: usize, h: f64) -> Result<f64> {
    let mut plus = x.clone();
    plus.data_mut()[index] += h;
    let mut minus = x.clone();
    minus.data_mut()[index] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        grad.data_mut()[i] = central_difference(&f, x, i, h)?;
    }
    Ok(grad)
}

/// Largest elementwise relative error between a tape gradient and finite
/// differences of the same scalar function.
pub fn max_op_error(
    x: &Tensor,
    h: f64,
    build: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<f64> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = build(&tape, leaf)?;
    let analytic = tape.backward(out)?.take(&leaf).expect("leaf requires grad");
    let numeric = numeric_gradient(
        |y| {
            let t = Tape::new();
            let v = t.constant(y.clone());
            Ok(build(&t, v)?.value().item())
        },
        x,
        h,
    )?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub checks: Vec<PixelCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,analytic,numeric,rel_err")?;
        for c in &self.checks {
            writeln!(out, "{},{:e},{:e},{:e}", c.index, c.analytic, c.numeric, c.rel_err)?;
        }
        Ok(())
    }
}

fn pipeline_loss(enc: &VisionEncoder, image: &Tensor, reference: &Tensor, eps: f64) -> Result<f64> {
    let f = enc.features(image)?.projected;
    Ok(1.0 - cosine_similarity(&f, reference, eps)?)
}

/// Checks `d(1 - cos(g(f(I)), F_ref)) / dI` on `pixels` distinct random
/// coordinates. `F_ref` comes from a second random image: near its own
/// reference the loss is flat and differences drown in rounding.
pub fn pipeline_gradcheck(enc: &VisionEncoder, pixels: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    let shape = enc.config().image_shape();
    let numel: usize = shape.iter().product();
    if pixels == 0 || pixels > numel {
        return Err(Error::invalid("pipeline_gradcheck", format!("pixels must lie in 1..={numel}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = h.abs();
    let mut draw = || Tensor::from_fn(&shape, |_| rng.gen_range(margin..1.0 - margin));
    let point = draw();
    let reference = enc.features(&draw())?.projected;
    let eps = 1e-8;

    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let (e, _) = enc.encode(&tape, x)?;
    let f = enc.project(&tape, e)?;
    let loss = f.cosine_similarity(&tape.constant(reference.clone()), eps)?.affine(-1.0, 1.0);
    let grad = tape.backward(loss)?.take(&x).expect("input requires grad");
    if !grad.is_finite() {
        return Err(Error::NonFinite { context: "pipeline gradient".into() });
    }

    let mut indices = sample(&mut rng, numel, pixels).into_vec();
    indices.sort_unstable();
    let f = |img: &Tensor| pipeline_loss(enc, img, &reference, eps);
    let checks = indices
        .into_iter()
        .map(|index| {
            let numeric = central_difference(&f, &point, index, h)?;
            let analytic = grad.data()[index];
            Ok(PixelCheck {
                index,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradcheckReport { step: h, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-10, 0.0), 1e-10 / 1e-8);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }
}
