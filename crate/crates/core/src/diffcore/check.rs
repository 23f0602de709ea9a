use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest magnitude used as the denominator of a relative error, so that
/// gradients that are zero up to roundoff are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Evaluates `program` on fresh leaves holding `inputs` and returns the
/// scalar value together with the gradient for every input.
pub fn forward_backward<T, F>(program: F, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = program(&mut g, &ids)?;
    let grads = g.backward(root)?;
    let value = g.value(root).clone();
    let per_input = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| grads.get_or_zeros(*id, t.shape()))
        .collect();
    Ok((value, per_input))
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.inputs.iter().all(|c| c.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares a supplied analytic gradient against central differences of a
/// scalar function. `eval` must be a pure function of its argument.
pub fn compare_with_central_differences<T, E>(
    eval: E,
    point: &[Tensor<T>],
    analytic: &[Tensor<T>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    E: Fn(&[Tensor<T>]) -> Result<f64>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid(format!(
            "gradient check needs step > 0 and tol > 0 (got {} / {})",
            step, tol
        )));
    }
    let mut work: Vec<Tensor<T>> = point.to_vec();
    let mut inputs = Vec::with_capacity(point.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = T::of(orig.f64() + step);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = T::of(orig.f64() - step);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(grad.data()[j].f64(), numeric);
            if e > worst.0 || e.is_nan() {
                worst = (if e.is_nan() { f64::INFINITY } else { e }, j);
            }
        }
        inputs.push(InputCheck {
            max_rel_err: worst.0,
            worst: worst.1,
            pass: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport { inputs })
}

/// Central-difference check of `program`'s analytic gradients at `point`.
pub fn gradient_check<T, F>(program: F, point: &[Tensor<T>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid(format!(
            "gradient check needs step > 0 and tol > 0 (got {} / {})",
            step, tol
        )));
    }
    let (_, analytic) = forward_backward(&program, point)?;
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = program(&mut g, &ids)?;
        g.value(root)
            .item()
            .map(|v| v.f64())
            .ok_or_else(|| Error::NonScalar(root.index(), g.shape(root).to_vec()))
    };
    compare_with_central_differences(eval, point, &analytic, step, tol)
}
