use super::ParamTensor;
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v <- momentum * v + grad`, `value <- value - lr * v`.
///
/// Gradients are reset to zero afterwards. All parameters are validated before
/// any of them is modified.
pub fn sgd_step<'a, I>(params: I, lr: f64, momentum: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut ParamTensor>,
{
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Optimizer(format!("learning rate {lr} must be >= 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Optimizer(format!(
            "momentum {momentum} outside [0, 1)"
        )));
    }
    let params: Vec<&mut ParamTensor> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(Error::Optimizer(format!("no gradient for {}", p.name)));
    }
    for p in params {
        let ParamTensor {
            value, velocity, ..
        } = p;
        let grad = value.grad_mut().take().expect("checked above");
        for ((x, v), g) in value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = momentum * *v + g;
            *x -= lr * *v;
        }
        *value.grad_mut() = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}
