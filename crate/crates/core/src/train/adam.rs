use crate::error::{Error, Result};
use crate::model::checkpoint::AdamState;
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::TrainConfig;

fn update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    hp: &Hyper<T>,
) {
    let p = param.data_mut();
    let (m, v) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = hp.beta1 * m[i] + (T::one() - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (T::one() - hp.beta2) * g * g;
        let m_hat = m[i] / hp.correction1;
        let v_hat = v[i] / hp.correction2;
        p[i] = p[i] - hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

struct Hyper<T> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    correction1: T,
    correction2: T,
}

/// One Adam update of every parameter.
///
/// `t ← t + 1; m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²;
/// θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    // Validate everything before touching any state.
    for p in params.iter() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for layer '{}'", p.name)))?;
        let m = state.first_moment.get(&p.name);
        let v = state.second_moment.get(&p.name);
        let shapes_ok = g.weight.shape() == p.weight.shape()
            && g.bias.shape() == p.bias.shape()
            && m.is_some_and(|m| m.weight.shape() == p.weight.shape() && m.bias.shape() == p.bias.shape())
            && v.is_some_and(|v| v.weight.shape() == p.weight.shape() && v.bias.shape() == p.bias.shape());
        if !shapes_ok {
            return Err(Error::invalid(format!(
                "gradient or optimizer state shape mismatch for layer '{}'",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = i32::try_from(state.t).map_err(|_| Error::invalid("step counter overflow"))?;
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let hp = Hyper {
        lr: T::from_f64(config.learning_rate),
        beta1,
        beta2,
        epsilon: T::from_f64(config.epsilon),
        correction1: T::one() - beta1.powi(t),
        correction2: T::one() - beta2.powi(t),
    };
    for p in params.iter_mut() {
        let g = grads.get(&p.name).expect("validated");
        let m = state.first_moment.get_mut(&p.name).expect("validated");
        let v = state.second_moment.get_mut(&p.name).expect("validated");
        update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, &hp);
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, &hp);
    }
    Ok(())
}
