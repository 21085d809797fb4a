//! Layer helpers shared by the warp and fusion networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ConvSpec, ParameterSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `+-gain * sqrt(6 / fan_in)`.
    HeUniform(f64),
    Zero,
}

/// Registers `<name>.weight` `[k,k,cin,cout]` and a zero `<name>.bias`.
pub(crate) fn add_conv<T: Real>(
    params: &mut ParameterSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    init: Init,
) -> Result<()> {
    let shape = [k, k, cin, cout];
    let weight = match init {
        Init::HeUniform(gain) => {
            let bound = gain * (6.0 / (k * k * cin) as f64).sqrt();
            Tensor::from_fn(&shape, |_| T::c(rng.random_range(-bound..bound)))
        }
        Init::Zero => Tensor::zeros(&shape),
    };
    params.insert(format!("{name}.weight"), weight)?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
}

/// Convolution with the parameters registered under `name`.
pub(crate) fn conv<T: Real>(
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    name: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.conv2d(x, w, b, spec)
}

pub(crate) fn conv_relu<T: Real>(
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    name: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let y = conv(tape, params, name, x, spec)?;
    Ok(tape.relu(y))
}

/// Output channel count of a registered convolution.
pub(crate) fn conv_width<T: Real>(params: &ParameterSet<T>, name: &str) -> Option<(usize, usize)> {
    match params.get(&format!("{name}.weight"))?.shape() {
        &[_, _, cin, cout] => Some((cin, cout)),
        _ => None,
    }
}
