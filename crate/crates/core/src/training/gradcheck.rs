use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::model::{ConvTransformer, ModelConfig, Preset, SynthesisRequest};
use crate::tensor::{GradFault, Graph, Shape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Minimum number of sampled coordinates; every tensor gets at least one.
    pub coords: usize,
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// level of finite-difference roundoff are compared absolutely.
    pub floor: f64,
    /// Spread of the probe target around the initial prediction.
    pub target_offset: f64,
    /// Frame height and width of the probe request.
    pub frame_size: usize,
    pub fault: Option<GradFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            coords: 256,
            step: 1e-6,
            floor: 1e-6,
            target_offset: 0.1,
            frame_size: Preset::Micro.frame_size(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub coords: usize,
    pub tensors: usize,
    /// Worst relative error per input tensor, in input order.
    pub per_tensor: Vec<(String, f64)>,
    pub worst: CoordError,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.rel_error
    }

    pub fn offenders(&self, threshold: f64) -> Vec<String> {
        self.per_tensor
            .iter()
            .filter(|(_, e)| !(*e < threshold))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// `Err(GradCheck)` naming every tensor at or above `threshold`.
    pub fn check(self, threshold: f64) -> Result<Self> {
        let offenders = self.offenders(threshold);
        if offenders.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                max_rel_error: self.max_rel_error(),
                offenders,
            })
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central finite differences at sampled coordinates.
///
/// `build` records the function on a fresh graph given one leaf per input.
pub fn check_gradients<F>(
    inputs: &[(String, Tensor<f64>)],
    build: F,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::invalid("gradient check needs at least one input"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    if let Some(f) = opts.fault {
        g.inject_fault(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let grads: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|((name, t), &v)| g.grad(v).cloned().ok_or_else(|| Error::MissingGrad(name.clone())).map(|gr| {
            debug_assert_eq!(gr.shape(), t.shape());
            gr
        }))
        .collect::<Result<_>>()?;

    let total: usize = inputs.iter().map(|(_, t)| t.numel()).sum();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut per_tensor = Vec::with_capacity(inputs.len());
    let mut worst: Option<CoordError> = None;
    let mut coords = 0;
    for (k, (name, t)) in inputs.iter().enumerate() {
        let share = (opts.coords * t.numel()).div_ceil(total).clamp(1, t.numel());
        let picks = rand::seq::index::sample(&mut rng, t.numel(), share);
        let mut tensor_worst: f64 = 0.0;
        for i in picks.iter() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + opts.step;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - opts.step;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads[k].data()[i];
            let rel = relative_error(analytic, numeric, opts.floor);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            tensor_worst = tensor_worst.max(rel);
            coords += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(CoordError {
                    param: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(GradcheckReport {
        coords,
        tensors: inputs.len(),
        per_tensor,
        worst: worst.expect("at least one coordinate"),
    })
}

/// Full-model gradient check of the MSE objective at 64-bit precision.
///
/// The probe is an extrapolation request with four input frames and two
/// query tokens, so every attention path carries more than one key. The
/// target sits a small random offset away from the initial prediction, which
/// keeps the loss, and with it the finite-difference roundoff, small.
pub fn gradcheck(config: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = ConvTransformer::new(config.clone())?;
    let size = opts.frame_size;
    config.check_frame_size(size, size)?;
    let params = model.init_params::<f64>(seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let mut random = |n: usize| Tensor::from_fn(Shape::new(n, 3, size, size), |_, _, _, _| rng.random::<f64>());
    let frames = random(4);
    let request = SynthesisRequest::extrapolate(frames, vec![1.0, 2.0, 3.0, 4.0], 2)?;
    let pred = model.predict_raw(&params, &request)?;
    let offset = random(2);
    let target = Tensor::from_fn(pred.shape(), |n, c, y, x| {
        pred.get(n, c, y, x) + opts.target_offset * (offset.get(n, c, y, x) - 0.5)
    });

    let inputs: Vec<(String, Tensor<f64>)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    check_gradients(
        &inputs,
        |g, p| {
            let out = model.forward(g, p, &request)?;
            let t = g.constant(target.clone());
            g.mse(out.frames, t)
        },
        seed,
        opts,
    )
}
