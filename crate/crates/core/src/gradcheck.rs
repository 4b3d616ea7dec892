//! Finite-difference verification of full-network gradients.
//!
//! Every parameter of a small network is perturbed by `±step` and the central
//! difference of the training loss is compared with the analytic gradient.
//! A draw is rerolled when a perturbation flips a ReLU, a max-pooling winner
//! or the score clamp, since the loss is not differentiable there.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BagForward, Fault, Mode, Network, NetworkSpec, Variant};
use crate::numerics::{mix_seed, Matrix, Rng};
use crate::pooling::{PoolingMethod, PoolingSpec};
use crate::training::clamp_score;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub input_dim: usize,
    pub instances: usize,
    pub lse_r: f64,
    pub seed: u64,
    pub max_rerolls: usize,
    /// Overrides the default reduced widths for every variant.
    pub widths: Option<Vec<usize>>,
    /// Check only this many randomly chosen parameters (all when `None`).
    pub sample: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            input_dim: 20,
            instances: 10,
            lse_r: 2.0,
            seed: 0,
            max_rerolls: 50,
            widths: None,
            sample: None,
            fault: None,
        }
    }
}

/// Widths used when none are given: all four layers shrunk so that every
/// parameter can be checked quickly.
pub fn default_widths(variant: Variant) -> Vec<usize> {
    match variant {
        Variant::MINetRc => vec![32, 32, 32, 1],
        _ => vec![64, 32, 16, 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationResult {
    pub variant: Variant,
    pub pooling: PoolingMethod,
    pub max_rel_error: f64,
    /// Parameter with the largest error, e.g. `trunk.1.w[3,7]`.
    pub worst_parameter: String,
    pub parameters_checked: usize,
    pub rerolls: usize,
    pub passed: bool,
}

impl fmt::Display for CombinationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<4} max_rel_err={:.3e} worst={} params={} rerolls={} {}",
            self.variant.name(),
            self.pooling.name(),
            self.max_rel_error,
            self.worst_parameter,
            self.parameters_checked,
            self.rerolls,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Discrete state of a forward pass; the loss is smooth while it is constant.
#[derive(Debug, PartialEq, Eq)]
struct Signature {
    relu: Vec<bool>,
    argmax: Vec<usize>,
    clamped: Vec<bool>,
}

fn signature(fwd: &BagForward) -> Signature {
    let tape = fwd.tape.as_ref().expect("recorded forward");
    Signature {
        relu: tape
            .pre
            .iter()
            .flat_map(|p| p.as_slice().iter().map(|&z| z > 0.0))
            .collect(),
        argmax: tape
            .pools
            .iter()
            .filter_map(|c| c.argmax())
            .flat_map(|a| a.iter().copied())
            .collect(),
        clamped: fwd.level_scores.iter().map(|&s| clamp_score(s) != s).collect(),
    }
}

struct Draw {
    net: Network,
    bag: Matrix,
    label: u8,
}

fn make_draw(variant: Variant, pooling: PoolingSpec, opts: &GradcheckOptions, seed: u64) -> Result<Draw> {
    let mut rng = Rng::new(seed);
    let widths = opts.widths.clone().unwrap_or_else(|| default_widths(variant));
    let spec = NetworkSpec::new(variant)
        .with_widths(widths)
        .with_pooling(pooling)
        .with_dropout(0.0)
        .with_seed(rng.next_u64());
    let mut net = Network::build(&spec, opts.input_dim)?;
    for (_, layer) in net.layers_mut() {
        for b in layer.bias_mut().as_mut_slice() {
            *b = rng.uniform(-0.1, 0.1);
        }
    }
    net.inject_fault(opts.fault);
    let mut bag = Matrix::zeros(opts.instances, opts.input_dim);
    for v in bag.as_mut_slice() {
        *v = rng.uniform(-1.0, 1.0);
    }
    let label = u8::from(rng.uniform01() < 0.5);
    Ok(Draw { net, bag, label })
}

enum Outcome {
    Done {
        max_rel: f64,
        worst: String,
        checked: usize,
    },
    Kink,
}

fn check_draw(draw: &mut Draw, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Outcome> {
    let mut scratch = Rng::new(0);
    let net = &mut draw.net;
    net.zero_grad();
    let fwd = net.forward(&draw.bag, Mode::Eval, &mut scratch)?;
    let base = signature(&fwd);
    net.backward(&fwd, draw.label)?;

    // (layer, is_bias, flat index, analytic gradient)
    let mut params: Vec<(usize, bool, usize, f64)> = Vec::new();
    for (li, (_, layer)) in net.layers().enumerate() {
        params.extend(
            layer
                .grad_weights()
                .as_slice()
                .iter()
                .enumerate()
                .map(|(k, &g)| (li, false, k, g)),
        );
        params.extend(
            layer
                .grad_bias()
                .as_slice()
                .iter()
                .enumerate()
                .map(|(k, &g)| (li, true, k, g)),
        );
    }
    if let Some(n) = opts.sample {
        rng.shuffle(&mut params);
        params.truncate(n);
    }

    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for &(li, is_bias, k, analytic) in &params {
        let mut loss_at = |delta: f64| -> Result<Option<f64>> {
            let original = {
                let (_, layer) = net.layers_mut().nth(li).expect("layer index");
                let slot = if is_bias {
                    &mut layer.bias_mut().as_mut_slice()[k]
                } else {
                    &mut layer.weights_mut().as_mut_slice()[k]
                };
                let original = *slot;
                *slot = original + delta;
                original
            };
            let fwd = net.forward(&draw.bag, Mode::Eval, &mut scratch)?;
            let same = signature(&fwd) == base;
            let loss = net.loss(&fwd, draw.label);
            let (_, layer) = net.layers_mut().nth(li).expect("layer index");
            if is_bias {
                layer.bias_mut().as_mut_slice()[k] = original;
            } else {
                layer.weights_mut().as_mut_slice()[k] = original;
            }
            Ok(same.then_some(loss))
        };
        let (Some(up), Some(down)) = (loss_at(opts.step)?, loss_at(-opts.step)?) else {
            return Ok(Outcome::Kink);
        };
        let numeric = (up - down) / (2.0 * opts.step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        if rel > max_rel || !rel.is_finite() {
            max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            let (name, layer) = net.layers().nth(li).expect("layer index");
            worst = if is_bias {
                format!("{name}.b[{k}]")
            } else {
                let cols = layer.in_dim();
                format!("{name}.w[{},{}]", k / cols, k % cols)
            };
        }
    }
    Ok(Outcome::Done {
        max_rel,
        worst,
        checked: params.len(),
    })
}

/// Checks one variant/pooling pair, rerolling kink-adjacent draws.
pub fn check_combination(
    variant: Variant,
    method: PoolingMethod,
    opts: &GradcheckOptions,
) -> Result<CombinationResult> {
    if !(opts.step > 0.0 && opts.tolerance > 0.0 && opts.floor > 0.0) {
        return Err(Error::config("gradcheck step, tolerance and floor must be positive"));
    }
    let pooling = PoolingSpec::new(method, opts.lse_r)?;
    let combo = mix_seed(opts.seed, &[variant as u64, method as u64]);
    for attempt in 0..=opts.max_rerolls {
        let seed = mix_seed(combo, &[attempt as u64]);
        let mut draw = make_draw(variant, pooling, opts, seed)?;
        let mut sample_rng = Rng::with_stream(seed, 1);
        match check_draw(&mut draw, opts, &mut sample_rng)? {
            Outcome::Kink => continue,
            Outcome::Done {
                max_rel,
                worst,
                checked,
            } => {
                return Ok(CombinationResult {
                    variant,
                    pooling: method,
                    passed: max_rel < opts.tolerance,
                    max_rel_error: max_rel,
                    worst_parameter: worst,
                    parameters_checked: checked,
                    rerolls: attempt,
                })
            }
        }
    }
    Err(Error::Numerical(format!(
        "{variant} with {method} pooling: every one of {} draws sat on a kink",
        opts.max_rerolls + 1
    )))
}

/// All four variants with all three pooling methods.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<CombinationResult>> {
    let mut results = Vec::with_capacity(12);
    for variant in Variant::ALL {
        for method in PoolingMethod::ALL {
            results.push(check_combination(variant, method, opts)?);
        }
    }
    Ok(results)
}
