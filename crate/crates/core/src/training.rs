//! Cross-entropy loss and per-bag SGD with momentum and weight decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::BagDataset;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::numerics::Rng;

/// Scores are clipped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Binary cross-entropy `-[(1-y) log(1-s) + y log s]` on the clamped score.
pub fn bce_loss(s: f64, y: u8) -> f64 {
    let s = clamp_score(s);
    if y == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// z-score features using training-set statistics (cross-validation and CLI).
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-3,
            epochs: 50,
            seed: 0,
            shuffle_each_epoch: true,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean training loss per epoch (training-mode forward, before each update).
    pub epoch_loss: Vec<f64>,
    /// Inference-mode accuracy on the training set after each epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Wall-clock seconds per bag update, averaged over the run.
    pub seconds_per_bag: f64,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.epoch_loss.len()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epoch_accuracy.last().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// `v <- momentum v - lr (grad + weight_decay theta); theta <- theta + v`,
/// then zeroes the gradients.
pub fn sgd_step(net: &mut Network, cfg: &TrainConfig) -> Result<()> {
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    net.bump_version();
    let mut bad_param = None;
    let mut bad_grad = None;
    for (index, layer) in net.layers_mut_unversioned() {
        let (mut grad_ok, mut param_ok) = (true, true);
        for (theta, grad, vel) in layer.buffers_mut() {
            for ((t, g), v) in theta.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
                grad_ok &= g.is_finite();
                *v = mu * *v - lr * (*g + wd * *t);
                *t += *v;
                param_ok &= t.is_finite();
                *g = 0.0;
            }
        }
        if !grad_ok {
            bad_grad = Some(index);
            break;
        }
        if !param_ok && bad_param.is_none() {
            bad_param = Some(index);
        }
    }
    if let Some(i) = bad_grad {
        return Err(Error::Numerical(format!(
            "non-finite gradient in layer {}",
            net.layer_name(i)
        )));
    }
    if let Some(i) = bad_param {
        return Err(Error::Numerical(format!(
            "non-finite parameter in layer {} after update",
            net.layer_name(i)
        )));
    }
    Ok(())
}

/// One pass over `data` in the given order. Returns the mean training loss.
pub fn train_epoch(
    net: &mut Network,
    data: &BagDataset,
    order: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    net.zero_grad();
    for &i in order {
        let bag = &data.bags()[i];
        let fwd = net.forward(bag.instances(), Mode::Train, rng)?;
        total += net.loss(&fwd, bag.label());
        net.backward(&fwd, bag.label())?;
        sgd_step(net, cfg)?;
    }
    let loss = total / order.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite training loss".into()));
    }
    Ok(loss)
}

/// Fraction of bags whose thresholded inference score matches the label.
pub fn dataset_accuracy(net: &Network, data: &BagDataset) -> Result<f64> {
    let mut correct = 0usize;
    for bag in data.bags() {
        let fwd = net.predict(bag.instances())?;
        correct += usize::from(fwd.predicted_label() == bag.label());
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains one bag per update for `cfg.epochs` epochs.
pub fn train(net: &mut Network, data: &BagDataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "dataset '{}' has {} features, network expects {}",
            data.name(),
            data.dim(),
            net.input_dim()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let mut update_seconds = 0.0;
    for _ in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            rng.shuffle(&mut order);
        }
        let start = Instant::now();
        let loss = train_epoch(net, data, &order, cfg, &mut rng)?;
        update_seconds += start.elapsed().as_secs_f64();
        trace.epoch_loss.push(loss);
        trace.epoch_accuracy.push(dataset_accuracy(net, data)?);
    }
    trace.seconds_per_bag = update_seconds / (cfg.epochs * data.len()) as f64;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Bag;
    use crate::layers::DenseLayer;
    use crate::network::{NetworkSpec, Variant};
    use crate::numerics::{Matrix, Vector};

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.5, 1) - ln2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0) - ln2).abs() < 1e-15);
        // -ln 0.9, evaluated to 30 digits offline
        assert!((bce_loss(0.9, 1) - 0.105_360_515_657_826_3).abs() < 1e-15);
        assert!(bce_loss(0.0, 1).is_finite() && bce_loss(1.0, 0).is_finite());
        assert!(bce_loss(1.0, 1) >= 0.0);
    }

    /// Single 1x1 identity layer network for exercising `sgd_step` by hand.
    fn scalar_net(theta: f64) -> Network {
        let spec = NetworkSpec::new(Variant::MINet).with_widths(vec![1, 1]);
        let trunk = vec![DenseLayer::from_parts(
            Matrix::from_rows(&[[theta]]).unwrap(),
            Vector::zeros(1),
            crate::layers::Activation::Relu,
        )
        .unwrap()];
        let heads = vec![DenseLayer::zeros(1, 1, crate::layers::Activation::Sigmoid)];
        Network::from_layers(spec, 1, trunk, heads).unwrap()
    }

    fn set_grad(net: &mut Network, g: f64) {
        let (_, layer) = net.layers_mut_unversioned().next().unwrap();
        layer.buffers_mut()[0].1[0] = g;
    }

    fn theta(net: &Network) -> f64 {
        net.trunk()[0].weights().get(0, 0)
    }

    fn cfg(lr: f64, momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn vanilla_step() {
        let mut net = scalar_net(1.0);
        set_grad(&mut net, 2.0);
        sgd_step(&mut net, &cfg(0.1, 0.0, 0.0)).unwrap();
        assert!((theta(&net) - 0.8).abs() < 1e-15);
        assert_eq!(net.trunk()[0].grad_weights().get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut net = scalar_net(0.37);
        sgd_step(&mut net, &cfg(0.1, 0.9, 0.0)).unwrap();
        assert_eq!(theta(&net), 0.37);
    }

    #[test]
    fn momentum_unrolls() {
        // v1 = -0.1, theta1 = -0.1; v2 = 0.9 * -0.1 - 0.1 = -0.19, theta2 = -0.29
        let mut net = scalar_net(0.0);
        let c = cfg(0.1, 0.9, 0.0);
        set_grad(&mut net, 1.0);
        sgd_step(&mut net, &c).unwrap();
        assert!((theta(&net) + 0.1).abs() < 1e-15);
        set_grad(&mut net, 1.0);
        sgd_step(&mut net, &c).unwrap();
        assert!((theta(&net) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_every_layer() {
        let mut net = Network::build(&NetworkSpec::new(Variant::MINetDs).with_widths(vec![8, 6, 1]), 5).unwrap();
        for (_, l) in net.layers_mut() {
            for b in l.bias_mut().as_mut_slice() {
                *b = 0.3;
            }
        }
        let c = cfg(0.05, 0.9, 0.1);
        let norms = |net: &Network| -> Vec<f64> {
            net.layers()
                .map(|(_, l)| {
                    (l.weights().frobenius_norm().powi(2) + l.bias().as_slice().iter().map(|b| b * b).sum::<f64>())
                        .sqrt()
                })
                .collect()
        };
        let mut prev = norms(&net);
        for _ in 0..20 {
            // gradients stay zero: only the decay term acts
            sgd_step(&mut net, &c).unwrap();
            let now = norms(&net);
            for (a, b) in now.iter().zip(&prev) {
                assert!(a < b, "{a} !< {b}");
            }
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_the_layer() {
        let mut net = scalar_net(1.0);
        set_grad(&mut net, f64::NAN);
        let err = sgd_step(&mut net, &cfg(0.1, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("trunk.0"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.0, -1.0).validate().is_err());
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(zero_epochs.validate().is_err());
    }

    fn one_bag_dataset() -> BagDataset {
        let bag = Bag::new("b0", 1, Matrix::from_rows(&[[0.5, -0.2], [0.1, 0.9]]).unwrap()).unwrap();
        BagDataset::new("one", vec![bag]).unwrap()
    }

    #[test]
    fn one_epoch_one_bag_is_one_update() {
        let data = one_bag_dataset();
        let spec = NetworkSpec::new(Variant::MINet).with_widths(vec![4, 1]);
        let mut net = Network::build(&spec, 2).unwrap();
        let before = net.clone();
        let c = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let trace = train(&mut net, &data, &c).unwrap();
        assert_eq!(trace.epochs(), 1);
        assert_eq!(trace.epoch_accuracy.len(), 1);

        // replay the single update by hand
        let mut manual = before;
        let mut rng = Rng::new(c.seed);
        let mut order = vec![0usize];
        rng.shuffle(&mut order);
        let fwd = manual
            .forward(data.bags()[0].instances(), Mode::Train, &mut rng)
            .unwrap();
        manual.backward(&fwd, 1).unwrap();
        sgd_step(&mut manual, &c).unwrap();
        for ((_, a), (_, b)) in net.layers().zip(manual.layers()) {
            assert_eq!(a.weights(), b.weights());
        }
    }

    #[test]
    fn small_step_does_not_increase_single_bag_loss() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(21);
        for trial in 0..100 {
            let variant = Variant::ALL[trial % 4];
            let widths = if variant == Variant::MINetRc {
                vec![8, 8, 1]
            } else {
                vec![10, 6, 1]
            };
            let spec = NetworkSpec::new(variant)
                .with_widths(widths)
                .with_dropout(0.0)
                .with_seed(trial as u64);
            let mut net = Network::build(&spec, 4).unwrap();
            let m = rng.int_inclusive(1, 6);
            let bag = Matrix::from_vec(m, 4, (0..m * 4).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let label = (trial % 2) as u8;
            let fwd = net.forward(&bag, Mode::Eval, &mut rng).unwrap();
            let before = net.loss(&fwd, label);
            net.backward(&fwd, label).unwrap();
            sgd_step(&mut net, &c).unwrap();
            let after = net.loss(&net.predict(&bag).unwrap(), label);
            assert!(after <= before + 1e-9, "trial {trial} ({variant}): {before} -> {after}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = one_bag_dataset();
        let spec = NetworkSpec::new(Variant::MINetDs)
            .with_widths(vec![8, 4, 1])
            .with_seed(4);
        let c = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut a = Network::build(&spec, 2).unwrap();
        let mut b = Network::build(&spec, 2).unwrap();
        let ta = train(&mut a, &data, &c).unwrap();
        let tb = train(&mut b, &data, &c).unwrap();
        assert_eq!(ta.epoch_loss, tb.epoch_loss);
        for ((_, x), (_, y)) in a.layers().zip(b.layers()) {
            assert_eq!(x.weights(), y.weights());
        }
    }

    #[test]
    fn train_rejects_dimension_mismatch() {
        let data = one_bag_dataset();
        let mut net = Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![4, 1]), 3).unwrap();
        assert!(train(&mut net, &data, &TrainConfig::default()).is_err());
    }
}
