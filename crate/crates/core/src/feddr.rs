//! Douglas-Rachford client updates layered on top of mask-sharing pruning.
//!
//! Per round a client (1) moves its intermediate variable `y` toward the
//! global model, (2) trains with a proximal pull toward `y`, (3) reflects the
//! trained model through `y`, and (4) reports the change of the reflected
//! model. Weights are masked with the round's mask; biases are never masked.

use std::fmt;
use std::str::FromStr;

use crate::error::{FedMapError, Result};
use crate::pruning::{apply_mask, PruneMask};
use crate::scalar::Scalar;
use crate::tensor_nn::{Gradients, Model};

/// Step size and proximal weight used when none are configured.
pub const DEFAULT_ALPHA: f64 = 0.95;
pub const DEFAULT_ETA: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FedDrClientState<T> {
    pub theta_y: Model<T>,
    pub theta_local_prev: Model<T>,
    pub theta_x_prev: Model<T>,
    pub alpha: f64,
    pub eta: f64,
}

impl<T: Scalar> FedDrClientState<T> {
    /// All three models start at the shared initial global model.
    pub fn new(initial: &Model<T>, alpha: f64, eta: f64) -> Result<Self> {
        check_params(alpha, eta)?;
        Ok(Self {
            theta_y: initial.clone(),
            theta_local_prev: initial.clone(),
            theta_x_prev: initial.clone(),
            alpha,
            eta,
        })
    }

    /// `y <- M*y + alpha * (global - M*local_prev)`; the result replaces `theta_y`.
    pub fn update_intermediate(
        &mut self,
        global: &Model<T>,
        mask: &PruneMask,
    ) -> Result<&Model<T>> {
        let y_prev = apply_mask(&self.theta_y, mask)?;
        let local_prev = apply_mask(&self.theta_local_prev, mask)?;
        let alpha = T::of(self.alpha);
        let pull = global.zip_map(&local_prev, |g, l| alpha * (g - l))?;
        self.theta_y = y_prev.zip_map(&pull, |y, p| y + p)?;
        Ok(&self.theta_y)
    }

    /// `x_new - M*x_prev`; stores `x_new` for the next round.
    pub fn feddr_delta(&mut self, theta_x_new: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
        let x_prev = apply_mask(&self.theta_x_prev, mask)?;
        let delta = theta_x_new.zip_map(&x_prev, |x, p| x - p)?;
        self.theta_x_prev = theta_x_new.clone();
        Ok(delta)
    }

    /// Remembers the locally trained model for the next intermediate update.
    pub fn record_local(&mut self, theta_local: &Model<T>) {
        self.theta_local_prev = theta_local.clone();
    }
}

fn check_params(alpha: f64, eta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedMapError::config("feddr.alpha", "must be positive"));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(FedMapError::config("feddr.eta", "must be positive"));
    }
    Ok(())
}

/// Gradient of `(1 / 2 eta) * ||theta - theta_y||^2`, i.e. `(theta - theta_y) / eta`.
/// An infinite `eta` yields exact zeros.
pub fn proximal_gradient_term<T: Scalar>(
    theta: &Model<T>,
    theta_y: &Model<T>,
    eta: f64,
) -> Result<Gradients<T>> {
    theta.check_same_shape(theta_y)?;
    let inv = T::of(1.0 / eta);
    let diff = theta.zip_map(theta_y, |a, b| (a - b) * inv)?;
    Ok(Gradients {
        weights: diff
            .layers()
            .iter()
            .map(|l| l.weight.values().to_vec())
            .collect(),
        biases: diff
            .layers()
            .iter()
            .map(|l| l.bias.as_ref().map(|b| b.values().to_vec()))
            .collect(),
    })
}

/// `2 * theta_local - theta_y`.
pub fn reflect<T: Scalar>(theta_local: &Model<T>, theta_y: &Model<T>) -> Result<Model<T>> {
    let two = T::of(2.0);
    theta_local.zip_map(theta_y, |l, y| two * l - y)
}

/// Named client configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridConfig {
    /// Douglas-Rachford updates without any pruning.
    FedDr,
    /// Douglas-Rachford updates with pruning throughout.
    FedMapFedDr,
    /// Falls back to plain averaging from the switch event on.
    C1,
    /// Replaces `alpha` and `eta` from the switch event on.
    C2,
    /// Like `C2`, with updates weighted by client dataset size.
    C3,
}

impl HybridConfig {
    pub fn uses_pruning(self) -> bool {
        self != HybridConfig::FedDr
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HybridConfig::FedDr => "feddr",
            HybridConfig::FedMapFedDr => "fedmap-feddr",
            HybridConfig::C1 => "c1",
            HybridConfig::C2 => "c2",
            HybridConfig::C3 => "c3",
        }
    }
}

impl fmt::Display for HybridConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HybridConfig {
    type Err = FedMapError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let tag = lower.strip_prefix("fedmap-feddr-").unwrap_or(&lower);
        match tag {
            "feddr" => Ok(HybridConfig::FedDr),
            "fedmap-feddr" => Ok(HybridConfig::FedMapFedDr),
            "c1" => Ok(HybridConfig::C1),
            "c2" => Ok(HybridConfig::C2),
            "c3" => Ok(HybridConfig::C3),
            _ => Err(FedMapError::config(
                "feddr.config",
                format!("unknown configuration tag `{s}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedDrSettings {
    pub config: HybridConfig,
    pub alpha: f64,
    pub eta: f64,
    /// 1-based ordinal of the prune event at which dynamic configs switch.
    pub switch_event: usize,
    pub post_alpha: f64,
    pub post_eta: f64,
}

impl Default for FedDrSettings {
    fn default() -> Self {
        Self {
            config: HybridConfig::FedMapFedDr,
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            switch_event: 1,
            post_alpha: DEFAULT_ALPHA,
            post_eta: DEFAULT_ETA,
        }
    }
}

impl FedDrSettings {
    pub fn validate(&self) -> Result<()> {
        check_params(self.alpha, self.eta)?;
        check_params(self.post_alpha, self.post_eta).map_err(|e| match e {
            FedMapError::Config { key, msg } => FedMapError::Config {
                key: key.replace("feddr.", "feddr.post_"),
                msg,
            },
            other => other,
        })?;
        if self.switch_event == 0 {
            return Err(FedMapError::config("feddr.switch_event", "is 1-based"));
        }
        Ok(())
    }
}

/// How a client behaves in a given round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundMode {
    /// Douglas-Rachford update; `weighted` selects sample-size aggregation.
    FedDr { weighted: bool },
    /// Plain local training and averaging.
    FedAvg,
}

/// Applies the configuration for a round in which `prune_events_so_far`
/// prune events (this round's included) have happened. Switched configs
/// write their post-switch `alpha`/`eta` into `state`.
pub fn apply_hybrid_config<T: Scalar>(
    settings: &FedDrSettings,
    prune_events_so_far: usize,
    state: &mut FedDrClientState<T>,
) -> RoundMode {
    let switched = prune_events_so_far >= settings.switch_event;
    match settings.config {
        HybridConfig::FedDr | HybridConfig::FedMapFedDr => RoundMode::FedDr { weighted: false },
        HybridConfig::C1 if switched => RoundMode::FedAvg,
        HybridConfig::C1 => RoundMode::FedDr { weighted: false },
        HybridConfig::C2 | HybridConfig::C3 => {
            if switched {
                state.alpha = settings.post_alpha;
                state.eta = settings.post_eta;
            }
            RoundMode::FedDr {
                weighted: settings.config == HybridConfig::C3,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{Activation, Layer, WeightTensor};

    fn scalar_model(w: f64) -> Model<f64> {
        Model::new(vec![Layer {
            weight: WeightTensor::new(vec![1, 1], vec![w]).unwrap(),
            bias: None,
            activation: Activation::Softmax,
        }])
        .unwrap()
    }

    fn w(m: &Model<f64>) -> f64 {
        m.layers()[0].weight.values()[0]
    }

    #[test]
    fn intermediate_update_examples() {
        let ones = PruneMask::ones(&[1]);
        // first round: every state model equals the global model
        let g = scalar_model(0.3);
        let mut st = FedDrClientState::new(&g, 0.95, 1000.0).unwrap();
        assert_eq!(w(st.update_intermediate(&g, &ones).unwrap()), 0.3);

        let mut st = FedDrClientState::new(&scalar_model(1.0), 0.95, 1000.0).unwrap();
        st.theta_local_prev = scalar_model(0.8);
        let y = w(st.update_intermediate(&scalar_model(1.2), &ones).unwrap());
        assert!((y - 1.38).abs() < 1e-12);

        let mut st = FedDrClientState::new(&scalar_model(1.0), 0.5, 1000.0).unwrap();
        st.theta_local_prev = scalar_model(0.8);
        let y = w(st
            .update_intermediate(&scalar_model(1.2), &PruneMask::zeros(&[1]))
            .unwrap());
        assert_eq!(y, 0.5 * 1.2);
    }

    #[test]
    fn proximal_term_examples() {
        let t = proximal_gradient_term(&scalar_model(1.5), &scalar_model(1.5), 10.0).unwrap();
        assert_eq!(t.weights[0][0], 0.0);
        let t = proximal_gradient_term(&scalar_model(1.5), &scalar_model(1.0), 10.0).unwrap();
        assert!((t.weights[0][0] - 0.05).abs() < 1e-15);
        let t =
            proximal_gradient_term(&scalar_model(1.5), &scalar_model(1.0), f64::INFINITY).unwrap();
        assert_eq!(t.weights[0][0], 0.0);
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(
            w(&reflect(&scalar_model(1.5), &scalar_model(1.0)).unwrap()),
            2.0
        );
        assert_eq!(
            w(&reflect(&scalar_model(0.7), &scalar_model(0.7)).unwrap()),
            0.7
        );
    }

    #[test]
    fn delta_examples() {
        let ones = PruneMask::ones(&[1]);
        let mut st = FedDrClientState::new(&scalar_model(1.5), 0.95, 10.0).unwrap();
        let d = st.feddr_delta(&scalar_model(2.0), &ones).unwrap();
        assert_eq!(w(&d), 0.5);
        assert_eq!(w(&st.theta_x_prev), 2.0);
        let d = st.feddr_delta(&scalar_model(2.0), &ones).unwrap();
        assert_eq!(w(&d), 0.0);
    }

    #[test]
    fn hybrid_switching() {
        let mut st = FedDrClientState::new(&scalar_model(0.0), 0.95, 1000.0).unwrap();
        let c2 = FedDrSettings {
            config: HybridConfig::C2,
            switch_event: 2,
            post_alpha: 1.75,
            post_eta: 10.0,
            ..FedDrSettings::default()
        };
        assert_eq!(
            apply_hybrid_config(&c2, 1, &mut st),
            RoundMode::FedDr { weighted: false }
        );
        assert_eq!((st.alpha, st.eta), (0.95, 1000.0));
        apply_hybrid_config(&c2, 2, &mut st);
        assert_eq!((st.alpha, st.eta), (1.75, 10.0));

        let c1 = FedDrSettings {
            config: HybridConfig::C1,
            ..FedDrSettings::default()
        };
        assert_eq!(
            apply_hybrid_config(&c1, 0, &mut st),
            RoundMode::FedDr { weighted: false }
        );
        assert_eq!(apply_hybrid_config(&c1, 1, &mut st), RoundMode::FedAvg);

        let c3 = FedDrSettings {
            config: HybridConfig::C3,
            ..c2
        };
        assert_eq!(
            apply_hybrid_config(&c3, 0, &mut st),
            RoundMode::FedDr { weighted: true }
        );
    }

    #[test]
    fn tags_parse() {
        assert_eq!(
            "FedMap-FedDR-C2".parse::<HybridConfig>().unwrap(),
            HybridConfig::C2
        );
        assert_eq!(
            "fedmap-feddr".parse::<HybridConfig>().unwrap(),
            HybridConfig::FedMapFedDr
        );
        assert_eq!(
            "FedDR".parse::<HybridConfig>().unwrap(),
            HybridConfig::FedDr
        );
        assert!("c4".parse::<HybridConfig>().is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(FedDrClientState::new(&scalar_model(0.0), 0.0, 1.0).is_err());
        assert!(FedDrClientState::new(&scalar_model(0.0), 1.0, -1.0).is_err());
        let s = FedDrSettings {
            post_eta: 0.0,
            ..FedDrSettings::default()
        };
        match s.validate() {
            Err(FedMapError::Config { key, .. }) => assert_eq!(key, "feddr.post_eta"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
