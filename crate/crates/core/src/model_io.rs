//! Versioned JSON model files.
//!
//! A model file stores the network spec, the input dimension, the optional
//! feature standardizer fitted at training time, and every layer's weights.
//! Floats are written in shortest round-trip form, so loading a saved model
//! reproduces its parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Bag, BagDataset, Standardizer};
use crate::error::{Error, Result};
use crate::layers::{Activation, DenseLayer};
use crate::network::{Network, NetworkSpec};
use crate::numerics::{Matrix, Vector};

pub const FORMAT: &str = "minet-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major `out_dim x in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    spec: NetworkSpec,
    input_dim: usize,
    #[serde(default)]
    standardizer: Option<Standardizer>,
    layers: Vec<LayerRecord>,
}

/// A trained network together with the preprocessing it expects.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub network: Network,
    pub standardizer: Option<Standardizer>,
}

impl SavedModel {
    /// Applies the stored standardizer (if any) to a dataset.
    pub fn prepare(&self, ds: &BagDataset) -> Result<BagDataset> {
        if ds.dim() != self.network.input_dim() {
            return Err(Error::shape(format!(
                "dataset '{}' has {} features, model expects {}",
                ds.name(),
                ds.dim(),
                self.network.input_dim()
            )));
        }
        match &self.standardizer {
            Some(z) => z.apply(ds),
            None => Ok(ds.clone()),
        }
    }

    /// Bag score of a raw (unstandardized) bag.
    pub fn score(&self, bag: &Bag) -> Result<f64> {
        let x = match &self.standardizer {
            Some(z) => z.apply_matrix(bag.instances())?,
            None => bag.instances().clone(),
        };
        Ok(self.network.predict(&x)?.bag_score)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: FORMAT.to_string(),
            version: VERSION,
            spec: self.network.spec().clone(),
            input_dim: self.network.input_dim(),
            standardizer: self.standardizer.clone(),
            layers: self
                .network
                .layers()
                .map(|(name, l)| LayerRecord {
                    name,
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation(),
                    weights: l.weights().as_slice().to_vec(),
                    bias: l.bias().as_slice().to_vec(),
                })
                .collect(),
        };
        let mut text =
            serde_json::to_string_pretty(&file).map_err(|e| Error::Data(format!("cannot serialize model: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: source.to_string(),
            line,
            message,
        };
        let file: ModelFile = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
        if file.format != FORMAT {
            return Err(parse_err(1, format!("not a model file (format '{}')", file.format)));
        }
        if file.version != VERSION {
            return Err(parse_err(1, format!("unsupported model version {}", file.version)));
        }
        if let Some(z) = &file.standardizer {
            if z.dim() != file.input_dim {
                return Err(Error::shape(format!(
                    "standardizer has {} features, model input has {}",
                    z.dim(),
                    file.input_dim
                )));
            }
        }
        let trunk_len = file.spec.hidden_widths().len();
        let mut layers = file
            .layers
            .into_iter()
            .map(|r| {
                let w = Matrix::from_vec(r.out_dim, r.in_dim, r.weights)?;
                let b = Vector::new(r.bias).map_err(|e| Error::Data(format!("layer {}: {e}", r.name)))?;
                DenseLayer::from_parts(w, b, r.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.len() < trunk_len {
            return Err(Error::Data(format!(
                "model lists {} layers, spec needs {trunk_len} trunk layers",
                layers.len()
            )));
        }
        let heads = layers.split_off(trunk_len);
        let network = Network::from_layers(file.spec, file.input_dim, layers, heads)?;
        Ok(SavedModel {
            network,
            standardizer: file.standardizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::standardize;
    use crate::eval::{generate_synthetic, SyntheticSpec};
    use crate::network::Variant;
    use crate::pooling::PoolingSpec;
    use crate::training::{train, TrainConfig};

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for variant in Variant::ALL {
            let spec = NetworkSpec::new(variant)
                .with_widths(if variant == Variant::MINetRc {
                    vec![16, 16, 1]
                } else {
                    vec![16, 8, 1]
                })
                .with_pooling(PoolingSpec::lse(3.0).unwrap());
            let mut net = Network::build(&spec, ds.dim()).unwrap();
            let z = Standardizer::fit(&ds);
            let cfg = TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            };
            train(&mut net, &z.apply(&ds).unwrap(), &cfg).unwrap();
            let model = SavedModel {
                network: net,
                standardizer: Some(z),
            };
            let text = model.to_json().unwrap();
            let back = SavedModel::from_json(&text, "m").unwrap();
            assert_eq!(back.network.spec(), model.network.spec());
            assert_eq!(back.standardizer, model.standardizer);
            for ((na, a), (nb, b)) in model.network.layers().zip(back.network.layers()) {
                assert_eq!(na, nb);
                let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.weights()), bits(b.weights()));
                assert_eq!(a.bias(), b.bias());
            }
            assert_eq!(back.to_json().unwrap(), text);
            for bag in ds.bags() {
                assert_eq!(model.score(bag).unwrap().to_bits(), back.score(bag).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn prepare_matches_standardize() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let model = SavedModel {
            network: Network::build(&NetworkSpec::new(Variant::MINet), ds.dim()).unwrap(),
            standardizer: Some(Standardizer::fit(&ds)),
        };
        assert_eq!(model.prepare(&ds).unwrap(), standardize(&ds, &ds).unwrap());
    }

    #[test]
    fn rejects_foreign_and_corrupt_files() {
        assert_eq!(SavedModel::from_json("{}", "x").unwrap_err().kind(), "parse");
        assert_eq!(SavedModel::from_json("not json", "x").unwrap_err().kind(), "parse");
        let model = SavedModel {
            network: Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![4, 1]), 3).unwrap(),
            standardizer: None,
        };
        let text = model.to_json().unwrap();
        let wrong = text.replace("\"version\": 1", "\"version\": 9");
        assert!(SavedModel::from_json(&wrong, "x")
            .unwrap_err()
            .to_string()
            .contains("version 9"));
        let other = text.replace("\"format\": \"minet-model\"", "\"format\": \"other\"");
        assert_eq!(SavedModel::from_json(&other, "x").unwrap_err().kind(), "parse");
    }
}
