//! Self-describing JSON model document.
//!
//! ```json
//! { "dims": {"X": 2, "H": 16}, "storage": "float", "fixed_spec": {"n": 16, "f": 12},
//!   "weights": {"W_fx": [[..]], .., "W_oh": [[..]]},
//!   "biases": {"b_f": [..], .., "b_o": [..]} }
//! ```
//!
//! Fixed storage carries raw words as integers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{FixedParams, Gate, LstmDims, LstmParams};
use crate::numerics::FixedSpec;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Float,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// Real weights plus the format they will be quantized to.
    Float {
        params: LstmParams<f64>,
        spec: FixedSpec,
    },
    Fixed(FixedParams),
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    dims: LstmDims,
    storage: Storage,
    fixed_spec: FixedSpec,
    weights: BTreeMap<String, Vec<Vec<T>>>,
    biases: BTreeMap<String, Vec<T>>,
}

#[derive(Deserialize)]
struct Header {
    storage: Storage,
}

pub fn weight_name(gate: Gate, recurrent: bool) -> String {
    format!("W_{}{}", gate.letter(), if recurrent { 'h' } else { 'x' })
}

pub fn bias_name(gate: Gate) -> String {
    format!("b_{}", gate.letter())
}

fn to_document<T: Copy>(
    params: &LstmParams<T>,
    storage: Storage,
    spec: FixedSpec,
) -> Document<T> {
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for g in Gate::ALL {
        weights.insert(weight_name(g, false), params.wx[g.index()].to_rows());
        weights.insert(weight_name(g, true), params.wh[g.index()].to_rows());
        biases.insert(bias_name(g), params.bias[g.index()].clone());
    }
    Document {
        dims: params.dims(),
        storage,
        fixed_spec: spec,
        weights,
        biases,
    }
}

fn from_document<T: Copy>(mut doc: Document<T>) -> Result<LstmParams<T>> {
    let mut take_w = |name: String| -> Result<Matrix<T>> {
        let rows = doc
            .weights
            .remove(&name)
            .ok_or_else(|| Error::Model(format!("missing weight matrix {name}")))?;
        Matrix::from_rows(&rows)
    };
    let mut wx = Vec::with_capacity(4);
    let mut wh = Vec::with_capacity(4);
    for g in Gate::ALL {
        wx.push(take_w(weight_name(g, false))?);
        wh.push(take_w(weight_name(g, true))?);
    }
    let mut bias = Vec::with_capacity(4);
    for g in Gate::ALL {
        let name = bias_name(g);
        bias.push(
            doc.biases
                .remove(&name)
                .ok_or_else(|| Error::Model(format!("missing bias {name}")))?,
        );
    }
    let params = LstmParams {
        wx: wx.try_into().unwrap_or_else(|_| unreachable!("four gates")),
        wh: wh.try_into().unwrap_or_else(|_| unreachable!("four gates")),
        bias: bias.try_into().unwrap_or_else(|_| unreachable!("four gates")),
    };
    // empty rows make `from_rows` report zero columns; shape checks catch it
    let d = params.validate()?;
    if d != doc.dims {
        return Err(Error::Model(format!(
            "declared dims {:?} disagree with weight shapes {:?}",
            doc.dims, d
        )));
    }
    Ok(params)
}

impl Model {
    pub fn dims(&self) -> LstmDims {
        match self {
            Model::Float { params, .. } => params.dims(),
            Model::Fixed(q) => q.params.dims(),
        }
    }

    pub fn spec(&self) -> FixedSpec {
        match self {
            Model::Float { spec, .. } => *spec,
            Model::Fixed(q) => q.spec,
        }
    }

    pub fn storage(&self) -> Storage {
        match self {
            Model::Float { .. } => Storage::Float,
            Model::Fixed(_) => Storage::Fixed,
        }
    }

    /// Fixed-point view, quantizing float storage with the recorded format.
    pub fn to_fixed(&self) -> FixedParams {
        match self {
            Model::Float { params, spec } => crate::lstm::quantize_params(params, *spec),
            Model::Fixed(q) => q.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = match self {
            Model::Float { params, spec } => {
                serde_json::to_string(&to_document(params, Storage::Float, *spec))?
            }
            Model::Fixed(q) => {
                serde_json::to_string(&to_document(&q.params, Storage::Fixed, q.spec))?
            }
        };
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text)?;
        fn parse<T: Copy + DeserializeOwned>(text: &str) -> Result<(LstmParams<T>, FixedSpec)> {
            let doc: Document<T> = serde_json::from_str(text)?;
            let spec = doc.fixed_spec;
            Ok((from_document(doc)?, spec))
        }
        match header.storage {
            Storage::Float => {
                let (params, spec) = parse::<f64>(text)?;
                Ok(Model::Float { params, spec })
            }
            Storage::Fixed => {
                let (params, spec) = parse::<i32>(text)?;
                let all = params
                    .wx
                    .iter()
                    .chain(&params.wh)
                    .flat_map(|m| m.as_slice())
                    .chain(params.bias.iter().flatten());
                if let Some(bad) = all.copied().find(|&r| !spec.contains(r)) {
                    return Err(Error::Model(format!(
                        "raw value {bad} does not fit a {}-bit word",
                        spec.width_bits()
                    )));
                }
                Ok(Model::Fixed(FixedParams { spec, params }))
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
