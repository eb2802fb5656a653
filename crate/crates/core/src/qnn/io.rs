//! Versioned JSON model files.
//!
//! Weights and masks are base64 of the raw 8-bit values (masks as 0/1
//! bytes). The `fingerprint` is the SHA-256 of the document serialized
//! without that field; loading verifies it when present.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{ConvLayer, DenseLayer, Layer, QuantizedNetwork};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "wselect-model";
pub const MODEL_VERSION: u64 = 1;

#[derive(Serialize)]
struct ModelDoc<'a> {
    format: &'static str,
    version: u64,
    name: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerDoc {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        scale: f64,
        weights: String,
        bias: Vec<i32>,
        mask: String,
        candidate_set: Option<Vec<i8>>,
    },
    Relu,
    Maxpool {
        k: usize,
        stride: usize,
    },
    Dense {
        n_in: usize,
        n_out: usize,
        scale: f64,
        weights: String,
        bias: Vec<i32>,
    },
}

fn encode_i8(v: &[i8]) -> String {
    B64.encode(v.iter().map(|&x| x as u8).collect::<Vec<_>>())
}

fn doc(net: &QuantizedNetwork, fingerprint: Option<String>) -> ModelDoc<'_> {
    let layers = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => LayerDoc::Conv {
                c_in: c.c_in,
                c_out: c.c_out,
                k: c.k,
                stride: c.stride,
                pad: c.pad,
                scale: c.scale,
                weights: encode_i8(&c.weights),
                bias: c.bias.clone(),
                mask: B64.encode(c.mask.iter().map(|&m| m as u8).collect::<Vec<_>>()),
                candidate_set: c.candidate_set.clone(),
            },
            Layer::Relu => LayerDoc::Relu,
            Layer::MaxPool { k, stride } => LayerDoc::Maxpool { k: *k, stride: *stride },
            Layer::Dense(d) => LayerDoc::Dense {
                n_in: d.n_in,
                n_out: d.n_out,
                scale: d.scale,
                weights: encode_i8(&d.weights),
                bias: d.bias.clone(),
            },
        })
        .collect();
    ModelDoc {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        name: &net.name,
        fingerprint,
        input_shape: [net.input_shape.0, net.input_shape.1, net.input_shape.2],
        num_classes: net.num_classes,
        layers,
    }
}

/// SHA-256 (hex) of the canonical model document.
pub fn fingerprint(net: &QuantizedNetwork) -> String {
    let body = serde_json::to_vec(&doc(net, None)).expect("model document serializes");
    hex::encode(Sha256::digest(&body))
}

pub fn model_to_json(net: &QuantizedNetwork) -> String {
    let mut s = serde_json::to_string_pretty(&doc(net, Some(fingerprint(net)))).expect("model document serializes");
    s.push('\n');
    s
}

pub fn save_model(net: &QuantizedNetwork, path: &Path) -> Result<()> {
    net.validate()?;
    fs::write(path, model_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<QuantizedNetwork> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

struct Obj<'a> {
    path: String,
    map: &'a serde_json::Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(path: String, v: &'a Value) -> Result<Self> {
        match v.as_object() {
            Some(map) => Ok(Obj { path, map }),
            None => Err(Error::schema(path, "expected an object")),
        }
    }

    fn field_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn get(&self, key: &str) -> Result<&'a Value> {
        self.map
            .get(key)
            .ok_or_else(|| Error::schema(self.field_path(key), "missing field"))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::schema(self.field_path(key), "expected a non-negative integer"))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| Error::schema(self.field_path(key), "expected a number"))
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| Error::schema(self.field_path(key), "expected a string"))
    }

    fn bytes(&self, key: &str) -> Result<Vec<u8>> {
        B64.decode(self.str(key)?)
            .map_err(|e| Error::schema(self.field_path(key), format!("invalid base64: {e}")))
    }

    fn int_list<T: TryFrom<i64>>(&self, key: &str) -> Result<Vec<T>> {
        let path = self.field_path(key);
        let arr = self
            .get(key)?
            .as_array()
            .ok_or_else(|| Error::schema(&path, "expected an array"))?;
        arr.iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_i64()
                    .and_then(|x| T::try_from(x).ok())
                    .ok_or_else(|| Error::schema(format!("{path}[{i}]"), "integer out of range"))
            })
            .collect()
    }
}

pub fn model_from_json(text: &str) -> Result<QuantizedNetwork> {
    let root: Value = serde_json::from_str(text)?;
    let obj = Obj::new(String::new(), &root)?;
    if obj.str("format")? != MODEL_FORMAT {
        return Err(Error::schema("format", format!("expected \"{MODEL_FORMAT}\"")));
    }
    let version = obj
        .get("version")?
        .as_u64()
        .ok_or_else(|| Error::schema("version", "expected an integer"))?;
    if version != MODEL_VERSION {
        return Err(Error::schema("version", format!("unsupported version {version}")));
    }
    let shape: Vec<usize> = obj.int_list::<i64>("input_shape")?.into_iter().map(|v| v.max(0) as usize).collect();
    if shape.len() != 3 {
        return Err(Error::schema("input_shape", "expected [c, h, w]"));
    }
    let layers_v = obj
        .get("layers")?
        .as_array()
        .ok_or_else(|| Error::schema("layers", "expected an array"))?;
    let mut layers = Vec::with_capacity(layers_v.len());
    for (i, lv) in layers_v.iter().enumerate() {
        let l = Obj::new(format!("layers[{i}]"), lv)?;
        let layer = match l.str("type")? {
            "conv" => {
                let weights: Vec<i8> = l.bytes("weights")?.into_iter().map(|b| b as i8).collect();
                let mask_bytes = l.bytes("mask")?;
                if let Some(j) = mask_bytes.iter().position(|&b| b > 1) {
                    return Err(Error::schema(l.field_path("mask"), format!("byte {j} is not 0/1")));
                }
                let candidate_set = match l.get("candidate_set")? {
                    Value::Null => None,
                    _ => Some(l.int_list::<i8>("candidate_set")?),
                };
                Layer::Conv(ConvLayer {
                    c_in: l.usize("c_in")?,
                    c_out: l.usize("c_out")?,
                    k: l.usize("k")?,
                    stride: l.usize("stride")?,
                    pad: l.usize("pad")?,
                    weights,
                    bias: l.int_list("bias")?,
                    scale: l.f64("scale")?,
                    mask: mask_bytes.into_iter().map(|b| b == 1).collect(),
                    candidate_set,
                })
            }
            "relu" => Layer::Relu,
            "maxpool" => Layer::MaxPool {
                k: l.usize("k")?,
                stride: l.usize("stride")?,
            },
            "dense" => Layer::Dense(DenseLayer {
                n_in: l.usize("n_in")?,
                n_out: l.usize("n_out")?,
                weights: l.bytes("weights")?.into_iter().map(|b| b as i8).collect(),
                bias: l.int_list("bias")?,
                scale: l.f64("scale")?,
            }),
            other => {
                return Err(Error::schema(l.field_path("type"), format!("unknown layer type \"{other}\"")))
            }
        };
        layers.push(layer);
    }
    let net = QuantizedNetwork {
        name: obj.str("name")?.to_string(),
        input_shape: (shape[0], shape[1], shape[2]),
        num_classes: obj.usize("num_classes")?,
        layers,
    };
    net.validate()?;
    if let Some(fp) = obj.map.get("fingerprint") {
        let fp = fp
            .as_str()
            .ok_or_else(|| Error::schema("fingerprint", "expected a string"))?;
        let actual = fingerprint(&net);
        if fp != actual {
            return Err(Error::schema("fingerprint", format!("mismatch: file says {fp}, content is {actual}")));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::tests::tiny_net;

    #[test]
    fn minimal_model_loads() {
        let text = model_to_json(&tiny_net());
        let net = model_from_json(&text).unwrap();
        assert_eq!(net.conv_indices(), vec![0]);
        assert_eq!(model_to_json(&net), text);
    }

    #[test]
    fn wrong_field_type_names_path() {
        let text = model_to_json(&tiny_net()).replace("\"stride\": 1,", "\"stride\": \"one\",");
        match model_from_json(&text) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "layers[0].stride"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_weights_fail_fingerprint() {
        let mut net = tiny_net();
        let good = model_to_json(&net);
        net.conv_mut(0).unwrap().weights[0] = 5;
        let tampered_body = model_to_json(&net);
        let fp_line = good.lines().find(|l| l.contains("fingerprint")).unwrap();
        let bad_fp = tampered_body.lines().find(|l| l.contains("fingerprint")).unwrap();
        let text = tampered_body.replace(bad_fp, fp_line);
        assert!(matches!(model_from_json(&text), Err(Error::Schema { .. })));
    }

    #[test]
    fn out_of_range_candidate_rejected() {
        let mut net = tiny_net();
        net.conv_mut(0).unwrap().candidate_set = Some(vec![0, 1, -1]);
        let text = model_to_json(&net).replace("\"candidate_set\": [\n        0,", "\"candidate_set\": [\n        300,");
        let text: String = text.lines().filter(|l| !l.contains("fingerprint")).collect::<Vec<_>>().join("\n");
        assert!(matches!(model_from_json(&text), Err(Error::Schema { .. })));
    }
}
