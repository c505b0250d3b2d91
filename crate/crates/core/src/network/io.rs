use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Map, Value};

use super::{Layer, LstmGate, LstmParams, Network, LSTM_GATES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MODEL_FORMAT: &str = "decomp-model";
pub const MODEL_VERSION: u64 = 1;

fn encode<T: Scalar>(t: &Tensor<T>) -> Value {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    json!({ "shape": t.shape(), "data": STANDARD.encode(bytes) })
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::MalformedModel(detail.into())
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| malformed(format!("{ctx}: missing field `{key}`")))
}

fn as_usize(v: &Value, ctx: &str) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| malformed(format!("{ctx}: expected a non-negative integer")))
}

fn usize_field(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<usize> {
    as_usize(field(obj, key, ctx)?, &format!("{ctx}.{key}"))
}

fn shape_of(v: &Value, ctx: &str) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| malformed(format!("{ctx}: shape must be an array")))?
        .iter()
        .map(|d| as_usize(d, ctx))
        .collect()
}

fn decode<T: Scalar>(v: &Value, ctx: &str) -> Result<Tensor<T>> {
    let obj = v.as_object().ok_or_else(|| malformed(format!("{ctx}: expected a tensor object")))?;
    let shape = shape_of(field(obj, "shape", ctx)?, ctx)?;
    let text = field(obj, "data", ctx)?
        .as_str()
        .ok_or_else(|| malformed(format!("{ctx}: data must be a base64 string")))?;
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| malformed(format!("{ctx}: invalid base64: {e}")))?;
    if bytes.len() != numel(&shape) * 8 {
        return Err(Error::ShapeInconsistency(format!(
            "{ctx}: shape {:?} needs {} values, file holds {} bytes",
            shape,
            numel(&shape),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(shape, data)
}

impl<T: Scalar> Network<T> {
    pub fn to_json(&self) -> Value {
        let layers: Vec<Value> = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear { weight, bias } => json!({ "kind": "linear", "weight": encode(weight), "bias": encode(bias) }),
                Layer::Conv2d { weight, bias, stride } => {
                    json!({ "kind": "conv2d", "stride": stride, "weight": encode(weight), "bias": encode(bias) })
                }
                Layer::MaxPool2d { window, stride } => json!({ "kind": "maxpool2d", "window": window, "stride": stride }),
                Layer::Dropout { rate } => json!({ "kind": "dropout", "rate": rate }),
                Layer::Lstm(p) => {
                    let mut gates = Map::new();
                    for (name, g) in LSTM_GATES.iter().zip(&p.gates) {
                        gates.insert(
                            name.to_string(),
                            json!({
                                "input_weight": encode(&g.input_weight),
                                "hidden_weight": encode(&g.hidden_weight),
                                "bias": encode(&g.bias),
                            }),
                        );
                    }
                    json!({ "kind": "lstm", "hidden_size": p.hidden_size(), "gates": gates })
                }
                other => json!({ "kind": other.kind() }),
            })
            .collect();
        json!({
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "input_shape": self.input_shape,
            "num_classes": self.num_classes,
            "layers": layers,
        })
    }

    /// Serialize as a self-describing JSON document. Weights are stored as
    /// base64 little-endian 64-bit floats.
    pub fn save_model(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("model json serializes")
    }

    pub fn load_model(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| malformed(format!("not valid JSON: {e}")))?;
        Self::from_json(&root)
    }

    pub fn from_json(root: &Value) -> Result<Self> {
        let obj = root.as_object().ok_or_else(|| malformed("top level must be an object"))?;
        let format = field(obj, "format", "model")?.as_str().unwrap_or_default();
        if format != MODEL_FORMAT {
            return Err(malformed(format!("unknown format tag `{format}`")));
        }
        let version = field(obj, "version", "model")?
            .as_u64()
            .ok_or_else(|| malformed("version must be an integer"))?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: MODEL_VERSION });
        }
        let input_shape = shape_of(field(obj, "input_shape", "model")?, "input_shape")?;
        let num_classes = usize_field(obj, "num_classes", "model")?;
        let raw_layers = field(obj, "layers", "model")?
            .as_array()
            .ok_or_else(|| malformed("layers must be an array"))?;
        let mut layers = Vec::with_capacity(raw_layers.len());
        for (i, raw) in raw_layers.iter().enumerate() {
            let ctx = format!("layers[{i}]");
            let l = raw.as_object().ok_or_else(|| malformed(format!("{ctx}: expected an object")))?;
            let kind = field(l, "kind", &ctx)?
                .as_str()
                .ok_or_else(|| malformed(format!("{ctx}: kind must be a string")))?;
            let layer = match kind {
                "linear" => Layer::Linear {
                    weight: decode(field(l, "weight", &ctx)?, &ctx)?,
                    bias: decode(field(l, "bias", &ctx)?, &ctx)?,
                },
                "conv2d" => Layer::Conv2d {
                    weight: decode(field(l, "weight", &ctx)?, &ctx)?,
                    bias: decode(field(l, "bias", &ctx)?, &ctx)?,
                    stride: usize_field(l, "stride", &ctx)?,
                },
                "relu" => Layer::Relu,
                "sigmoid" => Layer::Sigmoid,
                "tanh" => Layer::Tanh,
                "flatten" => Layer::Flatten,
                "maxpool2d" => Layer::MaxPool2d {
                    window: usize_field(l, "window", &ctx)?,
                    stride: usize_field(l, "stride", &ctx)?,
                },
                "dropout" => Layer::Dropout {
                    rate: field(l, "rate", &ctx)?
                        .as_f64()
                        .ok_or_else(|| malformed(format!("{ctx}: rate must be a number")))?,
                },
                "lstm" => {
                    let gates_obj = field(l, "gates", &ctx)?
                        .as_object()
                        .ok_or_else(|| malformed(format!("{ctx}: gates must be an object")))?;
                    let mut gates = Vec::with_capacity(4);
                    for name in LSTM_GATES {
                        let gctx = format!("{ctx}.gates.{name}");
                        let g = field(gates_obj, name, &ctx)?
                            .as_object()
                            .ok_or_else(|| malformed(format!("{gctx}: expected an object")))?;
                        gates.push(LstmGate {
                            input_weight: decode(field(g, "input_weight", &gctx)?, &gctx)?,
                            hidden_weight: decode(field(g, "hidden_weight", &gctx)?, &gctx)?,
                            bias: decode(field(g, "bias", &gctx)?, &gctx)?,
                        });
                    }
                    let params = LstmParams { gates: gates.try_into().expect("four gates") };
                    if let Some(h) = l.get("hidden_size") {
                        if as_usize(h, &ctx)? != params.hidden_size() {
                            return Err(Error::ShapeInconsistency(format!(
                                "{ctx}: hidden_size disagrees with gate parameters"
                            )));
                        }
                    }
                    Layer::Lstm(params)
                }
                other => return Err(Error::UnsupportedLayer(other.to_string())),
            };
            layers.push(layer);
        }
        Network::new(layers, input_shape, num_classes)
    }
}
