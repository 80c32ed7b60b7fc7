//! Builds tiny ONNX models in memory: global average pool over the three
//! input channels followed by one dense layer.

#![allow(dead_code)]

use prost::Message;
use tract_onnx::pb::tensor_proto::DataType;
use tract_onnx::pb::tensor_shape_proto::{dimension, Dimension};
use tract_onnx::pb::type_proto;
use tract_onnx::pb::{
    AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto, TensorShapeProto,
    TypeProto, ValueInfoProto,
};

pub struct LinearFixture {
    /// `weights[c][k]`: input channel `c` → output `k`.
    pub weights: Vec<[f32; 3]>,
    pub bias: Vec<f32>,
    pub softmax: bool,
    /// `None` for a symbolic batch dimension.
    pub batch: Option<i64>,
}

impl LinearFixture {
    pub fn new(weights: Vec<[f32; 3]>, bias: Vec<f32>) -> Self {
        Self { weights, bias, softmax: false, batch: None }
    }

    /// Reference output for one tile given its per-channel means.
    pub fn logits(&self, channel_means: [f32; 3]) -> Vec<f32> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w[0] * channel_means[0] + w[1] * channel_means[1] + w[2] * channel_means[2] + b)
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let k = self.bias.len() as i64;
        let dim = |d: Option<i64>| Dimension {
            denotation: String::new(),
            value: Some(match d {
                Some(v) => dimension::Value::DimValue(v),
                None => dimension::Value::DimParam("N".into()),
            }),
        };
        let value_info = |name: &str, dims: Vec<Option<i64>>| ValueInfoProto {
            name: name.into(),
            r#type: Some(TypeProto {
                denotation: String::new(),
                value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                    elem_type: DataType::Float as i32,
                    shape: Some(TensorShapeProto { dim: dims.into_iter().map(dim).collect() }),
                })),
            }),
            doc_string: String::new(),
        };
        let tensor = |name: &str, dims: Vec<i64>, data: Vec<f32>| TensorProto {
            dims,
            data_type: DataType::Float as i32,
            float_data: data,
            name: name.into(),
            ..Default::default()
        };
        let node = |op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>| NodeProto {
            input: inputs.iter().map(|s| s.to_string()).collect(),
            output: vec![output.into()],
            name: format!("{op}_{output}"),
            op_type: op.into(),
            attribute,
            ..Default::default()
        };
        let int_attr = |name: &str, i: i64| AttributeProto {
            name: name.into(),
            i,
            r#type: tract_onnx::pb::attribute_proto::AttributeType::Int as i32,
            ..Default::default()
        };

        // Gemm computes flat[N,3] · W[3,K] + b.
        let mut w = Vec::with_capacity(3 * k as usize);
        for c in 0..3 {
            for row in &self.weights {
                w.push(row[c]);
            }
        }
        let mut nodes = vec![
            node("GlobalAveragePool", &["input"], "pooled", vec![]),
            node("Flatten", &["pooled"], "flat", vec![int_attr("axis", 1)]),
            node("Gemm", &["flat", "W", "b"], if self.softmax { "logits" } else { "output" }, vec![]),
        ];
        if self.softmax {
            nodes.push(node("Softmax", &["logits"], "output", vec![int_attr("axis", 1)]));
        }
        let graph = GraphProto {
            node: nodes,
            name: "fixture".into(),
            initializer: vec![tensor("W", vec![3, k], w), tensor("b", vec![k], self.bias.clone())],
            input: vec![value_info("input", vec![self.batch, Some(3), Some(224), Some(224)])],
            output: vec![value_info("output", vec![self.batch, Some(k)])],
            ..Default::default()
        };
        ModelProto {
            ir_version: 8,
            opset_import: vec![OperatorSetIdProto { domain: String::new(), version: 13 }],
            producer_name: "fixture".into(),
            graph: Some(graph),
            ..Default::default()
        }
        .encode_to_vec()
    }

    pub fn write(&self, path: &std::path::Path) {
        std::fs::write(path, self.encode()).unwrap();
    }
}
