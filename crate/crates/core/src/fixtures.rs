//! Tiny ONNX models for tests. Enabled by the `test-fixtures` feature.

use std::path::Path;

use prost::Message;
use tract_onnx::pb;

use crate::extractor::{InputLayout, DEFAULT_INPUT_SIZE};

const FLOAT: i32 = 1;

fn value_info(name: &str, dims: &[i64]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    let dim = dims
        .iter()
        .map(|&d| Dimension { value: Some(Value::DimValue(d)), ..Default::default() })
        .collect();
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(pb::TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn input_dims(layout: InputLayout) -> [i64; 4] {
    let s = DEFAULT_INPUT_SIZE as i64;
    match layout {
        InputLayout::Hwc => [1, s, s, 3],
        InputLayout::Chw => [1, 3, s, s],
    }
}

fn model(node: pb::NodeProto, input: pb::ValueInfoProto, output: pb::ValueInfoProto) -> Vec<u8> {
    let graph = pb::GraphProto {
        name: "fixture".into(),
        node: vec![node],
        input: vec![input],
        output: vec![output],
        ..Default::default()
    };
    pb::ModelProto {
        ir_version: 7,
        opset_import: vec![pb::OperatorSetIdProto { domain: String::new(), version: 13 }],
        producer_name: "mufm-fixtures".into(),
        graph: Some(graph),
        ..Default::default()
    }
    .encode_to_vec()
}

/// A model whose output is its input: a `(1, 224, 224, 3)` (or CHW)
/// feature map that the extractor pools down to 3 channels.
pub fn identity_model(layout: InputLayout) -> Vec<u8> {
    let dims = input_dims(layout);
    let node = pb::NodeProto {
        input: vec!["image".into()],
        output: vec!["features".into()],
        op_type: "Identity".into(),
        name: "identity".into(),
        ..Default::default()
    };
    model(node, value_info("image", &dims), value_info("features", &dims))
}

/// A single spatial-mean layer producing a `(1, 3)` vector.
pub fn averaging_model(layout: InputLayout) -> Vec<u8> {
    let dims = input_dims(layout);
    let axes = match layout {
        InputLayout::Hwc => vec![1, 2],
        InputLayout::Chw => vec![2, 3],
    };
    let node = pb::NodeProto {
        input: vec!["image".into()],
        output: vec!["embedding".into()],
        op_type: "ReduceMean".into(),
        name: "gap".into(),
        attribute: vec![
            pb::AttributeProto {
                name: "axes".into(),
                ints: axes,
                r#type: pb::attribute_proto::AttributeType::Ints as i32,
                ..Default::default()
            },
            pb::AttributeProto {
                name: "keepdims".into(),
                i: 0,
                r#type: pb::attribute_proto::AttributeType::Int as i32,
                ..Default::default()
            },
        ],
        ..Default::default()
    };
    model(node, value_info("image", &dims), value_info("embedding", &[1, 3]))
}

pub fn write_identity_model(path: &Path, layout: InputLayout) -> std::io::Result<()> {
    std::fs::write(path, identity_model(layout))
}

pub fn write_averaging_model(path: &Path, layout: InputLayout) -> std::io::Result<()> {
    std::fs::write(path, averaging_model(layout))
}
