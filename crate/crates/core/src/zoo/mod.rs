//! Declarative CNN specs, parameter materialisation and analytic counters.

mod blob;
mod model;
mod spec;

pub use blob::{decode_model, encode_model, read_model, write_model, PARAM_MAGIC};
pub use model::{param_shapes, ActivationRecord, BnStats, Forward, Mode, Model, Taps, BN_EPS, BN_MOMENTUM};
pub use spec::{plain_cnn, plain_cnn_bn, wrn_spec, InputShape, Layer, LayerInfo, LayerKind, ModelSpec, Shape, WrnConfig, CIFAR_INPUT};
