//! Minimal dense-tensor neural-network core: layer forward/backward passes,
//! softmax cross-entropy, and SGD with momentum. Sufficient to train the
//! vanilla and factorized architectures at desk scale.

pub mod layers;
pub mod loss;
pub mod model;
pub mod sgd;

pub use layers::{
    batchnorm_forward_eval, batchnorm_forward_train, conv2d_forward, dense_forward,
    factorized_conv_forward, factorized_dense_forward, ConvGeometry,
};
pub use loss::softmax_cross_entropy;
pub use model::{factorize_model, materialize, recover_model, Gradients, Layer, LayerGrads, Model};
pub use sgd::{SgdHyper, SgdState};
