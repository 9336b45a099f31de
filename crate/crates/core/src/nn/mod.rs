//! Feed-forward networks with hand-written backpropagation.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod policy;

pub use mlp::{Activation, Dense, Mlp, MlpGrads, MlpSpec, Tape};
pub use optim::{Algorithm, Optimizer, OptimizerConfig};
pub use policy::{gaussian_log_prob, GaussianPolicy, PolicyGrads};

/// Flat view over a parameter (or gradient) set, tensor by tensor.
///
/// Parameters and their gradients must yield slices in the same order.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}
