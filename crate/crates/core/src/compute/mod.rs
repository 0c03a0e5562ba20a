//! Differentiable computation: the graph, parameter storage, optimizer,
//! seeding, and the finite-difference oracle used to validate gradients.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod seed;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Graph, Real, Var};
pub use optim::Adam;
pub use params::{normal_init, xavier_init, NamedTensor, ParamGroup, ParamId, ParamStore};
pub use seed::{DamRng, RngSeed};

/// Matrix type used for every model tensor.
pub type RealMatrix = ndarray::Array2<f32>;

/// Forward-pass mode. Training mode carries the dropout random stream.
pub enum Mode<'a> {
    Train(&'a mut DamRng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Train(r) => Mode::Train(r),
            Mode::Eval => Mode::Eval,
        }
    }
}

/// Applies dropout in training mode; identity otherwise.
pub fn dropout(g: &mut Graph<f32>, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) => g.dropout(x, p, *rng),
        Mode::Eval => x,
    }
}
