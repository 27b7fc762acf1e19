//! Raw forward/backward kernels. The tape in [`crate::autograd`] wires them up.

pub mod conv;
pub mod layers;
