//! Dense tensors and tape-based reverse-mode differentiation, sized for the
//! two small UNet-style networks in `pam-core`.
//!
//! Forward ops live on [`Graph`]; every op records what its backward pass
//! needs. Convolutions and matrix products go through `matrixmultiply`.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{he_uniform, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Result, Tensor, TensorError};

/// Half-pixel bilinear resize of a single `h x w` plane.
pub fn resize_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w, "plane size");
    let mut dst = vec![T::zero(); oh * ow];
    kernels::resize_bilinear_plane(src, h, w, oh, ow, &mut dst);
    dst
}

/// Pixel-center nearest-neighbour resize of a single `h x w` plane.
pub fn resize_nearest<T: Copy + Default>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w, "plane size");
    let mut dst = vec![T::default(); oh * ow];
    kernels::resize_nearest_plane(src, h, w, oh, ow, &mut dst);
    dst
}

/// Logistic function, evaluated without overflow for large `|v|`.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    graph::sigmoid(v)
}
