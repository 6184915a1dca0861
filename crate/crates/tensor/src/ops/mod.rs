mod conv;
mod elementwise;
mod linalg;
mod loss;
mod shape;

pub use loss::LOGIT_CLIP;

/// Splits a shape into `(outer, mid, inner)` around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
