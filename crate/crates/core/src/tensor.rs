//! Dense row-major tensors.
//!
//! A [`Tensor`] is a flat buffer plus a shape. It doubles as the node payload
//! of the autodiff tape: `grad` is populated by `Tape::backward`, and
//! `tape_id` identifies the node while a tensor is registered on a tape.
//! Layout is always contiguous row-major; there are no strided views.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    /// Accumulated gradient, same length as `values` when present.
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
    /// Node id on the tape this tensor is currently registered with.
    pub tape_id: Option<usize>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            values.len()
        );
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive, got {:?}", shape);
        Tensor { shape, values, grad: None, requires_grad: false, tape_id: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![S::zero(); numel])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; numel])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    /// Euclidean norm of the value buffer.
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Zero the gradient buffer if present.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Shape of the broadcast of two shapes, aligned at the trailing dimension.
/// Panics with both shapes named if they are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcastable",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Strides for reading an operand of shape `shape` as if broadcast to
/// `out_shape`: broadcast dimensions get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let offset = rank - shape.len();
    let mut s = vec![0usize; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// True when `small` occupies the trailing dimensions of `big` exactly, so a
/// broadcast is a plain tiling of the flat buffer.
pub fn is_suffix_shape(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Walks flat indices of an operand under broadcasting. `out_shape` drives
/// the iteration; the operand index advances by its broadcast strides.
pub struct BroadcastIter {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
    coords: Vec<usize>,
    index: usize,
    remaining: usize,
}

impl BroadcastIter {
    pub fn new(operand_shape: &[usize], out_shape: &[usize]) -> Self {
        let numel = out_shape.iter().product();
        BroadcastIter {
            strides: broadcast_strides(operand_shape, out_shape),
            coords: vec![0; out_shape.len()],
            out_shape: out_shape.to_vec(),
            index: 0,
            remaining: numel,
        }
    }
}

impl Iterator for BroadcastIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let current = self.index;
        self.remaining -= 1;
        // Advance odometer from the last axis.
        for axis in (0..self.out_shape.len()).rev() {
            self.coords[axis] += 1;
            self.index += self.strides[axis];
            if self.coords[axis] < self.out_shape[axis] {
                break;
            }
            self.index -= self.strides[axis] * self.out_shape[axis];
            self.coords[axis] = 0;
        }
        Some(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_length_must_agree() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn mismatched_buffer_panics() {
        let _ = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn broadcast_shapes_align_trailing() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[3], &[2, 3]), vec![2, 3]);
    }

    #[test]
    #[should_panic(expected = "not broadcastable")]
    fn incompatible_broadcast_panics() {
        broadcast_shape(&[2, 3], &[4, 3]);
    }

    #[test]
    fn broadcast_iter_tiles_suffix() {
        // (3,) against (2,3): indices repeat 0,1,2,0,1,2.
        let idx: Vec<usize> = BroadcastIter::new(&[3], &[2, 3]).collect();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn broadcast_iter_inner_ones() {
        // (2,1) against (2,3): 0,0,0,1,1,1.
        let idx: Vec<usize> = BroadcastIter::new(&[2, 1], &[2, 3]).collect();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn f32_instantiation_works() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.5, -2.0]);
        assert_eq!(t.values, vec![1.5f32, -2.0]);
        assert!((t.l2_norm() - 2.5).abs() < 1e-6);
    }
}
