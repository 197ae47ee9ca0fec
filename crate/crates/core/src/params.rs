//! Named views over parameter tensors, used by the optimizer, the
//! checkpoint writer and the gradient checks.

use ndarray::{ArrayBase, Dimension, OwnedRepr};

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait ParamTensors {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);

    fn named(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn push_ref<'a, D: Dimension>(
    out: &mut Vec<TensorRef<'a>>,
    prefix: &str,
    name: &str,
    a: &'a ArrayBase<OwnedRepr<f64>, D>,
) {
    out.push(TensorRef {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters use standard layout"),
    });
}

pub(crate) fn push_mut<'a, D: Dimension>(
    out: &mut Vec<TensorMut<'a>>,
    prefix: &str,
    name: &str,
    a: &'a mut ArrayBase<OwnedRepr<f64>, D>,
) {
    let shape = a.shape().to_vec();
    out.push(TensorMut {
        name: format!("{prefix}{name}"),
        shape,
        data: a.as_slice_mut().expect("parameters use standard layout"),
    });
}
