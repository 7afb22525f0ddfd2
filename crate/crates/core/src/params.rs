//! Named views over model tensors, in a fixed enumeration order shared by
//! the optimizer, the checkpoint container and the gradient checker.

#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub decay: bool,
}

/// Anything exposing its tensors by name. Both methods must enumerate the
/// same tensors in the same order.
pub trait Parameters {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// All scalars concatenated in enumeration order.
    fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// `self += scale * other` tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            crate::linalg::axpy(scale, src.data, dst.data);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
