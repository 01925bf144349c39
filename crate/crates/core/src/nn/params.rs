/// A model whose trainable state is a fixed list of flat `f64` segments.
///
/// Gradient buffers implement the same trait with congruent segments, which
/// is all the optimizer and the finite-difference checker need to know.
pub trait ParamSet {
    fn segments(&self) -> Vec<&[f64]>;
    fn segments_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    fn segment_lens(&self) -> Vec<usize> {
        self.segments().iter().map(|s| s.len()).collect()
    }

    /// All parameters concatenated in segment order.
    fn flatten(&self) -> Vec<f64> {
        self.segments().concat()
    }
}

/// Returns true when two parameter sets have identical segment layouts.
pub fn congruent<A: ParamSet + ?Sized, B: ParamSet + ?Sized>(a: &A, b: &B) -> bool {
    a.segment_lens() == b.segment_lens()
}

impl ParamSet for Vec<f64> {
    fn segments(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}
