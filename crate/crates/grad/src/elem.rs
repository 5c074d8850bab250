use ndarray::NdFloat;

/// Element type the tape is generic over.
///
/// Training runs in `f32`; finite-difference gradient checks instantiate the
/// same ops in `f64`, where central differences are accurate enough to verify
/// to 1e-4 relative.
pub trait Elem: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
