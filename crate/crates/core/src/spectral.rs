//! FFTs along labeled axes, frequency truncation and its zero-padding adjoint.
//!
//! Scaling convention: the forward transform is unnormalized, the inverse is
//! scaled by `1/N` per transformed axis, so `ifft(fft(x)) = x`. The adjoint of
//! the forward transform (`ℱᵀ`, conjugate transpose) is therefore `N·ℱ⁻¹`, and
//! the adjoint of the inverse is `ℱ/N`. Backward passes use exactly these.
//!
//! Truncation keeps the indices `{0..m} ∪ {N-m..N}` along each truncated axis,
//! in that order, so the retained extent is `min(2m, N)`.

use num_complex::Complex;
use rustfft::FftDirection;
use thiserror::Error;

use crate::tensor::{DimLabel, Element, Real, Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("cannot transform along `{0}`: label missing or in the wrong domain")]
    UnknownLabel(DimLabel),
    #[error("extent mismatch along `{label}`: expected {expected}, found {found}")]
    ExtentMismatch { label: DimLabel, expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SpectralError> = std::result::Result<T, E>;

/// Retained mode count per spectral axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSpec {
    modes: Vec<(DimLabel, usize)>,
}

impl ModeSpec {
    /// Spatial labels are accepted and stored as their spectral duals.
    pub fn new(modes: impl IntoIterator<Item = (DimLabel, usize)>) -> Self {
        ModeSpec {
            modes: modes.into_iter().map(|(l, m)| (l.to_spectral().unwrap_or(l), m)).collect(),
        }
    }

    pub fn modes(&self) -> &[(DimLabel, usize)] {
        &self.modes
    }

    pub fn get(&self, label: DimLabel) -> Option<usize> {
        self.modes.iter().find(|&&(l, _)| l == label).map(|&(_, m)| m)
    }

    /// Restriction to the given labels.
    pub fn only(&self, labels: &[DimLabel]) -> ModeSpec {
        ModeSpec { modes: self.modes.iter().copied().filter(|(l, _)| labels.contains(l)).collect() }
    }
}

pub fn retained_extent(n: usize, m: usize) -> usize {
    (2 * m).min(n)
}

/// Indices kept along an axis of extent `n` with `m` retained modes.
pub fn retained_indices(n: usize, m: usize) -> Vec<usize> {
    if 2 * m >= n {
        return (0..n).collect();
    }
    (0..m).chain(n - m..n).collect()
}

fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let ext = shape.extents();
    (ext[..axis].iter().product(), ext[axis], ext[axis + 1..].iter().product())
}

/// Gathers `idx` along `axis`.
pub(crate) fn select_axis<E: Element>(t: &Tensor<E>, axis: usize, idx: &[usize]) -> Tensor<E> {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        let base = o * n * inner;
        for &i in idx {
            out.extend_from_slice(&src[base + i * inner..base + (i + 1) * inner]);
        }
    }
    Tensor::new(t.shape().with_extent(axis, idx.len()), out).expect("volume preserved")
}

/// Scatters `t` along `axis` into positions `idx` of a zero tensor of extent `full`.
pub(crate) fn scatter_axis<E: Element>(t: &Tensor<E>, axis: usize, idx: &[usize], full: usize) -> Tensor<E> {
    let (outer, r, inner) = axis_split(t.shape(), axis);
    debug_assert_eq!(r, idx.len());
    let src = t.data();
    let mut out = vec![E::zeroed(); outer * full * inner];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            let from = (o * r + j) * inner;
            let to = (o * full + i) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::new(t.shape().with_extent(axis, full), out).expect("volume preserved")
}

/// In-place 1-D transform of every line along `axis`, optionally scaled.
fn transform_axis<T: Real>(data: &mut [Complex<T>], shape: &Shape, axis: usize, dir: FftDirection, scale: Option<T>) {
    let (outer, n, inner) = axis_split(shape, axis);
    let fft = T::with_planner(|p| p.plan_fft(n, dir));
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    if inner == 1 {
        fft.process_with_scratch(data, &mut scratch);
        if let Some(s) = scale {
            data.iter_mut().for_each(|v| *v = *v * s);
        }
        return;
    }
    // transpose each outer slab so lines are contiguous, transform, transpose back
    let mut lines = vec![Complex::new(T::zero(), T::zero()); n * inner];
    for o in 0..outer {
        let slab = &mut data[o * n * inner..(o + 1) * n * inner];
        for k in 0..n {
            for i in 0..inner {
                lines[i * n + k] = slab[k * inner + i];
            }
        }
        fft.process_with_scratch(&mut lines, &mut scratch);
        for k in 0..n {
            for i in 0..inner {
                let v = lines[i * n + k];
                slab[k * inner + i] = match scale {
                    Some(s) => v * s,
                    None => v,
                };
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Forward,
    Inverse,
    ForwardAdjoint,
    InverseAdjoint,
}

fn apply<T: Real>(x: &Tensor<Complex<T>>, dims: &[DimLabel], kind: Kind) -> Result<Tensor<Complex<T>>> {
    let mut shape = x.shape().clone();
    let mut data = x.data().to_vec();
    for &label in dims {
        let (from_spatial, dir) = match kind {
            Kind::Forward | Kind::InverseAdjoint => (true, FftDirection::Forward),
            Kind::Inverse | Kind::ForwardAdjoint => (false, FftDirection::Inverse),
        };
        let target = if from_spatial { label.to_spectral() } else { label.to_spatial() };
        let (axis, target) = match (shape.axis(label), target) {
            (Some(a), Some(t)) => (a, t),
            _ => return Err(SpectralError::UnknownLabel(label)),
        };
        let n = shape.dims()[axis].1;
        let inv_n = T::one() / T::of(n as f64);
        let scale = match kind {
            Kind::Forward | Kind::ForwardAdjoint => None,
            Kind::Inverse | Kind::InverseAdjoint => Some(inv_n),
        };
        transform_axis(&mut data, &shape, axis, dir, scale);
        shape = shape.with_label(axis, target)?;
    }
    Ok(Tensor::new(shape, data)?)
}

/// Unnormalized forward DFT along spatial `dims` (relabels `x -> kx`, ...).
/// Axes are transformed in the order given.
pub fn fft_dims<T: Real>(x: &Tensor<Complex<T>>, dims: &[DimLabel]) -> Result<Tensor<Complex<T>>> {
    apply(x, dims, Kind::Forward)
}

/// Inverse DFT along spectral `dims`, scaled by `1/N` per axis.
pub fn ifft_dims<T: Real>(x: &Tensor<Complex<T>>, dims: &[DimLabel]) -> Result<Tensor<Complex<T>>> {
    apply(x, dims, Kind::Inverse)
}

/// `ℱᵀ = N·ℱ⁻¹`: maps spectral `dims` back to spatial labels, unscaled.
pub fn fft_adjoint_dims<T: Real>(x: &Tensor<Complex<T>>, dims: &[DimLabel]) -> Result<Tensor<Complex<T>>> {
    apply(x, dims, Kind::ForwardAdjoint)
}

/// `(ℱ⁻¹)ᵀ = ℱ/N`: maps spatial `dims` to spectral labels.
pub fn ifft_adjoint_dims<T: Real>(x: &Tensor<Complex<T>>, dims: &[DimLabel]) -> Result<Tensor<Complex<T>>> {
    apply(x, dims, Kind::InverseAdjoint)
}

/// Keeps the low-frequency block `{0..m} ∪ {N-m..N}` along every axis in `spec`.
/// Axes with `2m >= N` are left untouched.
pub fn truncate_modes<E: Element>(x: &Tensor<E>, spec: &ModeSpec) -> Result<Tensor<E>> {
    let mut out = x.clone();
    for &(label, m) in spec.modes() {
        let axis = x.shape().axis(label).ok_or(SpectralError::UnknownLabel(label))?;
        let n = x.shape().dims()[axis].1;
        if 2 * m < n {
            out = select_axis(&out, axis, &retained_indices(n, m));
        }
    }
    Ok(out)
}

/// Adjoint of [`truncate_modes`]: scatters retained modes back to their
/// original positions in zero tensors of the `original` extents.
pub fn pad_modes<E: Element>(x: &Tensor<E>, spec: &ModeSpec, original: &[(DimLabel, usize)]) -> Result<Tensor<E>> {
    let mut out = x.clone();
    for &(label, m) in spec.modes() {
        let axis = x.shape().axis(label).ok_or(SpectralError::UnknownLabel(label))?;
        let n = original
            .iter()
            .find(|&&(l, _)| l == label)
            .map(|&(_, n)| n)
            .ok_or(SpectralError::UnknownLabel(label))?;
        let r = retained_extent(n, m);
        let found = x.shape().dims()[axis].1;
        if found != r {
            return Err(SpectralError::ExtentMismatch { label, expected: r, found });
        }
        if r < n {
            out = scatter_axis(&out, axis, &retained_indices(n, m), n);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DimLabel::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn random(dims: &[(DimLabel, usize)], seed: u64) -> Tensor<C> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(dims.iter().copied()).unwrap(), |_| {
            Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn max_rel(a: &Tensor<C>, b: &Tensor<C>) -> f64 {
        let scale = b.data().iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max) / scale
    }

    /// Naive O(N²) DFT along one axis of a 1-D tensor.
    fn naive_dft(x: &[C]) -> Vec<C> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, v)| v * C::from_polar(1.0, -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut data = vec![C::new(0.0, 0.0); 8];
        data[0] = C::new(1.0, 0.0);
        let x = Tensor::from_dims(&[(X, 8)], data).unwrap();
        let f = fft_dims(&x, &[X]).unwrap();
        assert_eq!(f.shape().labels(), vec![Kx]);
        assert!(f.data().iter().all(|v| (v - C::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn matches_naive_dft_on_middle_axis() {
        let x = random(&[(B, 2), (Y, 6), (Z, 3)], 1);
        let f = fft_dims(&x, &[Y]).unwrap();
        for b in 0..2 {
            for z in 0..3 {
                let line: Vec<C> = (0..6).map(|k| x.data()[(b * 6 + k) * 3 + z]).collect();
                let want = naive_dft(&line);
                for (k, w) in want.iter().enumerate() {
                    assert!((f.data()[(b * 6 + k) * 3 + z] - w).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random(&[(B, 1), (X, 8), (Y, 5), (Z, 4), (T, 3)], 2);
        let f = fft_dims(&x, &[X, Y, Z, T]).unwrap();
        let back = ifft_dims(&f, &[Kx, Ky, Kz, Kt]).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(max_rel(&back, &x) < 1e-12);

        let line = random(&[(X, 16)], 3);
        let spec = fft_dims(&line, &[X]).unwrap();
        let lhs = line.norm_sq();
        let rhs = spec.norm_sq() / 16.0;
        assert!((lhs - rhs).abs() <= 1e-12 * lhs);
    }

    #[test]
    fn unknown_labels() {
        let x = random(&[(X, 4)], 4);
        assert!(matches!(fft_dims(&x, &[Y]), Err(SpectralError::UnknownLabel(Y))));
        assert!(matches!(ifft_dims(&x, &[X]), Err(SpectralError::UnknownLabel(X))));
    }

    #[test]
    fn fft_adjoints() {
        for seed in 0..20 {
            let x = random(&[(B, 2), (X, 6), (Y, 4)], seed);
            let y = random(&[(B, 2), (Kx, 6), (Ky, 4)], 100 + seed);
            let fx = fft_dims(&x, &[X, Y]).unwrap();
            let fty = fft_adjoint_dims(&y, &[Kx, Ky]).unwrap();
            let (l, r) = (fx.dot(&y).unwrap(), x.dot(&fty).unwrap());
            assert!((l - r).abs() <= 1e-12 * l.abs().max(1.0), "{l} vs {r}");

            let ix = ifft_dims(&y, &[Kx, Ky]).unwrap();
            let ity = ifft_adjoint_dims(&x, &[X, Y]).unwrap();
            let (l, r) = (ix.dot(&x).unwrap(), y.dot(&ity).unwrap());
            assert!((l - r).abs() <= 1e-12 * l.abs().max(1.0), "{l} vs {r}");
        }
    }

    #[test]
    fn retention_rule() {
        assert_eq!(retained_indices(8, 2), vec![0, 1, 6, 7]);
        assert_eq!(retained_indices(5, 3), vec![0, 1, 2, 3, 4]);
        assert_eq!(retained_extent(8, 2), 4);
        assert_eq!(retained_extent(6, 4), 6);
        let x = random(&[(Kx, 5)], 5);
        let spec = ModeSpec::new([(Kx, 3)]);
        assert_eq!(truncate_modes(&x, &spec).unwrap(), x);
    }

    #[test]
    fn truncate_keeps_symmetric_block() {
        let x = Tensor::from_fn(Shape::new([(Kx, 8)]).unwrap(), |i| C::new(i as f64, 0.0)).unwrap();
        let t = truncate_modes(&x, &ModeSpec::new([(Kx, 2)])).unwrap();
        let re: Vec<f64> = t.data().iter().map(|v| v.re).collect();
        assert_eq!(re, vec![0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn pad_then_truncate_is_identity() {
        let spec = ModeSpec::new([(Ky, 2), (Kz, 1), (Kt, 3)]);
        let original = [(Ky, 8), (Kz, 5), (Kt, 4)];
        let small = random(&[(B, 2), (Ky, 4), (Kz, 2), (Kt, 4)], 6);
        let padded = pad_modes(&small, &spec, &original).unwrap();
        assert_eq!(padded.shape().extents(), vec![2, 8, 5, 4]);
        assert_eq!(truncate_modes(&padded, &spec).unwrap(), small);
        let zeros = Tensor::<C>::zeros(small.shape().clone()).unwrap();
        assert!(pad_modes(&zeros, &spec, &original).unwrap().data().iter().all(|v| v.norm() == 0.0));
        let wrong = random(&[(B, 2), (Ky, 3), (Kz, 2), (Kt, 4)], 7);
        assert!(matches!(pad_modes(&wrong, &spec, &original), Err(SpectralError::ExtentMismatch { .. })));
    }

    #[test]
    fn truncation_adjoint_and_projection() {
        let spec = ModeSpec::new([(Kx, 2), (Ky, 1)]);
        let original = [(Kx, 7), (Ky, 6)];
        for seed in 0..20 {
            let x = random(&[(B, 1), (Kx, 7), (Ky, 6)], seed);
            let y = random(&[(B, 1), (Kx, 4), (Ky, 2)], 50 + seed);
            let sx = truncate_modes(&x, &spec).unwrap();
            let sty = pad_modes(&y, &spec, &original).unwrap();
            let (l, r) = (sx.dot(&y).unwrap(), x.dot(&sty).unwrap());
            assert!((l - r).abs() <= 1e-14 * l.abs().max(1.0));

            // SᵀS is idempotent and self-adjoint
            let proj = |v: &Tensor<C>| pad_modes(&truncate_modes(v, &spec).unwrap(), &spec, &original).unwrap();
            let px = proj(&x);
            assert_eq!(proj(&px), px);
            let z = random(&[(B, 1), (Kx, 7), (Ky, 6)], 90 + seed);
            let (l, r) = (px.dot(&z).unwrap(), x.dot(&proj(&z)).unwrap());
            assert!((l - r).abs() <= 1e-14 * l.abs().max(1.0));
        }
    }

    #[test]
    fn partial_truncation_commutes_with_remaining_transform() {
        let x = random(&[(B, 1), (C, 2), (X, 8), (Y, 6), (Z, 5), (T, 4)], 11);
        let spec = ModeSpec::new([(Kx, 2), (Ky, 2), (Kz, 1), (Kt, 1)]);
        let staged = {
            let f = fft_dims(&x, &[Y, Z, T]).unwrap();
            let s = truncate_modes(&f, &spec.only(&[Ky, Kz, Kt])).unwrap();
            truncate_modes(&fft_dims(&s, &[X]).unwrap(), &spec.only(&[Kx])).unwrap()
        };
        let full = truncate_modes(&fft_dims(&x, &[X, Y, Z, T]).unwrap(), &spec).unwrap();
        assert!(max_rel(&staged, &full) < 1e-12);
    }

    #[test]
    fn fft_is_linear() {
        let a = 1.7;
        let x1 = random(&[(X, 9), (Y, 4)], 20);
        let x2 = random(&[(X, 9), (Y, 4)], 21);
        let combo = x1.zip_map(&x2, |p, q| p * a + q).unwrap();
        let lhs = fft_dims(&combo, &[X, Y]).unwrap();
        let rhs = fft_dims(&x1, &[X, Y]).unwrap().zip_map(&fft_dims(&x2, &[X, Y]).unwrap(), |p, q| p * a + q).unwrap();
        assert!(max_rel(&lhs, &rhs) < 1e-12);
    }
}
