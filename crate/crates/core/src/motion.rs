//! Motion sequences, the truncated orthonormal DCT-II, observation padding
//! and the observation-splicing (inpainting) mask.
//!
//! A sequence is an `N x 3J` matrix (frames by joint coordinates, meters).
//! Its frequency form keeps the first `L` DCT rows: `y = B_L x`, and the
//! inverse is `x = B_L^T y`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Skeleton metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub joints: usize,
    pub names: Vec<String>,
    pub frame_dt: f64,
}

impl SkeletonSpec {
    pub fn new(names: Vec<String>, frame_dt: f64) -> Result<Self> {
        if names.is_empty() {
            return Err(invalid("skeleton needs at least one joint"));
        }
        if !(frame_dt > 0.0) {
            return Err(invalid("frame_dt must be positive"));
        }
        Ok(Self { joints: names.len(), names, frame_dt })
    }

    /// Coordinates per frame (`3J`).
    pub fn channels(&self) -> usize {
        3 * self.joints
    }
}

/// `H + F` frames of `3J` coordinates; the first `H` frames are observed.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    observed: usize,
}

impl MotionSequence {
    pub fn new(frames: Tensor, observed: usize) -> Result<Self> {
        let (n, _) = frames.dims2()?;
        if observed == 0 || observed >= n {
            return Err(invalid("motion sequence needs H >= 1 and F >= 1"));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite { op: "motion_sequence" });
        }
        Ok(Self { frames, observed })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn observed_len(&self) -> usize {
        self.observed
    }

    pub fn future_len(&self) -> usize {
        self.len() - self.observed
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    /// The first `H` frames.
    pub fn observation(&self) -> Tensor {
        rows(&self.frames, 0, self.observed)
    }

    /// The last `F` frames.
    pub fn future(&self) -> Tensor {
        rows(&self.frames, self.observed, self.len())
    }
}

/// Copies rows `start..end` of a 2-D tensor.
pub fn rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.shape()[1];
    Tensor::new([end - start, c], t.data()[start * c..end * c].to_vec()).expect("row slice")
}

/// The first `L` DCT rows of an `N`-frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyCoeffs {
    coeffs: Tensor,
    seq_len: usize,
}

impl FrequencyCoeffs {
    pub fn new(coeffs: Tensor, seq_len: usize) -> Result<Self> {
        let (l, _) = coeffs.dims2()?;
        if l == 0 || l > seq_len {
            return Err(invalid("frequency coefficients need 1 <= L <= N"));
        }
        Ok(Self { coeffs, seq_len })
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Tensor {
        self.coeffs
    }

    pub fn retained(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// Frame mask: `H` ones followed by `F` zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintMask {
    mask: Vec<f64>,
    observed: usize,
}

impl InpaintMask {
    pub fn new(observed: usize, future: usize) -> Self {
        let mut mask = vec![1.0; observed];
        mask.resize(observed + future, 0.0);
        Self { mask, observed }
    }

    pub fn values(&self) -> &[f64] {
        &self.mask
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Rows `0..L` of the orthonormal DCT-II basis for length `N`, as `L x N`.
pub fn dct_basis(n: usize, l: usize) -> Result<Tensor> {
    if n == 0 || l == 0 || l > n {
        return Err(invalid("dct_basis requires 1 <= L <= N"));
    }
    let nf = n as f64;
    let mut data = Vec::with_capacity(l * n);
    for k in 0..l {
        let scale = if k == 0 { math::sqrt(1.0 / nf) } else { math::sqrt(2.0 / nf) };
        for i in 0..n {
            data.push(scale * math::cos(math::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)));
        }
    }
    Tensor::new([l, n], data)
}

pub fn to_frequency(x: &MotionSequence, l: usize) -> Result<FrequencyCoeffs> {
    FrequencyCodec::new(x.len(), l)?.encode(x.frames())
}

/// Inverse transform, `B_L^T y`, giving `N x 3J` frames.
pub fn from_frequency(y: &FrequencyCoeffs) -> Result<Tensor> {
    FrequencyCodec::new(y.seq_len(), y.retained())?.decode(y)
}

/// Extends an `H x 3J` observation to `total_len` frames by repeating its
/// last frame.
pub fn pad_observation(x_obs: &Tensor, total_len: usize) -> Result<MotionSequence> {
    let (h, c) = x_obs.dims2()?;
    if h == 0 {
        return Err(invalid("empty observation"));
    }
    if total_len <= h {
        return Err(invalid("padded length must exceed the observation length"));
    }
    let mut data = Vec::with_capacity(total_len * c);
    data.extend_from_slice(x_obs.data());
    let last = x_obs.row(h - 1).to_vec();
    for _ in h..total_len {
        data.extend_from_slice(&last);
    }
    MotionSequence::new(Tensor::new([total_len, c], data)?, h)
}

/// Condition coefficients: DCT of the padded observation.
pub fn condition(x_obs: &Tensor, total_len: usize, l: usize) -> Result<FrequencyCoeffs> {
    to_frequency(&pad_observation(x_obs, total_len)?, l)
}

/// Splices observed frames from `y_obs` and the rest from `y_den` in the time
/// domain, then returns to frequency: `DCT(M*IDCT(y_obs) + (1-M)*IDCT(y_den))`.
pub fn apply_inpaint(
    y_den: &FrequencyCoeffs,
    y_obs: &FrequencyCoeffs,
    mask: &InpaintMask,
) -> Result<FrequencyCoeffs> {
    if y_den.coeffs().shape() != y_obs.coeffs().shape() || y_den.seq_len() != y_obs.seq_len() {
        return Err(Error::ShapeMismatch {
            op: "apply_inpaint",
            lhs: y_den.coeffs().shape().to_vec(),
            rhs: y_obs.coeffs().shape().to_vec(),
        });
    }
    if mask.len() != y_den.seq_len() {
        return Err(invalid("apply_inpaint: mask length differs from sequence length"));
    }
    let codec = FrequencyCodec::new(y_den.seq_len(), y_den.retained())?;
    let xd = codec.decode(y_den)?;
    let xo = codec.decode(y_obs)?;
    let c = xd.shape()[1];
    let mut x = xd.into_data();
    for (t, &m) in mask.values().iter().enumerate() {
        for j in 0..c {
            x[t * c + j] = m * xo.data()[t * c + j] + (1.0 - m) * x[t * c + j];
        }
    }
    codec.encode(&Tensor::new([mask.len(), c], x)?)
}

/// Cached truncated basis for one `(N, L)` pair.
#[derive(Clone, Debug)]
pub struct FrequencyCodec {
    basis: Tensor,
    basis_t: Tensor,
}

impl FrequencyCodec {
    pub fn new(n: usize, l: usize) -> Result<Self> {
        let basis = dct_basis(n, l)?;
        let basis_t = basis.t()?;
        Ok(Self { basis, basis_t })
    }

    pub fn seq_len(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn retained(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn encode(&self, frames: &Tensor) -> Result<FrequencyCoeffs> {
        FrequencyCoeffs::new(self.basis.matmul(frames)?, self.seq_len())
    }

    pub fn decode(&self, y: &FrequencyCoeffs) -> Result<Tensor> {
        if y.seq_len() != self.seq_len() {
            return Err(invalid("decode: sequence length differs from codec"));
        }
        self.basis_t.matmul(y.coeffs())
    }

    /// `[B, N, C] -> [B, L, C]`.
    pub fn encode_batch(&self, frames: &Tensor) -> Result<Tensor> {
        Tensor::left_apply(&self.basis, frames)
    }

    /// `[B, L, C] -> [B, N, C]`.
    pub fn decode_batch(&self, y: &Tensor) -> Result<Tensor> {
        Tensor::left_apply(&self.basis_t, y)
    }

    /// The inpainting splice as two `L x L` linear maps.
    pub fn inpaint_operator(&self, observed: usize) -> Result<InpaintOperator> {
        let (l, n) = (self.retained(), self.seq_len());
        if observed > n {
            return Err(invalid("inpaint_operator: observed length exceeds sequence"));
        }
        let mut from_den = Tensor::zeros([l, l]);
        let mut from_obs = Tensor::zeros([l, l]);
        for a in 0..l {
            for b in 0..l {
                let (mut od, mut oo) = (0.0, 0.0);
                for t in 0..n {
                    let p = self.basis.get2(a, t) * self.basis.get2(b, t);
                    if t < observed {
                        oo += p;
                    } else {
                        od += p;
                    }
                }
                from_den.set2(a, b, od);
                from_obs.set2(a, b, oo);
            }
        }
        Ok(InpaintOperator { from_den, from_obs })
    }
}

/// `apply_inpaint` in closed form: `y = P_den y_den + P_obs y_obs`, with
/// `P_den = B_L (I - M) B_L^T` and `P_obs = B_L M B_L^T`.
#[derive(Clone, Debug)]
pub struct InpaintOperator {
    pub from_den: Tensor,
    pub from_obs: Tensor,
}

impl InpaintOperator {
    /// Batched splice of `[B, L, C]` tensors.
    pub fn apply_batch(&self, y_den: &Tensor, y_obs: &Tensor) -> Result<Tensor> {
        let a = Tensor::left_apply(&self.from_den, y_den)?;
        let b = Tensor::left_apply(&self.from_obs, y_obs)?;
        a.add(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        let d = a.max_abs_diff(b).unwrap();
        assert!(d < tol, "max diff {d}");
    }

    #[test]
    fn dc_row_for_four_frames() {
        let b = dct_basis(4, 1).unwrap();
        assert_eq!(b.shape(), &[1, 4]);
        for v in b.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_transform() {
        let b = dct_basis(2, 2).unwrap();
        let y = b.matmul(&Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap()).unwrap();
        let r = core::f64::consts::FRAC_1_SQRT_2;
        assert!((y.data()[0] - r).abs() < 1e-12);
        assert!((y.data()[1] - r).abs() < 1e-12);
        assert!((y.data()[0] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn basis_is_orthonormal() {
        for n in [1, 2, 5, 16, 33] {
            for l in [1, n / 2 + 1, n] {
                let l = l.min(n);
                let b = dct_basis(n, l).unwrap();
                close(&b.matmul(&b.t().unwrap()).unwrap(), &Tensor::eye(l), 1e-10);
            }
        }
        let full = dct_basis(12, 12).unwrap();
        close(&full.matmul(&full.t().unwrap()).unwrap(), &Tensor::eye(12), 1e-12);
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(dct_basis(4, 5).is_err());
        assert!(dct_basis(4, 0).is_err());
        assert!(pad_observation(&Tensor::zeros([0, 3]), 5).is_err());
    }

    #[test]
    fn constant_sequence_is_dc_only() {
        let c = 1.7;
        let x = MotionSequence::new(Tensor::full([4, 2], c), 2).unwrap();
        let y = to_frequency(&x, 4).unwrap();
        for col in 0..2 {
            assert!((y.coeffs().get2(0, col) - 2.0 * c).abs() < 1e-12);
            for k in 1..4 {
                assert!(y.coeffs().get2(k, col).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_roundtrip() {
        let mut rng = seeded(1);
        let x = MotionSequence::new(Tensor::randn([10, 6], 1.0, &mut rng), 4).unwrap();
        let back = from_frequency(&to_frequency(&x, 10).unwrap()).unwrap();
        close(&back, x.frames(), 1e-10);
    }

    #[test]
    fn band_limited_roundtrip_at_truncation() {
        let mut rng = seeded(2);
        let (n, l) = (12, 10);
        let y = FrequencyCoeffs::new(Tensor::randn([l, 3], 1.0, &mut rng), n).unwrap();
        let x = from_frequency(&y).unwrap();
        let y2 = to_frequency(&MotionSequence::new(x.clone(), 3).unwrap(), l).unwrap();
        close(y2.coeffs(), y.coeffs(), 1e-10);
        close(&from_frequency(&y2).unwrap(), &x, 1e-10);
    }

    #[test]
    fn padding_repeats_last_frame() {
        let q = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let p = pad_observation(&q, 4).unwrap();
        for t in 0..4 {
            assert_eq!(p.frames().row(t), &[1.0, 2.0, 3.0]);
        }
        assert_eq!(p.observed_len(), 1);
        assert_eq!(p.future_len(), 3);
    }

    #[test]
    fn static_observation_has_dc_energy_only() {
        let obs = Tensor::new([3, 2], [0.4, -0.2].repeat(3)).unwrap();
        let c = condition(&obs, 8, 8).unwrap();
        for k in 1..8 {
            for j in 0..2 {
                assert!(c.coeffs().get2(k, j).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condition_recovers_observation() {
        let mut rng = seeded(4);
        let obs = Tensor::randn([5, 3], 1.0, &mut rng);
        let c = condition(&obs, 9, 9).unwrap();
        let x = from_frequency(&c).unwrap();
        close(&rows(&x, 0, 5), &obs, 1e-10);
    }

    #[test]
    fn inpaint_degenerate_masks() {
        let mut rng = seeded(5);
        let n = 6;
        let yd = FrequencyCoeffs::new(Tensor::randn([n, 2], 1.0, &mut rng), n).unwrap();
        let yo = FrequencyCoeffs::new(Tensor::randn([n, 2], 1.0, &mut rng), n).unwrap();
        let codec = FrequencyCodec::new(n, n).unwrap();
        let all_obs = apply_inpaint(&yd, &yo, &InpaintMask::new(n, 0)).unwrap();
        let expect = codec.encode(&codec.decode(&yo).unwrap()).unwrap();
        close(all_obs.coeffs(), expect.coeffs(), 1e-12);
        let none_obs = apply_inpaint(&yd, &yo, &InpaintMask::new(0, n)).unwrap();
        let expect = codec.encode(&codec.decode(&yd).unwrap()).unwrap();
        close(none_obs.coeffs(), expect.coeffs(), 1e-12);
    }

    #[test]
    fn inpaint_matches_time_domain_splice() {
        let mut rng = seeded(6);
        let (h, f, l) = (2, 2, 4);
        let n = h + f;
        let yd = FrequencyCoeffs::new(Tensor::randn([l, 3], 1.0, &mut rng), n).unwrap();
        let yo = FrequencyCoeffs::new(Tensor::randn([l, 3], 1.0, &mut rng), n).unwrap();
        // Brute force: materialize both signals sample by sample, splice rows,
        // transform back with explicit sums.
        let b = |k: usize, t: usize| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            s * (core::f64::consts::PI * (2 * t + 1) as f64 * k as f64 / (2.0 * n as f64)).cos()
        };
        let signal = |y: &FrequencyCoeffs, t: usize, j: usize| -> f64 {
            (0..l).map(|k| b(k, t) * y.coeffs().get2(k, j)).sum()
        };
        let got = apply_inpaint(&yd, &yo, &InpaintMask::new(h, f)).unwrap();
        for k in 0..l {
            for j in 0..3 {
                let v: f64 = (0..n)
                    .map(|t| {
                        let x = if t < h { signal(&yo, t, j) } else { signal(&yd, t, j) };
                        b(k, t) * x
                    })
                    .sum();
                assert!((got.coeffs().get2(k, j) - v).abs() < 1e-12);
            }
        }
        let op = FrequencyCodec::new(n, l).unwrap().inpaint_operator(h).unwrap();
        let batched = op
            .apply_batch(
                &yd.coeffs().clone().reshape([1, l, 3]).unwrap(),
                &yo.coeffs().clone().reshape([1, l, 3]).unwrap(),
            )
            .unwrap();
        close(&batched.reshape([l, 3]).unwrap(), got.coeffs(), 1e-12);
    }

    #[test]
    fn inpaint_rejects_mask_length() {
        let y = FrequencyCoeffs::new(Tensor::zeros([4, 1]), 4).unwrap();
        assert!(apply_inpaint(&y, &y, &InpaintMask::new(2, 3)).is_err());
    }

    #[test]
    fn inpaint_is_idempotent_at_full_rank() {
        let mut rng = seeded(7);
        let n = 7;
        let yd = FrequencyCoeffs::new(Tensor::randn([n, 3], 1.0, &mut rng), n).unwrap();
        let yo = FrequencyCoeffs::new(Tensor::randn([n, 3], 1.0, &mut rng), n).unwrap();
        let m = InpaintMask::new(3, 4);
        let once = apply_inpaint(&yd, &yo, &m).unwrap();
        let twice = apply_inpaint(&once, &yo, &m).unwrap();
        close(once.coeffs(), twice.coeffs(), 1e-10);
    }
}
