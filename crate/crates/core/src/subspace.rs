//! Dense subspace algebra: orthonormal bases, complement projectors, thin-SVD
//! unions of covariance factors, principal angles, and the rank/overlap
//! bookkeeping used by the protection machinery.
//!
//! Everything here is a pure function over immutable inputs. The ambient
//! dimension `d` is small (tens to a few hundred); no operation materializes
//! a `d x d` matrix except where a test explicitly asks for one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// Relative floor under which a singular value counts as zero when deciding
/// the achievable rank of a concatenation.
const RANK_EPS: f64 = 1e-12;

/// Tolerance for the `U^T U = I` orthonormality invariant.
const ORTHO_TOL: f64 = 1e-10;

/// An orthonormal basis of a k-dimensional subspace of R^d. `k` may be zero,
/// which represents "no protected directions yet".
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    /// Wrap a d x k matrix, checking `U^T U = I_k` within 1e-10.
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        let k = columns.ncols();
        if k > columns.nrows() {
            return Err(CoreError::contract(format!(
                "basis has more columns ({k}) than ambient dimension ({})",
                columns.nrows()
            )));
        }
        let gram = columns.transpose() * &columns;
        let eye = DMatrix::<f64>::identity(k, k);
        let dev = (&gram - &eye).norm();
        if dev > ORTHO_TOL {
            return Err(CoreError::contract(format!(
                "columns are not orthonormal: ||U^T U - I|| = {dev:.3e}"
            )));
        }
        Ok(Self { columns })
    }

    /// The empty basis (k = 0) in ambient dimension `d`.
    pub fn empty(d: usize) -> Self {
        Self {
            columns: DMatrix::zeros(d, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// The projector `U U^T` as a dense matrix. Only diagnostics and tests
    /// should call this; the training path never forms it.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.columns * self.columns.transpose()
    }
}

/// Nonnegative eigenvalue estimates attached to a basis, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for pair in values.windows(2) {
            if pair[1] > pair[0] {
                return Err(CoreError::contract(
                    "spectrum values must be sorted descending",
                ));
            }
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CoreError::contract(
                "spectrum values must be finite and nonnegative",
            ));
        }
        Ok(Self { values })
    }

    pub fn empty() -> Self {
        Self { values: Vec::new() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total retained energy; non-decreasing across unions.
    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// A client-side low-rank factor `L` of a covariance, with `L L^T` the
/// rank-k approximation the client uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactor {
    columns: DMatrix<f64>,
}

impl CovarianceFactor {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::contract(
                "covariance factor has non-finite entries",
            ));
        }
        Ok(Self { columns })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            columns: DMatrix::zeros(d, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank_cols(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// Number of reals in the upload payload (the O(dk) communication claim).
    pub fn payload_len(&self) -> usize {
        self.columns.nrows() * self.columns.ncols()
    }
}

/// A protection basis together with its retained spectrum; the object the
/// server maintains per (layer, expert).
#[derive(Debug, Clone)]
pub struct ProtectionBasis {
    pub basis: OrthonormalBasis,
    pub spectrum: Spectrum,
}

impl ProtectionBasis {
    pub fn empty(d: usize) -> Self {
        Self {
            basis: OrthonormalBasis::empty(d),
            spectrum: Spectrum::empty(),
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }
}

/// Warmup-annealed complement projector `(1 - alpha) I + alpha (I - U U^T)`.
/// `alpha = 0` is the identity; `alpha = 1` the exact complement projector.
#[derive(Debug, Clone)]
pub struct ShrinkageProjector<'a> {
    basis: &'a OrthonormalBasis,
    alpha: f64,
}

impl<'a> ShrinkageProjector<'a> {
    pub fn new(basis: &'a OrthonormalBasis, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::contract(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { basis, alpha })
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        complement_apply(self.basis, v, self.alpha)
    }
}

/// Apply the annealed complement projector to a vector:
/// `(1 - alpha) v + alpha (v - U (U^T v))`.
pub fn complement_apply(
    basis: &OrthonormalBasis,
    v: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    if v.len() != basis.dim() {
        return Err(CoreError::contract(format!(
            "vector dimension {} does not match basis ambient dimension {}",
            v.len(),
            basis.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::contract(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if basis.is_empty() || alpha == 0.0 {
        return Ok(v.clone());
    }
    let coeffs = basis.matrix().transpose() * v;
    Ok(v - basis.matrix() * coeffs * alpha)
}

/// Project a LoRA factor-gradient pair through the annealed complement on
/// both sides: `(gradA . Pi(alpha), Pi(alpha) . gradB)`. At `alpha = 1` both
/// outputs are exactly orthogonal to `range(U)` on the projected side.
pub fn bilateral_project(
    basis: &OrthonormalBasis,
    grad_a: &DMatrix<f64>,
    grad_b: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = basis.dim();
    if grad_a.ncols() != d || grad_b.nrows() != d {
        return Err(CoreError::contract(format!(
            "gradient shapes ({}x{}, {}x{}) do not match ambient dimension {}",
            grad_a.nrows(),
            grad_a.ncols(),
            grad_b.nrows(),
            grad_b.ncols(),
            d
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::contract(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if basis.is_empty() || alpha == 0.0 {
        return Ok((grad_a.clone(), grad_b.clone()));
    }
    let u = basis.matrix();
    // gradA . Pi = gradA - alpha (gradA U) U^T, acting on the input side.
    let a_coeffs = grad_a * u;
    let a_out = grad_a - a_coeffs * u.transpose() * alpha;
    // Pi . gradB = gradB - alpha U (U^T gradB), acting on the output side.
    let b_coeffs = u.transpose() * grad_b;
    let b_out = grad_b - u * b_coeffs * alpha;
    Ok((a_out, b_out))
}

/// Result of a subspace union: the retained basis/spectrum and whether the
/// requested rank exceeded what the inputs could supply.
#[derive(Debug, Clone)]
pub struct UnionOutcome {
    pub basis: OrthonormalBasis,
    pub spectrum: Spectrum,
    /// True when `k_out` exceeded the achievable rank and the output was
    /// truncated to it instead of padded.
    pub rank_deficient: bool,
}

/// Merge a carry-over eigenpair with weighted client covariance factors via
/// one thin SVD of the concatenation
/// `[U Lambda^{1/2}, sqrt(w_1) L_1, ..., sqrt(w_C) L_C]`,
/// returning the top `k_out` directions and their squared singular values.
/// The combined `d x d` covariance is never formed.
pub fn thin_svd_union(
    carry_basis: &OrthonormalBasis,
    carry_spectrum: &Spectrum,
    client_factors: &[(f64, CovarianceFactor)],
    k_out: usize,
) -> Result<UnionOutcome> {
    let d = carry_basis.dim();
    if carry_spectrum.len() != carry_basis.rank() {
        return Err(CoreError::contract(format!(
            "carry spectrum length {} does not match basis rank {}",
            carry_spectrum.len(),
            carry_basis.rank()
        )));
    }
    if k_out > d {
        return Err(CoreError::contract(format!(
            "k_out {k_out} exceeds ambient dimension {d}"
        )));
    }
    let mut weight_sum = 0.0;
    for (w, factor) in client_factors {
        if *w < 0.0 {
            return Err(CoreError::contract(format!("negative client weight {w}")));
        }
        weight_sum += w;
        if factor.dim() != d {
            return Err(CoreError::contract(format!(
                "factor ambient dimension {} does not match {}",
                factor.dim(),
                d
            )));
        }
    }
    if !client_factors.is_empty() && (weight_sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::contract(format!(
            "client weights must sum to 1, got {weight_sum}"
        )));
    }

    let total_cols = carry_basis.rank()
        + client_factors
            .iter()
            .map(|(_, f)| f.rank_cols())
            .sum::<usize>();
    if total_cols == 0 {
        return Ok(UnionOutcome {
            basis: OrthonormalBasis::empty(d),
            spectrum: Spectrum::empty(),
            rank_deficient: k_out > 0,
        });
    }

    let mut concat = DMatrix::<f64>::zeros(d, total_cols);
    let mut col = 0;
    for (j, lambda) in carry_spectrum.values().iter().enumerate() {
        let scaled = carry_basis.matrix().column(j) * lambda.sqrt();
        concat.set_column(col, &scaled);
        col += 1;
    }
    for (w, factor) in client_factors {
        let sw = w.sqrt();
        for j in 0..factor.rank_cols() {
            let scaled = factor.matrix().column(j) * sw;
            concat.set_column(col, &scaled);
            col += 1;
        }
    }

    let svd = concat.svd(true, false);
    let u = svd.u.expect("svd requested with u");
    let sigma = svd.singular_values;

    let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let achievable = if sigma_max == 0.0 {
        0
    } else {
        sigma.iter().filter(|s| **s > RANK_EPS * sigma_max).count()
    };
    let kept = k_out.min(achievable);

    let basis = OrthonormalBasis::new(u.columns(0, kept).into_owned())?;
    let spectrum = Spectrum::new(sigma.iter().take(kept).map(|s| s * s).collect())?;
    Ok(UnionOutcome {
        basis,
        spectrum,
        rank_deficient: kept < k_out,
    })
}

/// Principal angles between two subspaces, ascending, in [0, pi/2].
pub fn principal_angles(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(CoreError::contract(format!(
            "ambient dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::contract("principal angles need nonempty bases"));
    }
    let cross = a.matrix().transpose() * b.matrix();
    let svd = cross.svd(false, false);
    // Singular values come out descending, so the arccos sequence is already
    // ascending. Floating point can push sigma past 1 by ~1e-15; clamp.
    Ok(svd
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos())
        .collect())
}

/// Subspace overlap `tr(P_a P_b) / k = ||a^T b||_F^2 / k` for equal-rank
/// subspaces; 1 for identical, 0 for orthogonal.
pub fn subspace_overlap(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::contract(format!(
            "ambient dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.rank() != b.rank() || a.rank() == 0 {
        return Err(CoreError::contract(format!(
            "overlap needs equal nonzero ranks, got {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let cross = a.matrix().transpose() * b.matrix();
    Ok(cross.norm_squared() / a.rank() as f64)
}

/// Lower bound on the overlap of two rank-k subspaces confined to an
/// r_o-dimensional manifold: `max(0, 2 - r_o / k)`.
pub fn entanglement_bound(r_o: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(CoreError::contract("k must be positive"));
    }
    if k > r_o {
        return Err(CoreError::contract(format!(
            "k = {k} exceeds manifold rank r_o = {r_o}"
        )));
    }
    Ok((2.0 - r_o as f64 / k as f64).max(0.0))
}

/// Rank and codimension of the bilateral projector on the d^2-dimensional
/// update space: `rank = (d - k)^2`, `codim = 2dk - k^2`.
pub fn bilateral_rank_counts(d: usize, k: usize) -> Result<(usize, usize)> {
    if k > d {
        return Err(CoreError::contract(format!("k = {k} exceeds d = {d}")));
    }
    let rank = (d - k) * (d - k);
    let codim = 2 * d * k - k * k;
    debug_assert_eq!(rank + codim, d * d);
    Ok((rank, codim))
}

/// Effective rank of a sample matrix: the number of singular values whose
/// square exceeds `ratio_cutoff` times the largest squared singular value.
pub fn effective_rank(covariance_samples: &DMatrix<f64>, ratio_cutoff: f64) -> Result<usize> {
    if covariance_samples.ncols() == 0 {
        return Err(CoreError::contract(
            "effective_rank needs at least one sample",
        ));
    }
    if ratio_cutoff <= 0.0 || ratio_cutoff >= 1.0 {
        return Err(CoreError::contract(format!(
            "ratio_cutoff must lie in (0, 1), got {ratio_cutoff}"
        )));
    }
    let svd = covariance_samples.clone().svd(false, false);
    let max_sq = svd
        .singular_values
        .iter()
        .map(|s| s * s)
        .fold(0.0_f64, f64::max);
    if max_sq == 0.0 {
        return Ok(0);
    }
    Ok(svd
        .singular_values
        .iter()
        .filter(|s| *s * *s > ratio_cutoff * max_sq)
        .count())
}

/// Draw a uniformly random k-frame in R^d via QR of a Gaussian matrix.
pub fn random_orthonormal<R: Rng>(d: usize, k: usize, rng: &mut R) -> OrthonormalBasis {
    assert!(k <= d, "cannot draw {k} orthonormal columns in dimension {d}");
    if k == 0 {
        return OrthonormalBasis::empty(d);
    }
    let gauss = DMatrix::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    OrthonormalBasis::new(qr.q().columns(0, k).into_owned())
        .expect("QR factor columns are orthonormal")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    fn basis_from_cols(cols: &[DVector<f64>]) -> OrthonormalBasis {
        let d = cols[0].len();
        let mut m = DMatrix::zeros(d, cols.len());
        for (j, c) in cols.iter().enumerate() {
            m.set_column(j, c);
        }
        OrthonormalBasis::new(m).unwrap()
    }

    #[test]
    fn complement_apply_basic_cases() {
        let basis = basis_from_cols(&[e(3, 0)]);
        // v in the protected span vanishes at alpha = 1.
        let out = complement_apply(&basis, &e(3, 0), 1.0).unwrap();
        assert!(out.norm() <= 1e-15);
        // v orthogonal to the span passes through.
        let out = complement_apply(&basis, &e(3, 1), 1.0).unwrap();
        assert!((out - e(3, 1)).norm() <= 1e-15);
        // alpha = 0.5 interpolates linearly.
        let out = complement_apply(&basis, &e(3, 0), 0.5).unwrap();
        assert!((out - e(3, 0) * 0.5).norm() <= 1e-15);
    }

    #[test]
    fn complement_apply_rejects_bad_inputs() {
        let basis = basis_from_cols(&[e(3, 0)]);
        assert!(complement_apply(&basis, &e(4, 0), 1.0).is_err());
        assert!(complement_apply(&basis, &e(3, 0), 1.5).is_err());
    }

    #[test]
    fn shrinkage_projector_endpoints() {
        let basis = basis_from_cols(&[e(3, 0)]);
        let ident = ShrinkageProjector::new(&basis, 0.0).unwrap();
        let v = e(3, 0) * 2.0 + e(3, 2);
        assert!((ident.apply(&v).unwrap() - &v).norm() <= 1e-15);
        let full = ShrinkageProjector::new(&basis, 1.0).unwrap();
        let once = full.apply(&v).unwrap();
        let twice = full.apply(&once).unwrap();
        assert!((twice - once).norm() <= 1e-10);
        assert!(ShrinkageProjector::new(&basis, -0.1).is_err());
    }

    #[test]
    fn bilateral_project_basic_cases() {
        let basis = basis_from_cols(&[e(3, 0)]);
        // gradA = e1^T lies in the protected row space and is annihilated.
        let grad_a = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let grad_b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let (a_out, b_out) = bilateral_project(&basis, &grad_a, &grad_b, 1.0).unwrap();
        assert!(a_out.norm() <= 1e-15);
        // gradB = e2 is orthogonal to the span and passes through unchanged.
        assert!((b_out - DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0])).norm() <= 1e-15);
    }

    #[test]
    fn bilateral_project_outputs_orthogonal_to_basis() {
        let mut rng = stream_rng(11, Stream::Oracle { trial: 0 });
        let (d, r, k) = (8, 2, 3);
        let basis = random_orthonormal(d, k, &mut rng);
        let grad_a = DMatrix::from_fn(r, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let grad_b = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (a_out, b_out) = bilateral_project(&basis, &grad_a, &grad_b, 1.0).unwrap();
        assert!((&a_out * basis.matrix()).norm() <= 1e-12);
        assert!((basis.matrix().transpose() * &b_out).norm() <= 1e-12);
    }

    #[test]
    fn union_of_orthogonal_columns() {
        // Factor with orthogonal columns 2 e1 and 3 e2: spectrum (9, 4).
        let d = 4;
        let mut cols = DMatrix::zeros(d, 2);
        cols.set_column(0, &(e(d, 0) * 2.0));
        cols.set_column(1, &(e(d, 1) * 3.0));
        let factor = CovarianceFactor::new(cols).unwrap();
        let out = thin_svd_union(
            &OrthonormalBasis::empty(d),
            &Spectrum::empty(),
            &[(1.0, factor)],
            2,
        )
        .unwrap();
        assert!(!out.rank_deficient);
        let values = out.spectrum.values();
        assert!((values[0] - 9.0).abs() <= 1e-10);
        assert!((values[1] - 4.0).abs() <= 1e-10);
        // Leading direction is e2 (the larger column), then e1.
        assert!(out.basis.matrix().column(0)[1].abs() > 0.999);
        assert!(out.basis.matrix().column(1)[0].abs() > 0.999);
    }

    #[test]
    fn union_disjoint_carry_and_factor() {
        let d = 4;
        let carry = basis_from_cols(&[e(d, 0)]);
        let spectrum = Spectrum::new(vec![4.0]).unwrap();
        let factor =
            CovarianceFactor::new(DMatrix::from_fn(d, 1, |i, _| if i == 1 { 2.0 } else { 0.0 }))
                .unwrap();
        let out = thin_svd_union(&carry, &spectrum, &[(1.0, factor)], 2).unwrap();
        let values = out.spectrum.values();
        assert!((values[0] - 4.0).abs() <= 1e-10);
        assert!((values[1] - 4.0).abs() <= 1e-10);
        // Spans {e1, e2}.
        let target = basis_from_cols(&[e(d, 0), e(d, 1)]);
        let overlap = subspace_overlap(&out.basis, &target).unwrap();
        assert!((overlap - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn union_requesting_more_than_rank_flags_deficit() {
        let d = 5;
        let factor =
            CovarianceFactor::new(DMatrix::from_fn(d, 1, |i, _| if i == 0 { 3.0 } else { 0.0 }))
                .unwrap();
        let out = thin_svd_union(
            &OrthonormalBasis::empty(d),
            &Spectrum::empty(),
            &[(1.0, factor)],
            3,
        )
        .unwrap();
        assert!(out.rank_deficient);
        assert_eq!(out.basis.rank(), 1);
        assert_eq!(out.spectrum.len(), 1);
    }

    #[test]
    fn union_empty_inputs_stay_empty() {
        let out = thin_svd_union(&OrthonormalBasis::empty(6), &Spectrum::empty(), &[], 3).unwrap();
        assert!(out.basis.is_empty());
        assert!(out.rank_deficient);
    }

    /// Materialize M = U Lambda U^T + sum_c w_c L_c L_c^T and compare the
    /// thin-SVD route against a dense eigendecomposition.
    fn materialized_eigen_check(seed: u64, d: usize, n_clients: usize, k: usize) {
        let mut rng = stream_rng(seed, Stream::Oracle { trial: seed });
        let carry = random_orthonormal(d, k, &mut rng);
        let lambda: Vec<f64> = (0..k).map(|i| 2.0_f64.powi(3 - i as i32)).collect();
        let spectrum = Spectrum::new(lambda.clone()).unwrap();

        let raw: Vec<f64> = (0..n_clients).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

        let mut factors = Vec::new();
        for w in &weights {
            // Gap-separated column scales keep the top-k eigenvalues well
            // separated so the subspace comparison is well posed.
            let cols = DMatrix::from_fn(d, k, |_, j| {
                rng.sample::<f64, _>(StandardNormal) * 3.0_f64.powi(-(j as i32))
            });
            factors.push((*w, CovarianceFactor::new(cols).unwrap()));
        }

        let out = thin_svd_union(&carry, &spectrum, &factors, k).unwrap();

        let mut m = DMatrix::<f64>::zeros(d, d);
        for (j, l) in lambda.iter().enumerate() {
            let u = carry.matrix().column(j);
            m += u * u.transpose() * *l;
        }
        for (w, f) in &factors {
            m += f.matrix() * f.matrix().transpose() * *w;
        }
        let eig = m.symmetric_eigen();
        let mut pairs: Vec<(f64, DVector<f64>)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(l, v)| (*l, v.into_owned()))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        for (i, value) in out.spectrum.values().iter().enumerate() {
            let oracle = pairs[i].0;
            assert!(
                (value - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12),
                "eigenvalue {i}: thin {value} vs oracle {oracle}"
            );
        }
        // Relative gap at the truncation edge; the subspace comparison is
        // only meaningful when it is resolved.
        let gap = (pairs[k - 1].0 - pairs[k].0) / pairs[0].0;
        assert!(
            gap > 1e-3,
            "test construction must keep a spectral gap, got {gap}"
        );

        let mut oracle_cols = DMatrix::zeros(d, k);
        for j in 0..k {
            oracle_cols.set_column(j, &pairs[j].1);
        }
        let oracle_basis = OrthonormalBasis::new(oracle_cols).unwrap();
        let dist = (out.basis.projector() - oracle_basis.projector()).norm();
        assert!(dist <= 1e-6, "projector distance {dist}");
    }

    #[test]
    fn union_matches_materialized_eigendecomposition() {
        materialized_eigen_check(3, 16, 3, 4);
        materialized_eigen_check(4, 24, 2, 3);
        materialized_eigen_check(5, 64, 3, 5);
    }

    #[test]
    fn principal_angles_basic_cases() {
        let a = basis_from_cols(&[e(3, 0), e(3, 1)]);
        let angles = principal_angles(&a, &a).unwrap();
        assert!(angles.iter().all(|t| t.abs() <= 1e-7));

        let b = basis_from_cols(&[e(3, 1)]);
        let a1 = basis_from_cols(&[e(3, 0)]);
        let angles = principal_angles(&a1, &b).unwrap();
        assert_eq!(angles.len(), 1);
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() <= 1e-12);

        let diag = basis_from_cols(&[(e(3, 0) + e(3, 1)) / 2.0_f64.sqrt()]);
        let angles = principal_angles(&a1, &diag).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_4).abs() <= 1e-12);
    }

    #[test]
    fn principal_angles_rejects_empty() {
        let a = basis_from_cols(&[e(3, 0)]);
        assert!(principal_angles(&a, &OrthonormalBasis::empty(3)).is_err());
    }

    #[test]
    fn overlap_basic_cases() {
        let a = basis_from_cols(&[e(3, 0)]);
        let b = basis_from_cols(&[e(3, 1)]);
        assert!((subspace_overlap(&a, &a).unwrap() - 1.0).abs() <= 1e-15);
        assert!(subspace_overlap(&a, &b).unwrap().abs() <= 1e-15);
        let diag = basis_from_cols(&[(e(3, 0) + e(3, 1)) / 2.0_f64.sqrt()]);
        assert!((subspace_overlap(&a, &diag).unwrap() - 0.5).abs() <= 1e-12);
        // Unequal ranks rejected.
        let ab = basis_from_cols(&[e(3, 0), e(3, 1)]);
        assert!(subspace_overlap(&a, &ab).is_err());
    }

    #[test]
    fn entanglement_bound_values() {
        assert!((entanglement_bound(8, 6).unwrap() - (2.0 - 8.0 / 6.0)).abs() <= 1e-15);
        assert_eq!(entanglement_bound(8, 4).unwrap(), 0.0);
        assert_eq!(entanglement_bound(8, 3).unwrap(), 0.0);
        assert_eq!(entanglement_bound(5, 5).unwrap(), 1.0);
        assert!(entanglement_bound(8, 0).is_err());
    }

    #[test]
    fn bilateral_rank_counts_values() {
        assert_eq!(bilateral_rank_counts(4, 1).unwrap(), (9, 7));
        assert_eq!(bilateral_rank_counts(6, 0).unwrap(), (36, 0));
        assert_eq!(bilateral_rank_counts(6, 6).unwrap(), (0, 36));
        assert!(bilateral_rank_counts(4, 5).is_err());
    }

    #[test]
    fn effective_rank_examples() {
        let d = 5;
        // Rank-1 samples.
        let m = DMatrix::from_fn(d, 8, |i, j| if i == 0 { (j + 1) as f64 } else { 0.0 });
        assert_eq!(effective_rank(&m, 1e-3).unwrap(), 1);
        // Identity-like: equal singular values.
        let eye = DMatrix::<f64>::identity(d, d);
        assert_eq!(effective_rank(&eye, 1e-3).unwrap(), 5);
        // Constructed spectrum straddling the cutoff: squares (100, 1, 8.1e-5),
        // cutoff on squares at 1e-3 of 100 = 0.1 keeps two of three.
        let mut diag = DMatrix::<f64>::zeros(3, 3);
        diag[(0, 0)] = 10.0;
        diag[(1, 1)] = 1.0;
        diag[(2, 2)] = 0.009;
        assert_eq!(effective_rank(&diag, 1e-3).unwrap(), 2);
        // Zero matrix.
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(effective_rank(&z, 1e-3).unwrap(), 0);
    }

    #[test]
    fn prop2_bound_holds_for_sampled_pairs() {
        let (d, r_o, k) = (16, 6, 4);
        let bound = entanglement_bound(r_o, k).unwrap();
        let mut rng = stream_rng(17, Stream::Oracle { trial: 2 });
        let manifold = random_orthonormal(d, r_o, &mut rng);
        for _ in 0..200 {
            let w1 = random_orthonormal(r_o, k, &mut rng);
            let w2 = random_orthonormal(r_o, k, &mut rng);
            let v1 = OrthonormalBasis::new(manifold.matrix() * w1.matrix()).unwrap();
            let v2 = OrthonormalBasis::new(manifold.matrix() * w2.matrix()).unwrap();
            let overlap = subspace_overlap(&v1, &v2).unwrap();
            assert!(
                overlap >= bound - 1e-9,
                "overlap {overlap} fell below bound {bound}"
            );
        }
    }

    /// The d^2 x d^2 Kronecker projector is materialized here and only here.
    #[test]
    fn kronecker_projector_unit_eigenvalue_count() {
        let mut rng = stream_rng(23, Stream::Oracle { trial: 3 });
        for d in [2usize, 5, 8] {
            for k in 0..=d {
                let basis = random_orthonormal(d, k, &mut rng);
                let pi = DMatrix::<f64>::identity(d, d) - basis.projector();
                let mut kron = DMatrix::<f64>::zeros(d * d, d * d);
                for i in 0..d {
                    for j in 0..d {
                        for p in 0..d {
                            for q in 0..d {
                                kron[(i * d + p, j * d + q)] = pi[(i, j)] * pi[(p, q)];
                            }
                        }
                    }
                }
                let eig = kron.symmetric_eigen();
                let units = eig
                    .eigenvalues
                    .iter()
                    .filter(|l| (**l - 1.0).abs() < 1e-6)
                    .count();
                assert_eq!(units, (d - k) * (d - k), "d={d}, k={k}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn complement_is_idempotent_at_full_alpha(
            seed in 0u64..1_000_000,
            d in 2usize..12,
            kf in 0.0f64..1.0,
        ) {
            let mut rng = stream_rng(seed, Stream::Oracle { trial: 4 });
            let k = ((d as f64 * kf) as usize).min(d - 1);
            let basis = random_orthonormal(d, k, &mut rng);
            let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let once = complement_apply(&basis, &v, 1.0).unwrap();
            let twice = complement_apply(&basis, &once, 1.0).unwrap();
            prop_assert!((twice - &once).norm() <= 1e-10);
        }

        #[test]
        fn union_output_is_orthonormal(
            seed in 0u64..1_000_000,
            d in 2usize..20,
            c in 1usize..4,
        ) {
            let mut rng = stream_rng(seed, Stream::Oracle { trial: 5 });
            let k = 1 + (seed as usize % d.min(4));
            let carry_k = seed as usize % (k + 1).min(d);
            let carry = random_orthonormal(d, carry_k, &mut rng);
            let lambda: Vec<f64> = (0..carry_k).map(|i| (carry_k - i) as f64).collect();
            let spectrum = Spectrum::new(lambda).unwrap();
            let w = 1.0 / c as f64;
            // Deliberately ill-conditioned factors: wide column-scale spread.
            let factors: Vec<(f64, CovarianceFactor)> = (0..c)
                .map(|_| {
                    let cols = DMatrix::from_fn(d, k, |_, j| {
                        rng.sample::<f64, _>(StandardNormal) * 10.0_f64.powi(-(2 * j as i32))
                    });
                    (w, CovarianceFactor::new(cols).unwrap())
                })
                .collect();
            let out = thin_svd_union(&carry, &spectrum, &factors, k.min(d)).unwrap();
            let gram = out.basis.matrix().transpose() * out.basis.matrix();
            let eye = DMatrix::<f64>::identity(out.basis.rank(), out.basis.rank());
            prop_assert!((gram - eye).norm() <= 1e-10);
        }

        #[test]
        fn overlap_equals_mean_squared_cosines(seed in 0u64..1_000_000, d in 3usize..16) {
            let mut rng = stream_rng(seed, Stream::Oracle { trial: 6 });
            let k = 1 + (seed as usize % (d - 1)).min(3);
            let a = random_orthonormal(d, k, &mut rng);
            let b = random_orthonormal(d, k, &mut rng);
            let overlap = subspace_overlap(&a, &b).unwrap();
            let angles = principal_angles(&a, &b).unwrap();
            let mean_cos2: f64 =
                angles.iter().map(|t| t.cos() * t.cos()).sum::<f64>() / angles.len() as f64;
            prop_assert!((overlap - mean_cos2).abs() <= 1e-12);
        }
    }
}
