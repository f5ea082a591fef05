//! Spatially correlated Gaussian scalar fields and the tensor-valued
//! conductivity field K = QᵀΛQ assembled from eight independent scalar fields.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector2, Vector3};
use num_complex::Complex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::dfn::{rotation_from_z, Box3};
use crate::error::{Error, Result};

/// Regular grid of cubic voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Point3<f64>,
    /// Voxel edge length [m].
    pub cell: f64,
    /// Voxel counts (nx, ny, nz).
    pub dims: (usize, usize, usize),
}

impl GridSpec {
    pub fn new(origin: Point3<f64>, cell: f64, dims: (usize, usize, usize)) -> Result<Self> {
        if cell <= 0.0 {
            return Err(Error::parameter("cell size must be positive"));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::parameter("grid dims must be >= 1"));
        }
        Ok(Self { origin, cell, dims })
    }

    /// Cubic grid covering `domain` with `n` voxels per axis. The domain must
    /// be a cube; the cell size is derived from its side length.
    pub fn covering(domain: &Box3, n: usize) -> Result<Self> {
        let ext = domain.extent();
        if (ext.x - ext.y).abs() > 1e-9 * ext.x || (ext.x - ext.z).abs() > 1e-9 * ext.x {
            return Err(Error::parameter("covering grid requires a cubic domain"));
        }
        Self::new(domain.lo, ext.x / n as f64, (n, n, n))
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Linear index, x-fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims.1 + j) * self.dims.0 + i
    }

    /// Voxel center coordinates.
    pub fn center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.origin
            + Vector3::new(
                (i as f64 + 0.5) * self.cell,
                (j as f64 + 0.5) * self.cell,
                (k as f64 + 0.5) * self.cell,
            )
    }

    /// Bounding box of voxel (i, j, k).
    pub fn voxel_box(&self, i: usize, j: usize, k: usize) -> Box3 {
        let lo = self.origin
            + Vector3::new(i as f64 * self.cell, j as f64 * self.cell, k as f64 * self.cell);
        Box3 {
            lo,
            hi: lo + Vector3::new(self.cell, self.cell, self.cell),
        }
    }

    pub fn extent_box(&self) -> Box3 {
        Box3 {
            lo: self.origin,
            hi: self.origin
                + Vector3::new(
                    self.dims.0 as f64 * self.cell,
                    self.dims.1 as f64 * self.cell,
                    self.dims.2 as f64 * self.cell,
                ),
        }
    }
}

/// Gaussian correlation model ρ(r) = exp(−(r/λ)²); λ = 0 means uncorrelated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    pub corr_len: f64,
}

impl CovarianceSpec {
    pub fn new(corr_len: f64) -> Result<Self> {
        if corr_len < 0.0 {
            return Err(Error::parameter("correlation length must be >= 0"));
        }
        Ok(Self { corr_len })
    }

    pub fn correlation(&self, r: f64) -> f64 {
        if self.corr_len == 0.0 {
            if r == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-(r / self.corr_len).powi(2)).exp()
        }
    }
}

/// Log-scale mean vector and covariance of the principal conductivities.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFieldParams {
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
}

impl TensorFieldParams {
    /// Square root of Σ: lower Cholesky factor, with a symmetric-eigenvalue
    /// fallback for semi-definite matrices.
    pub fn sigma_sqrt(&self) -> Result<Matrix3<f64>> {
        if (self.sigma - self.sigma.transpose()).norm() > 1e-12 * (1.0 + self.sigma.norm()) {
            return Err(Error::parameter("sigma must be symmetric"));
        }
        if let Some(chol) = nalgebra::Cholesky::new(self.sigma) {
            return Ok(chol.l());
        }
        let eig = nalgebra::SymmetricEigen::new(self.sigma);
        let floor = -1e-12 * (1.0 + eig.eigenvalues.amax());
        if eig.eigenvalues.min() < floor {
            return Err(Error::parameter("sigma must be positive semi-definite"));
        }
        let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        Ok(eig.eigenvectors * d)
    }
}

/// Scalar field on a regular grid, x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

/// Field of symmetric 3×3 tensors stored as 6 Voigt channels
/// (k_xx, k_yy, k_zz, k_yz, k_xz, k_xy).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    pub grid: GridSpec,
    pub channels: [Vec<f64>; 6],
}

impl TensorGrid {
    pub fn constant(grid: GridSpec, voigt: [f64; 6]) -> Self {
        let n = grid.n_voxels();
        Self {
            grid,
            channels: voigt.map(|v| vec![v; n]),
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, [0.0; 6])
    }

    #[inline]
    pub fn voigt_at(&self, idx: usize) -> [f64; 6] {
        [
            self.channels[0][idx],
            self.channels[1][idx],
            self.channels[2][idx],
            self.channels[3][idx],
            self.channels[4][idx],
            self.channels[5][idx],
        ]
    }

    #[inline]
    pub fn set_voigt(&mut self, idx: usize, v: [f64; 6]) {
        for c in 0..6 {
            self.channels[c][idx] = v[c];
        }
    }

    /// Full 3×3 tensor at a voxel.
    #[inline]
    pub fn tensor_at(&self, idx: usize) -> Matrix3<f64> {
        voigt_to_matrix(&self.voigt_at(idx))
    }

    /// Verify SPD at every voxel via Cholesky.
    pub fn check_spd(&self) -> Result<()> {
        for idx in 0..self.grid.n_voxels() {
            if nalgebra::Cholesky::new(self.tensor_at(idx)).is_none() {
                return Err(Error::data(format!("voxel {idx} tensor is not SPD")));
            }
        }
        Ok(())
    }
}

/// Symmetric matrix from Voigt order (k_xx, k_yy, k_zz, k_yz, k_xz, k_xy).
pub fn voigt_to_matrix(v: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[5], v[4], v[5], v[1], v[3], v[4], v[3], v[2])
}

/// Voigt vector from a symmetric matrix.
pub fn matrix_to_voigt(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(1, 1)],
        m[(2, 2)],
        0.5 * (m[(1, 2)] + m[(2, 1)]),
        0.5 * (m[(0, 2)] + m[(2, 0)]),
        0.5 * (m[(0, 1)] + m[(1, 0)]),
    ]
}

fn next_fft_len(n: usize) -> usize {
    n.next_power_of_two()
}

/// 3D in-place FFT over an x-fastest array by successive 1D passes.
fn fft3d(data: &mut [Complex<f64>], dims: (usize, usize, usize), inverse: bool) {
    let (nx, ny, nz) = dims;
    let mut planner = FftPlanner::new();
    let make = |planner: &mut FftPlanner<f64>, n: usize| {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    };
    // x lines are contiguous.
    let fx = make(&mut planner, nx);
    for line in data.chunks_exact_mut(nx) {
        fx.process(line);
    }
    // y passes.
    let fy = make(&mut planner, ny);
    let mut scratch = vec![Complex::default(); ny.max(nz)];
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                scratch[j] = data[(k * ny + j) * nx + i];
            }
            fy.process(&mut scratch[..ny]);
            for j in 0..ny {
                data[(k * ny + j) * nx + i] = scratch[j];
            }
        }
    }
    // z passes.
    let fz = make(&mut planner, nz);
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                scratch[k] = data[(k * ny + j) * nx + i];
            }
            fz.process(&mut scratch[..nz]);
            for k in 0..nz {
                data[(k * ny + j) * nx + i] = scratch[k];
            }
        }
    }
}

/// Sample a zero-mean, unit-variance Gaussian field with correlation
/// ρ(r) = exp(−(r/λ)²) via circulant embedding on a periodically extended
/// grid (extension ≥ 3λ per axis). λ = 0 yields i.i.d. standard normals.
pub fn sample_gaussian_field(
    rng: &mut impl Rng,
    grid: &GridSpec,
    cov: &CovarianceSpec,
) -> Result<ScalarField> {
    let n = grid.n_voxels();
    if cov.corr_len == 0.0 {
        let values = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        return Ok(ScalarField { grid: *grid, values });
    }

    // The Gaussian covariance needs generous periodic extension before its
    // circulant spectrum turns non-negative; start at 3λ per axis and double
    // until the embedding is valid.
    let mut pad = (3.0 * cov.corr_len / grid.cell).ceil() as usize;
    let mut ext;
    let mut weights;
    let mut attempt = 0;
    loop {
        ext = (
            next_fft_len(grid.dims.0 + pad),
            next_fft_len(grid.dims.1 + pad),
            next_fft_len(grid.dims.2 + pad),
        );
        let (mx, my, mz) = ext;
        let m = mx * my * mz;

        // Covariance kernel on the torus.
        let mut spectrum = vec![Complex::new(0.0, 0.0); m];
        for k in 0..mz {
            let dz = k.min(mz - k) as f64 * grid.cell;
            for j in 0..my {
                let dy = j.min(my - j) as f64 * grid.cell;
                for i in 0..mx {
                    let dx = i.min(mx - i) as f64 * grid.cell;
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    spectrum[(k * my + j) * mx + i] = Complex::new(cov.correlation(r), 0.0);
                }
            }
        }
        fft3d(&mut spectrum, ext, false);

        let max_eig = spectrum.iter().fold(0.0f64, |a, c| a.max(c.re));
        let min_eig = spectrum.iter().fold(0.0f64, |a, c| a.min(c.re));
        if min_eig < -1e-10 * max_eig.max(1.0) {
            if attempt >= 4 {
                return Err(Error::internal(format!(
                    "circulant embedding spectrum not PSD (min eigenvalue {min_eig:.3e}) \
                     even after extending the periodic grid to {ext:?}"
                )));
            }
            pad = (pad * 2).max(pad + 1);
            attempt += 1;
            continue;
        }
        weights = Vec::with_capacity(m);
        for c in &spectrum {
            weights.push(c.re.max(0.0).sqrt());
        }
        break;
    }
    let (mx, my, _) = ext;
    let m = mx * my * ext.2;

    // Complex white noise shaped by the spectrum square root; the real part of
    // the back transform carries the target covariance.
    let mut noise: Vec<Complex<f64>> = (0..m)
        .map(|idx| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(a, b) * weights[idx]
        })
        .collect();
    fft3d(&mut noise, ext, true);

    let scale = 1.0 / (m as f64).sqrt();
    let mut values = vec![0.0; n];
    for k in 0..grid.dims.2 {
        for j in 0..grid.dims.1 {
            for i in 0..grid.dims.0 {
                values[grid.index(i, j, k)] = noise[(k * my + j) * mx + i].re * scale;
            }
        }
    }
    Ok(ScalarField { grid: *grid, values })
}

/// Rotation Q = Q_N·Q_R from raw normal and azimuth samples: Q_R rotates about
/// z by atan2(R_y, R_x), Q_N is the minimal rotation taking ẑ to N.
pub fn build_rotation(n_raw: &Vector3<f64>, r_raw: &Vector2<f64>) -> Result<Rotation3<f64>> {
    if n_raw.norm() == 0.0 || r_raw.norm() == 0.0 {
        return Err(Error::parameter("rotation inputs must be nonzero"));
    }
    let n = Unit::new_normalize(*n_raw);
    let phi = r_raw.y.atan2(r_raw.x);
    let q_r = Rotation3::from_axis_angle(&Vector3::z_axis(), phi);
    let q_n = rotation_from_z(&n);
    Ok(q_n * q_r)
}

/// Sample the tensor conductivity field K = QᵀΛQ from eight independent
/// correlated scalar fields. Fields draw from RNG substreams of `seed`, so the
/// result is reproducible and independent of evaluation order.
pub fn sample_conductivity_tensor_field(
    seed: u64,
    grid: &GridSpec,
    cov: &CovarianceSpec,
    params: &TensorFieldParams,
) -> Result<TensorGrid> {
    let l = params.sigma_sqrt()?;
    let mut fields = Vec::with_capacity(8);
    for stream in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream + 101);
        fields.push(sample_gaussian_field(&mut rng, grid, cov)?);
    }
    let (rx, ry) = (&fields[0], &fields[1]);
    let (nx, ny, nz) = (&fields[2], &fields[3], &fields[4]);
    let (kx, ky, kz) = (&fields[5], &fields[6], &fields[7]);

    let mut out = TensorGrid::zeros(*grid);
    for idx in 0..grid.n_voxels() {
        let n_raw = Vector3::new(nx.values[idx], ny.values[idx], nz.values[idx]);
        let r_raw = Vector2::new(rx.values[idx], ry.values[idx]);
        // Degenerate draws (all-zero vectors) cannot occur with continuous
        // marginals; guard anyway.
        let q = build_rotation(
            &(if n_raw.norm() > 0.0 { n_raw } else { Vector3::z() }),
            &(if r_raw.norm() > 0.0 { r_raw } else { Vector2::x() }),
        )?;
        let k_tilde = Vector3::new(kx.values[idx], ky.values[idx], kz.values[idx]);
        let log_k = params.mu + l * k_tilde;
        let lambda = Matrix3::from_diagonal(&log_k.map(f64::exp));
        let qm = q.matrix();
        let k = qm.transpose() * lambda * qm;
        out.set_voigt(idx, matrix_to_voigt(&k));
    }
    Ok(out)
}

/// Restrict a tensor field to a voxel-aligned sub-box.
pub fn restrict_field(field: &TensorGrid, sub: &Box3) -> Result<TensorGrid> {
    let g = &field.grid;
    let rel_lo = (sub.lo - g.origin) / g.cell;
    let rel_hi = (sub.hi - g.origin) / g.cell;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for (axis, (&l, &h)) in [rel_lo.x, rel_lo.y, rel_lo.z]
        .iter()
        .zip([rel_hi.x, rel_hi.y, rel_hi.z].iter())
        .enumerate()
    {
        let li = l.round();
        let hi_f = h.round();
        if (l - li).abs() > 1e-9 || (h - hi_f).abs() > 1e-9 {
            return Err(Error::parameter("restriction box not voxel-aligned"));
        }
        let dims = [g.dims.0, g.dims.1, g.dims.2][axis];
        if li < 0.0 || hi_f > dims as f64 || hi_f <= li {
            return Err(Error::parameter("restriction box outside field extent"));
        }
        lo[axis] = li as usize;
        hi[axis] = hi_f as usize;
    }
    let dims = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
    let origin = g.origin
        + Vector3::new(
            lo[0] as f64 * g.cell,
            lo[1] as f64 * g.cell,
            lo[2] as f64 * g.cell,
        );
    let out_grid = GridSpec::new(origin, g.cell, dims)?;
    let mut out = TensorGrid::zeros(out_grid);
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            for i in 0..dims.0 {
                let src = g.index(i + lo[0], j + lo[1], k + lo[2]);
                let dst = out_grid.index(i, j, k);
                out.set_voigt(dst, field.voigt_at(src));
            }
        }
    }
    Ok(out)
}

const FORMAT_VERSION: u32 = 1;

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], grid: &GridSpec) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in [grid.dims.0, grid.dims.1, grid.dims.2] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in [grid.origin.x, grid.origin.y, grid.origin.z, grid.cell] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<GridSpec> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            m, magic
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut b8 = [0u8; 8];
    let mut vals = [0.0f64; 4];
    for v in &mut vals {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    GridSpec::new(
        Point3::new(vals[0], vals[1], vals[2]),
        vals[3],
        (dims[0], dims[1], dims[2]),
    )
}

fn write_channel<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_channel<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write a tensor grid in the TGRD binary format (f32 channel payload).
pub fn write_tensor_grid<W: Write>(mut w: W, field: &TensorGrid) -> Result<()> {
    write_header(&mut w, b"TGRD", &field.grid)?;
    for c in &field.channels {
        write_channel(&mut w, c)?;
    }
    Ok(())
}

pub fn read_tensor_grid<R: Read>(mut r: R) -> Result<TensorGrid> {
    let grid = read_header(&mut r, b"TGRD")?;
    let n = grid.n_voxels();
    let mut channels: [Vec<f64>; 6] = Default::default();
    for c in &mut channels {
        *c = read_channel(&mut r, n)?;
    }
    Ok(TensorGrid { grid, channels })
}

/// Write a scalar field in the SFLD binary format.
pub fn write_scalar_field<W: Write>(mut w: W, field: &ScalarField) -> Result<()> {
    write_header(&mut w, b"SFLD", &field.grid)?;
    write_channel(&mut w, &field.values)
}

pub fn read_scalar_field<R: Read>(mut r: R) -> Result<ScalarField> {
    let grid = read_header(&mut r, b"SFLD")?;
    let n = grid.n_voxels();
    Ok(ScalarField {
        grid,
        values: read_channel(&mut r, n)?,
    })
}
