//! Stochastic discrete fracture network generation.
//!
//! Fractures are square planar objects with power-law sizes, Fisher-distributed
//! orientations, Poisson placement, and aperture-derived conductivities.

use std::io::{BufRead, BufWriter, Write};

use nalgebra::{Point3, Unit, UnitVector3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Physical constants entering the cubic law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Gravitational acceleration [m/s²].
    pub g: f64,
    /// Water density [kg/m³].
    pub rho_w: f64,
    /// Dynamic viscosity [Pa·s].
    pub mu: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            g: 9.81,
            rho_w: 1000.0,
            mu: 1e-3,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        if self.g <= 0.0 || self.rho_w <= 0.0 || self.mu <= 0.0 {
            return Err(Error::parameter("physical constants must be positive"));
        }
        Ok(())
    }
}

/// One fracture set: orientation pole and intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct FractureSetSpec {
    pub name: String,
    /// Trend of the mean pole, degrees counterclockwise from +x in the xy-plane.
    pub trend_deg: f64,
    /// Plunge of the mean pole, degrees downward from horizontal.
    pub plunge_deg: f64,
    /// Fisher concentration κ (κ = 0 gives uniform orientations).
    pub concentration: f64,
    /// Fracture intensity P30 [1/m³].
    pub p30: f64,
}

impl FractureSetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=90.0).contains(&self.plunge_deg) {
            return Err(Error::parameter(format!(
                "set {}: plunge must lie in [0, 90]",
                self.name
            )));
        }
        if self.concentration < 0.0 {
            return Err(Error::parameter(format!(
                "set {}: Fisher concentration must be >= 0",
                self.name
            )));
        }
        if self.p30 < 0.0 {
            return Err(Error::parameter(format!(
                "set {}: p30 must be >= 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Full DFN sampling specification.
#[derive(Debug, Clone, PartialEq)]
pub struct DfnSpec {
    pub sets: Vec<FractureSetSpec>,
    /// Power-law size exponent α.
    pub alpha: f64,
    /// Lower size bound [m].
    pub r_lo: f64,
    /// Upper size bound [m].
    pub r_hi: f64,
    /// Aperture coefficient a in δ = a·f_s.
    pub aperture_coeff: f64,
    pub constants: PhysicalConstants,
}

impl DfnSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_hi > self.r_lo && self.r_lo > 0.0) {
            return Err(Error::parameter("size bounds must satisfy r_hi > r_lo > 0"));
        }
        if self.alpha <= 1.0 {
            return Err(Error::parameter("power-law exponent must be > 1"));
        }
        if self.aperture_coeff <= 0.0 {
            return Err(Error::parameter("aperture coefficient must be > 0"));
        }
        self.constants.validate()?;
        for set in &self.sets {
            set.validate()?;
        }
        Ok(())
    }

    /// FNV-1a hash over the canonical parameter rendering; identifies a spec
    /// in fracture file headers.
    pub fn hash(&self) -> u64 {
        let mut text = format!(
            "alpha={};r_lo={};r_hi={};a={};g={};rho={};mu={}",
            self.alpha,
            self.r_lo,
            self.r_hi,
            self.aperture_coeff,
            self.constants.g,
            self.constants.rho_w,
            self.constants.mu
        );
        for s in &self.sets {
            text.push_str(&format!(
                ";{}:{},{},{},{}",
                s.name, s.trend_deg, s.plunge_deg, s.concentration, s.p30
            ));
        }
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub lo: Point3<f64>,
    pub hi: Point3<f64>,
}

impl Box3 {
    pub fn new(lo: Point3<f64>, hi: Point3<f64>) -> Result<Self> {
        if !(hi.x > lo.x && hi.y > lo.y && hi.z > lo.z) {
            return Err(Error::parameter("box requires hi > lo componentwise"));
        }
        Ok(Self { lo, hi })
    }

    /// Cube (0, side)³.
    pub fn cube(side: f64) -> Result<Self> {
        Self::new(Point3::origin(), Point3::new(side, side, side))
    }

    /// Cube of given side centered on the cube (0, inner)³, i.e. spanning
    /// (-(side-inner)/2, inner + (side-inner)/2) per axis.
    pub fn cube_around(inner: f64, side: f64) -> Result<Self> {
        let pad = (side - inner) / 2.0;
        Self::new(
            Point3::new(-pad, -pad, -pad),
            Point3::new(inner + pad, inner + pad, inner + pad),
        )
    }

    pub fn volume(&self) -> f64 {
        (self.hi.x - self.lo.x) * (self.hi.y - self.lo.y) * (self.hi.z - self.lo.z)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.hi - self.lo
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (self.lo.x..=self.hi.x).contains(&p.x)
            && (self.lo.y..=self.hi.y).contains(&p.y)
            && (self.lo.z..=self.hi.z).contains(&p.z)
    }
}

/// A single planar fracture.
///
/// Generated as a square of edge length `size`; the voxelizer converts it to a
/// disc of equivalent area. `in_plane_axis` fixes the azimuthal orientation
/// within the fracture plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Fracture {
    pub center: Point3<f64>,
    pub normal: UnitVector3<f64>,
    pub in_plane_axis: UnitVector3<f64>,
    /// Size f_s [m] (square edge length).
    pub size: f64,
    /// Aperture δ = a·f_s [m].
    pub aperture: f64,
    /// Isotropic fracture conductivity k_f [m/s].
    pub conductivity: f64,
}

impl Fracture {
    pub fn validate(&self) -> Result<()> {
        let ortho = self.normal.dot(&self.in_plane_axis).abs();
        if ortho > 1e-12 {
            return Err(Error::internal(format!(
                "fracture axes not orthogonal (dot = {ortho:.3e})"
            )));
        }
        if self.size <= 0.0 || self.aperture <= 0.0 || self.conductivity <= 0.0 {
            return Err(Error::internal(
                "fracture size, aperture, and conductivity must be positive",
            ));
        }
        Ok(())
    }

    /// Second in-plane axis completing the right-handed frame.
    pub fn second_axis(&self) -> UnitVector3<f64> {
        Unit::new_normalize(self.normal.cross(&self.in_plane_axis))
    }
}

/// Inverse-CDF sample of the truncated power law f_s ∝ r^{-α} on [r_lo, r_hi).
pub fn sample_power_law(rng: &mut impl Rng, alpha: f64, r_lo: f64, r_hi: f64) -> Result<f64> {
    if !(r_hi > r_lo && r_lo > 0.0) {
        return Err(Error::parameter("size bounds must satisfy r_hi > r_lo > 0"));
    }
    if alpha == 1.0 {
        return Err(Error::parameter("power-law exponent must differ from 1"));
    }
    let u: f64 = rng.gen();
    Ok(power_law_quantile(u, alpha, r_lo, r_hi))
}

/// Quantile function of the truncated power law.
pub fn power_law_quantile(u: f64, alpha: f64, r_lo: f64, r_hi: f64) -> f64 {
    let e = 1.0 - alpha;
    (r_lo.powf(e) - u * (r_lo.powf(e) - r_hi.powf(e))).powf(1.0 / e)
}

/// CDF of the truncated power law, the analytic counterpart of
/// [`power_law_quantile`].
pub fn power_law_cdf(r: f64, alpha: f64, r_lo: f64, r_hi: f64) -> f64 {
    let e = 1.0 - alpha;
    (r_lo.powf(e) - r.powf(e)) / (r_lo.powf(e) - r_hi.powf(e))
}

/// Pole vector from trend/plunge angles in degrees.
///
/// Trend is measured counterclockwise from +x in the xy-plane, plunge downward
/// from horizontal: n = (cos p·cos t, cos p·sin t, −sin p).
pub fn trend_plunge_to_vector(trend_deg: f64, plunge_deg: f64) -> UnitVector3<f64> {
    let t = trend_deg.to_radians();
    let p = plunge_deg.to_radians();
    Unit::new_normalize(Vector3::new(p.cos() * t.cos(), p.cos() * t.sin(), -p.sin()))
}

/// Fisher-distributed unit vector about `mean_dir` with concentration κ.
///
/// κ = 0 degenerates to the uniform distribution on the sphere.
pub fn sample_fisher_direction(
    rng: &mut impl Rng,
    mean_dir: &UnitVector3<f64>,
    kappa: f64,
) -> UnitVector3<f64> {
    let u: f64 = rng.gen();
    let cos_theta = if kappa > 0.0 {
        // Inverse CDF of cosθ for the Fisher distribution.
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    } else {
        2.0 * u - 1.0
    };
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let local = Vector3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);
    Unit::new_normalize(rotation_from_z(mean_dir) * local)
}

/// Minimal rotation taking ẑ to `dir` (rotation by π about x̂ near the antipode).
pub(crate) fn rotation_from_z(dir: &UnitVector3<f64>) -> nalgebra::Rotation3<f64> {
    let z = Vector3::z_axis();
    if dir.dot(&z) < -1.0 + 1e-9 {
        nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    } else {
        nalgebra::Rotation3::rotation_between(&z, dir)
            .unwrap_or_else(nalgebra::Rotation3::identity)
    }
}

/// Cubic law: k_f = g·ρ_w·δ²/(12·μ).
pub fn cubic_law(aperture: f64, constants: &PhysicalConstants) -> Result<f64> {
    if aperture < 0.0 {
        return Err(Error::parameter("aperture must be non-negative"));
    }
    Ok(constants.g * constants.rho_w * aperture * aperture / (12.0 * constants.mu))
}

/// Poisson sample. Inversion for small means, normal-approximation-free
/// rejection (PTRS) via rand_distr otherwise.
pub fn sample_poisson(rng: &mut impl Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 30.0 {
        // Knuth-style inversion on the log scale.
        let limit = -mean;
        let mut log_prod = 0.0f64;
        let mut count = 0u64;
        loop {
            log_prod += rng.gen::<f64>().max(f64::MIN_POSITIVE).ln();
            if log_prod < limit {
                return count;
            }
            count += 1;
        }
    }
    let dist = rand_distr::Poisson::new(mean).expect("positive mean");
    rng.sample(dist) as u64
}

/// Generate a DFN realization on `domain`.
///
/// Each fracture set draws from its own RNG substream derived from the master
/// seed and the set index, so results are reproducible and independent of set
/// evaluation order.
pub fn generate_dfn(seed: u64, spec: &DfnSpec, domain: &Box3) -> Result<Vec<Fracture>> {
    spec.validate()?;
    let volume = domain.volume();
    let ext = domain.extent();
    let mut fractures = Vec::new();
    for (set_idx, set) in spec.sets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(set_idx as u64 + 1);
        let pole = trend_plunge_to_vector(set.trend_deg, set.plunge_deg);
        let count = sample_poisson(&mut rng, set.p30 * volume);
        for _ in 0..count {
            let center = Point3::new(
                domain.lo.x + rng.gen::<f64>() * ext.x,
                domain.lo.y + rng.gen::<f64>() * ext.y,
                domain.lo.z + rng.gen::<f64>() * ext.z,
            );
            let size = sample_power_law(&mut rng, spec.alpha, spec.r_lo, spec.r_hi)?;
            let normal = sample_fisher_direction(&mut rng, &pole, set.concentration);
            // In-plane axis with uniform azimuth.
            let frame = rotation_from_z(&normal);
            let psi = rng.gen::<f64>() * std::f64::consts::TAU;
            let in_plane =
                Unit::new_normalize(frame * Vector3::new(psi.cos(), psi.sin(), 0.0));
            let aperture = spec.aperture_coeff * size;
            let conductivity = cubic_law(aperture, &spec.constants)?;
            let fracture = Fracture {
                center,
                normal,
                in_plane_axis: in_plane,
                size,
                aperture,
                conductivity,
            };
            fracture.validate()?;
            fractures.push(fracture);
        }
    }
    Ok(fractures)
}

/// Select fractures with size in (s_lo, s_hi], preserving order.
pub fn filter_size_range(fractures: &[Fracture], s_lo: f64, s_hi: f64) -> Result<Vec<Fracture>> {
    if !(s_hi > s_lo && s_lo >= 0.0) {
        return Err(Error::parameter("size range must satisfy s_hi > s_lo >= 0"));
    }
    Ok(fractures
        .iter()
        .filter(|f| f.size > s_lo && f.size <= s_hi)
        .cloned()
        .collect())
}

/// Write the line-oriented fracture text format: a header with count and spec
/// hash, then one record per fracture.
pub fn write_fractures<W: Write>(
    writer: W,
    fractures: &[Fracture],
    spec_hash: u64,
) -> Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "DFNF {} {:016x}", fractures.len(), spec_hash)?;
    for f in fractures {
        let a = &f.in_plane_axis;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            f.center.x,
            f.center.y,
            f.center.z,
            f.normal.x,
            f.normal.y,
            f.normal.z,
            a.x,
            a.y,
            a.z,
            f.size,
            f.aperture,
            f.conductivity
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read the fracture text format. Returns the fractures and the stored spec hash.
pub fn read_fractures<R: BufRead>(reader: R) -> Result<(Vec<Fracture>, u64)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty fracture file"))??;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("DFNF") {
        return Err(Error::format("missing DFNF header"));
    }
    let count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("bad fracture count in header"))?;
    let spec_hash = parts
        .next()
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .ok_or_else(|| Error::format("bad spec hash in header"))?;
    let mut fractures = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("bad fracture record: {e}")))?;
        if vals.len() != 12 {
            return Err(Error::format(format!(
                "fracture record has {} fields, expected 12",
                vals.len()
            )));
        }
        fractures.push(Fracture {
            center: Point3::new(vals[0], vals[1], vals[2]),
            normal: Unit::new_normalize(Vector3::new(vals[3], vals[4], vals[5])),
            in_plane_axis: Unit::new_normalize(Vector3::new(vals[6], vals[7], vals[8])),
            size: vals[9],
            aperture: vals[10],
            conductivity: vals[11],
        });
    }
    if fractures.len() != count {
        return Err(Error::format(format!(
            "header announces {count} fractures, found {}",
            fractures.len()
        )));
    }
    Ok((fractures, spec_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn power_law_boundaries() {
        assert_relative_eq!(power_law_quantile(0.0, 2.0, 5.0, 100.0), 5.0);
        assert_relative_eq!(
            power_law_quantile(1.0 - 1e-15, 2.0, 5.0, 100.0),
            100.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn power_law_median_matches_cdf() {
        // Oracle: the analytic CDF evaluated at the median output must be 0.5.
        let r = power_law_quantile(0.5, 2.0, 5.0, 100.0);
        assert_relative_eq!(r, 9.5238, epsilon = 1e-4);
        assert_relative_eq!(power_law_cdf(r, 2.0, 5.0, 100.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn power_law_invalid_bounds() {
        assert!(sample_power_law(&mut rng(0), 2.0, 5.0, 5.0).is_err());
        assert!(sample_power_law(&mut rng(0), 2.0, -1.0, 5.0).is_err());
    }

    #[test]
    fn power_law_ks_test() {
        // Kolmogorov–Smirnov against the analytic CDF at significance 0.01.
        let mut r = rng(42);
        let n = 10_000;
        let mut samples: Vec<f64> = (0..n)
            .map(|_| sample_power_law(&mut r, 2.0, 5.0, 100.0).unwrap())
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let f = power_law_cdf(*s, 2.0, 5.0, 100.0);
            d = d.max((f - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // Critical value at alpha = 0.01: 1.628 / sqrt(n).
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn trend_plunge_axes() {
        let n = trend_plunge_to_vector(0.0, 0.0);
        assert_relative_eq!(n.x, 1.0, epsilon = 1e-15);
        let n = trend_plunge_to_vector(0.0, 90.0);
        assert_relative_eq!(n.z, -1.0, epsilon = 1e-15);
        let n = trend_plunge_to_vector(90.0, 0.0);
        assert_relative_eq!(n.y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fisher_uniform_mean_vanishes() {
        let mut r = rng(7);
        let mean = Vector3::z_axis();
        let mut sum = Vector3::zeros();
        let n = 20_000;
        for _ in 0..n {
            sum += sample_fisher_direction(&mut r, &mean, 0.0).into_inner();
        }
        assert!((sum / n as f64).norm() < 0.02);
    }

    #[test]
    fn fisher_resultant_length() {
        // Analytic mean resultant length coth(κ) − 1/κ.
        let kappa = 17.8f64;
        let expected = 1.0 / kappa.tanh() - 1.0 / kappa;
        assert_relative_eq!(expected, 0.94382, epsilon = 1e-4);
        let mut r = rng(3);
        let mean = trend_plunge_to_vector(292.0, 1.0);
        let mut sum = Vector3::zeros();
        let n = 100_000;
        for _ in 0..n {
            sum += sample_fisher_direction(&mut r, &mean, kappa).into_inner();
        }
        assert_relative_eq!((sum / n as f64).norm(), expected, epsilon = 5e-3);
    }

    #[test]
    fn fisher_concentration_limit() {
        let mut r = rng(11);
        let mean = trend_plunge_to_vector(33.0, 21.0);
        for _ in 0..100 {
            let d = sample_fisher_direction(&mut r, &mean, 1e6);
            assert!(d.dot(&mean).acos() < 0.01);
        }
    }

    #[test]
    fn fisher_mean_direction() {
        let mut r = rng(5);
        let mean = trend_plunge_to_vector(120.0, 40.0);
        let mut sum = Vector3::zeros();
        for _ in 0..100_000 {
            sum += sample_fisher_direction(&mut r, &mean, 10.0).into_inner();
        }
        let emp = Unit::new_normalize(sum);
        assert!(emp.dot(&mean).acos() < 0.02);
    }

    #[test]
    fn cubic_law_values() {
        let c = PhysicalConstants::default();
        assert_relative_eq!(cubic_law(0.0, &c).unwrap(), 0.0);
        assert_relative_eq!(cubic_law(5e-4, &c).unwrap(), 0.2044, epsilon = 1e-4);
        let k1 = cubic_law(1e-4, &c).unwrap();
        let k2 = cubic_law(2e-4, &c).unwrap();
        assert_relative_eq!(k2 / k1, 4.0, epsilon = 1e-12);
    }

    fn test_spec(p30: f64) -> DfnSpec {
        DfnSpec {
            sets: vec![FractureSetSpec {
                name: "S".into(),
                trend_deg: 292.0,
                plunge_deg: 1.0,
                concentration: 17.8,
                p30,
            }],
            alpha: 2.0,
            r_lo: 5.0,
            r_hi: 100.0,
            aperture_coeff: 1e-4,
            constants: PhysicalConstants::default(),
        }
    }

    #[test]
    fn generate_dfn_empty_for_zero_intensity() {
        let domain = Box3::cube(30.0).unwrap();
        let f = generate_dfn(1, &test_spec(0.0), &domain).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn generate_dfn_poisson_mean() {
        // Oracle: N ~ Poisson(27); mean over 1000 draws within ±1.7
        // (≈ 10 sigma of the sample mean; the spec's stated band).
        let domain = Box3::cube(30.0).unwrap();
        let spec = test_spec(0.001);
        let mut total = 0usize;
        let draws = 1000;
        for seed in 0..draws {
            total += generate_dfn(seed, &spec, &domain).unwrap().len();
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - 27.0).abs() < 1.7, "mean count {mean}");
    }

    #[test]
    fn generate_dfn_invariants_and_reproducibility() {
        let domain = Box3::cube(30.0).unwrap();
        let spec = test_spec(0.002);
        let a = generate_dfn(99, &spec, &domain).unwrap();
        let b = generate_dfn(99, &spec, &domain).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for f in &a {
            f.validate().unwrap();
            assert!(domain.contains(&f.center));
            assert!((spec.r_lo..spec.r_hi).contains(&f.size));
            assert_relative_eq!(f.aperture, spec.aperture_coeff * f.size);
        }
    }

    #[test]
    fn filter_size_range_cases() {
        let domain = Box3::cube(30.0).unwrap();
        let spec = test_spec(0.002);
        let all = generate_dfn(17, &spec, &domain).unwrap();
        assert!(filter_size_range(&all, 0.0, f64::INFINITY).unwrap().len() == all.len());
        let some = filter_size_range(&all, 5.0, 10.0).unwrap();
        for f in &some {
            assert!(f.size > 5.0 && f.size <= 10.0);
        }
        assert!(filter_size_range(&all, 10.0, 5.0).is_err());
        assert!(filter_size_range(&[], 0.0, 1.0).unwrap().is_empty());
    }

    #[test]
    fn fracture_text_round_trip() {
        let domain = Box3::cube(30.0).unwrap();
        let spec = test_spec(0.002);
        let all = generate_dfn(21, &spec, &domain).unwrap();
        let mut buf = Vec::new();
        write_fractures(&mut buf, &all, spec.hash()).unwrap();
        let (back, hash) = read_fractures(&buf[..]).unwrap();
        assert_eq!(hash, spec.hash());
        assert_eq!(back.len(), all.len());
        for (a, b) in all.iter().zip(&back) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.size, b.size);
        }
        assert!(read_fractures(&b"garbage"[..]).is_err());
    }
}
