//! Homogenization sample generation, normalization/standardization, dataset
//! splits, evaluation metrics, and dataset files.
//!
//! A sample couples a voxelized 6-channel conductivity input X with the
//! equivalent tensor K^eq obtained by numerical homogenization, plus the
//! scalar matrix baseline X̄^m used for scale normalization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dfn::{generate_dfn, Box3, DfnSpec};
use crate::error::{Error, Result};
use crate::field::{
    read_tensor_grid, sample_conductivity_tensor_field, write_tensor_grid, CovarianceSpec,
    GridSpec, TensorFieldParams, TensorGrid,
};
use crate::homog::{homogenize_block, EquivalentTensor};
use crate::voxel::voxelize_dfm;

const SAMPLE_MAGIC: &[u8; 4] = b"DFMS";
const DATASET_VERSION: u32 = 1;

/// Scalar mean over all six Voigt channels and voxels.
pub fn field_mean(field: &TensorGrid) -> f64 {
    let n = (6 * field.grid.n_voxels()) as f64;
    field.channels.iter().map(|c| c.iter().sum::<f64>()).sum::<f64>() / n
}

/// Per-sample metadata carried through dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    /// Total fracture intensity Σ P30 over sets [1/m³].
    pub p30: f64,
    /// SRF correlation length λ [m].
    pub corr_len: f64,
    /// K_f/K_m ratio class label (e.g. "A").
    pub class: String,
    pub seed: u64,
}

/// One homogenization sample: input field, target tensor, matrix baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub input: TensorGrid,
    pub target: EquivalentTensor,
    /// X̄^m: mean matrix conductivity before fracture blending.
    pub baseline: f64,
    pub meta: SampleMeta,
}

/// Configuration of one sample draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub dfn: DfnSpec,
    pub cov: CovarianceSpec,
    pub params: TensorFieldParams,
    /// Cubic sample domain side [m] (the paper's Ω_o has side 15).
    pub domain_side: f64,
    /// Voxels per axis.
    pub resolution: usize,
    pub solver_tol: f64,
    pub class: String,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        self.dfn.validate()?;
        if self.domain_side <= 0.0 {
            return Err(Error::parameter("domain side must be positive"));
        }
        if self.resolution < 4 {
            return Err(Error::parameter("sample resolution must be at least 4"));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical parameter rendering.
    pub fn hash(&self) -> u64 {
        let text = format!(
            "dfn={:x};lambda={};mu={:?};sigma={:?};side={};res={};tol={};class={}",
            self.dfn.hash(),
            self.cov.corr_len,
            self.params.mu.as_slice(),
            self.params.sigma.as_slice(),
            self.domain_side,
            self.resolution,
            self.solver_tol,
            self.class
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Draw one sample: DFN + tensor SRF on the sample domain, voxelize, and
/// homogenize numerically for the target.
pub fn generate_sample(seed: u64, config: &SampleConfig) -> Result<DatasetSample> {
    config.validate()?;
    let domain = Box3::cube(config.domain_side)?;
    let grid = GridSpec::covering(&domain, config.resolution)?;
    let fractures = generate_dfn(seed, &config.dfn, &domain)?;
    let matrix = sample_conductivity_tensor_field(seed, &grid, &config.cov, &config.params)?;
    let input = voxelize_dfm(&fractures, &matrix, &grid)?;
    let target = homogenize_block(&input, config.solver_tol)?;
    let baseline = field_mean(&matrix);
    if !(baseline > 0.0) {
        return Err(Error::data("matrix baseline must be positive"));
    }
    Ok(DatasetSample {
        input,
        target,
        baseline,
        meta: SampleMeta {
            p30: config.dfn.sets.iter().map(|s| s.p30).sum(),
            corr_len: config.cov.corr_len,
            class: config.class.clone(),
            seed,
        },
    })
}

/// Generate `count` samples from a master seed; parallel over samples with
/// per-sample seeds, so the result is invariant to worker count.
pub fn generate_dataset(
    master_seed: u64,
    count: usize,
    config: &SampleConfig,
) -> Result<Vec<DatasetSample>> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let seed = master_seed.wrapping_add((j as u64).wrapping_mul(0x9e3779b97f4a7c15));
            generate_sample(seed, config)
        })
        .collect()
}

/// Divide input and target by the baseline X̄^m; the stored baseline becomes
/// the mean of the normalized input (exactly 1 for fracture-free samples).
pub fn normalize_sample(sample: &DatasetSample) -> DatasetSample {
    let mut out = sample.clone();
    let b = sample.baseline;
    for ch in &mut out.input.channels {
        for v in ch.iter_mut() {
            *v /= b;
        }
    }
    for v in &mut out.target.voigt {
        *v /= b;
    }
    out.baseline = field_mean(&out.input);
    out
}

/// Mean/standard deviation of one Voigt component (of the log for diagonals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Training-split statistics for inputs (per voxel) and outputs (per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub input: [Stat; 6],
    pub output: [Stat; 6],
}

fn fit_component(values: &mut dyn Iterator<Item = f64>, diagonal: bool, what: &str) -> Result<Stat> {
    let mut transformed = Vec::new();
    for v in values {
        if diagonal {
            if !(v > 0.0) {
                return Err(Error::data(format!(
                    "non-positive diagonal value {v} in {what}"
                )));
            }
            transformed.push(v.ln());
        } else {
            transformed.push(v);
        }
    }
    let n = transformed.len();
    if n < 2 {
        return Err(Error::data(format!("{what}: need at least two values")));
    }
    let mean = transformed.iter().sum::<f64>() / n as f64;
    let ss: f64 = transformed.iter().map(|v| (v - mean) * (v - mean)).sum();
    let std = (ss / (n - 1) as f64).sqrt();
    if std == 0.0 {
        return Err(Error::data(format!("{what}: constant component, std 0")));
    }
    Ok(Stat { mean, std })
}

/// Component statistics from the training split (Bessel-corrected; log on the
/// three diagonal components).
pub fn fit_stats(training: &[DatasetSample]) -> Result<NormalizationStats> {
    if training.is_empty() {
        return Err(Error::parameter("training split is empty"));
    }
    let mut input = [Stat { mean: 0.0, std: 1.0 }; 6];
    let mut output = input;
    for c in 0..6 {
        let diagonal = c < 3;
        input[c] = fit_component(
            &mut training
                .iter()
                .flat_map(|s| s.input.channels[c].iter().copied()),
            diagonal,
            &format!("input component {c}"),
        )?;
        output[c] = fit_component(
            &mut training.iter().map(|s| s.target.voigt[c]),
            diagonal,
            &format!("output component {c}"),
        )?;
    }
    Ok(NormalizationStats { input, output })
}

/// Standardize one value: (log k − μ̂)/σ̂ on diagonals, (k − μ̂)/σ̂ off.
pub fn standardize_value(v: f64, stat: &Stat, diagonal: bool) -> f64 {
    if diagonal {
        (v.ln() - stat.mean) / stat.std
    } else {
        (v - stat.mean) / stat.std
    }
}

/// Exact inverse of [`standardize_value`].
pub fn destandardize_value(v: f64, stat: &Stat, diagonal: bool) -> f64 {
    if diagonal {
        (v * stat.std + stat.mean).exp()
    } else {
        v * stat.std + stat.mean
    }
}

pub fn standardize_voigt(v: &[f64; 6], stats: &[Stat; 6]) -> [f64; 6] {
    std::array::from_fn(|c| standardize_value(v[c], &stats[c], c < 3))
}

pub fn destandardize_voigt(v: &[f64; 6], stats: &[Stat; 6]) -> [f64; 6] {
    std::array::from_fn(|c| destandardize_value(v[c], &stats[c], c < 3))
}

/// Standardize the six channels of an input field.
pub fn standardize_field(field: &TensorGrid, stats: &[Stat; 6]) -> TensorGrid {
    let mut out = field.clone();
    for c in 0..6 {
        let diagonal = c < 3;
        for v in &mut out.channels[c] {
            *v = standardize_value(*v, &stats[c], diagonal);
        }
    }
    out
}

/// Index assignment into train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 64/16/20 split: 80/20 train/test, then 80/20 train/validation.
pub fn split_dataset(count: usize, seed: u64) -> Result<Splits> {
    if count < 5 {
        return Err(Error::parameter("need at least 5 samples to split"));
    }
    let mut indices: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train_all = (0.8 * count as f64).round() as usize;
    let n_val = (0.2 * n_train_all as f64).round() as usize;
    let n_train = n_train_all - n_val;
    Ok(Splits {
        train: indices[..n_train].to_vec(),
        validation: indices[n_train..n_train_all].to_vec(),
        test: indices[n_train_all..].to_vec(),
    })
}

/// Per-component NRMSE (RMSE over population std of the targets) and the mean
/// over the six components.
pub fn nrmse(predictions: &[[f64; 6]], targets: &[[f64; 6]]) -> Result<([f64; 6], f64)> {
    if predictions.len() != targets.len() {
        return Err(Error::parameter("prediction/target length mismatch"));
    }
    let n = targets.len();
    if n < 2 {
        return Err(Error::parameter("need at least two pairs for NRMSE"));
    }
    let mut out = [0.0f64; 6];
    for c in 0..6 {
        let mean = targets.iter().map(|t| t[c]).sum::<f64>() / n as f64;
        let var = targets.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>() / n as f64;
        if var == 0.0 {
            return Err(Error::data(format!("component {c}: zero target variance")));
        }
        let mse = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (p[c] - t[c]).powi(2))
            .sum::<f64>()
            / n as f64;
        out[c] = (mse / var).sqrt();
    }
    Ok((out, out.iter().sum::<f64>() / 6.0))
}

/// Dataset bookkeeping stored in the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub count: usize,
    pub resolution: usize,
    pub config_hash: u64,
    /// Per-sample split assignment (0 train, 1 validation, 2 test); empty
    /// until a split is recorded.
    pub splits: Vec<u8>,
    pub stats: Option<NormalizationStats>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !self.splits.is_empty() {
            if self.splits.len() != self.count {
                return Err(Error::format("split assignments do not cover all samples"));
            }
            if self.splits.iter().any(|s| *s > 2) {
                return Err(Error::format("split assignment out of range"));
            }
        }
        Ok(())
    }

    pub fn set_splits(&mut self, splits: &Splits) -> Result<()> {
        let mut assignment = vec![u8::MAX; self.count];
        for (code, idx) in [
            (0u8, &splits.train),
            (1, &splits.validation),
            (2, &splits.test),
        ] {
            for i in idx {
                if *i >= self.count || assignment[*i] != u8::MAX {
                    return Err(Error::parameter("splits are not disjoint over the dataset"));
                }
                assignment[*i] = code;
            }
        }
        if assignment.iter().any(|a| *a == u8::MAX) {
            return Err(Error::parameter("splits do not exhaust the dataset"));
        }
        self.splits = assignment;
        Ok(())
    }

    pub fn split_indices(&self, code: u8) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == code)
            .map(|(i, _)| i)
            .collect()
    }
}

fn manifest_line(w: &mut impl Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(w, "{key} = {value}").map_err(Error::from)
}

/// Write `manifest.txt` and `samples.bin` into `dir`.
pub fn write_dataset(
    samples: &[DatasetSample],
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<()> {
    if samples.len() != manifest.count {
        return Err(Error::parameter("manifest count does not match samples"));
    }
    manifest.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut m = BufWriter::new(File::create(dir.join("manifest.txt"))?);
    manifest_line(&mut m, "version", DATASET_VERSION)?;
    manifest_line(&mut m, "count", manifest.count)?;
    manifest_line(&mut m, "resolution", manifest.resolution)?;
    manifest_line(&mut m, "config_hash", format!("{:x}", manifest.config_hash))?;
    if !manifest.splits.is_empty() {
        let text: Vec<String> = manifest.splits.iter().map(|s| s.to_string()).collect();
        manifest_line(&mut m, "splits", text.join(","))?;
    }
    if let Some(stats) = &manifest.stats {
        for (side, block) in [("input", &stats.input), ("output", &stats.output)] {
            for c in 0..6 {
                manifest_line(&mut m, &format!("{side}_mean_{c}"), block[c].mean)?;
                manifest_line(&mut m, &format!("{side}_std_{c}"), block[c].std)?;
            }
        }
    }
    m.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("samples.bin"))?);
    for (id, s) in samples.iter().enumerate() {
        w.write_all(SAMPLE_MAGIC)?;
        w.write_all(&(id as u64).to_le_bytes())?;
        w.write_all(&s.baseline.to_le_bytes())?;
        write_tensor_grid(&mut w, &s.input)?;
        for v in &s.target.voigt {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.meta.p30.to_le_bytes())?;
        w.write_all(&s.meta.corr_len.to_le_bytes())?;
        w.write_all(&s.meta.seed.to_le_bytes())?;
        let class = s.meta.class.as_bytes();
        w.write_all(&(class.len() as u32).to_le_bytes())?;
        w.write_all(class)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<DatasetSample>, DatasetManifest)> {
    let manifest_text = BufReader::new(File::open(dir.join("manifest.txt"))?);
    let mut fields = std::collections::BTreeMap::new();
    for line in manifest_text.lines() {
        let line = line?;
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::format(format!("manifest is missing `{key}`")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|_| Error::format("manifest version is not an integer"))?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let count: usize = get("count")?
        .parse()
        .map_err(|_| Error::format("manifest count is not an integer"))?;
    let resolution: usize = get("resolution")?
        .parse()
        .map_err(|_| Error::format("manifest resolution is not an integer"))?;
    let config_hash = u64::from_str_radix(get("config_hash")?, 16)
        .map_err(|_| Error::format("manifest config_hash is not hexadecimal"))?;
    let splits = match fields.get("splits") {
        None => Vec::new(),
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::format("split assignment is not 0/1/2"))
            })
            .collect::<Result<Vec<u8>>>()?,
    };
    let stats = if fields.contains_key("input_mean_0") {
        let mut input = [Stat { mean: 0.0, std: 1.0 }; 6];
        let mut output = input;
        for (side, block) in [("input", &mut input), ("output", &mut output)] {
            for c in 0..6 {
                block[c].mean = get(&format!("{side}_mean_{c}"))?
                    .parse()
                    .map_err(|_| Error::format("stat is not a number"))?;
                block[c].std = get(&format!("{side}_std_{c}"))?
                    .parse()
                    .map_err(|_| Error::format("stat is not a number"))?;
            }
        }
        Some(NormalizationStats { input, output })
    } else {
        None
    };
    let manifest = DatasetManifest {
        count,
        resolution,
        config_hash,
        splits,
        stats,
    };
    manifest.validate()?;

    let mut r = BufReader::new(File::open(dir.join("samples.bin"))?);
    let mut samples = Vec::with_capacity(count);
    for expect_id in 0..count as u64 {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| {
            Error::format(format!(
                "samples.bin ends early: {expect_id} of {count} records"
            ))
        })?;
        if &magic != SAMPLE_MAGIC {
            return Err(Error::format("bad sample record magic"));
        }
        let id = read_exact_u64(&mut r)?;
        if id != expect_id {
            return Err(Error::format(format!(
                "sample record id {id} out of order (expected {expect_id})"
            )));
        }
        let baseline = read_exact_f64(&mut r)?;
        let input = read_tensor_grid(&mut r)?;
        let mut voigt = [0.0f64; 6];
        for v in &mut voigt {
            *v = read_exact_f64(&mut r)?;
        }
        let p30 = read_exact_f64(&mut r)?;
        let corr_len = read_exact_f64(&mut r)?;
        let seed = read_exact_u64(&mut r)?;
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)?;
        let mut class_buf = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        r.read_exact(&mut class_buf)?;
        let class = String::from_utf8(class_buf)
            .map_err(|_| Error::format("sample class label is not UTF-8"))?;
        samples.push(DatasetSample {
            input,
            target: EquivalentTensor {
                voigt,
                residual: 0.0,
                rank_deficient: false,
            },
            baseline,
            meta: SampleMeta {
                p30,
                corr_len,
                class,
                seed,
            },
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("samples.bin has trailing bytes"));
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfn::{FractureSetSpec, PhysicalConstants};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn fracture_free_config(k: f64) -> SampleConfig {
        SampleConfig {
            dfn: DfnSpec {
                sets: vec![],
                alpha: 2.0,
                r_lo: 5.0,
                r_hi: 100.0,
                aperture_coeff: 1e-4,
                constants: PhysicalConstants::default(),
            },
            cov: CovarianceSpec::new(0.0).unwrap(),
            params: TensorFieldParams {
                mu: Vector3::from_element(k.ln()),
                sigma: Matrix3::zeros(),
            },
            domain_side: 15.0,
            resolution: 8,
            solver_tol: 1e-10,
            class: "A".into(),
        }
    }

    fn fractured_config() -> SampleConfig {
        let mut c = fracture_free_config(0.02);
        c.dfn.sets = vec![FractureSetSpec {
            name: "NS".into(),
            trend_deg: 292.0,
            plunge_deg: 1.0,
            concentration: 17.8,
            p30: 0.002,
        }];
        c.cov = CovarianceSpec::new(3.0).unwrap();
        c.params = TensorFieldParams {
            mu: Vector3::new(-4.0, -3.8, -3.9),
            sigma: Matrix3::new(0.25, 0.2, 0.2, 0.2, 0.25, 0.2, 0.2, 0.2, 0.25),
        };
        c
    }

    #[test]
    fn zero_fracture_constant_matrix_sample() {
        let s = generate_sample(7, &fracture_free_config(2.0)).unwrap();
        assert_relative_eq!(s.baseline, 1.0, max_relative = 1e-12);
        for c in 0..6 {
            let expect = if c < 3 { 2.0 } else { 0.0 };
            assert_relative_eq!(s.target.voigt[c], expect, epsilon = 1e-8);
        }
        // Baseline averages all six channels: (3·2 + 3·0)/6 = 1.
        assert_relative_eq!(field_mean(&s.input), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn sample_reproducible() {
        let cfg = fractured_config();
        let a = generate_sample(42, &cfg).unwrap();
        let b = generate_sample(42, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.baseline > 0.0);
        a.input.check_spd().unwrap();
    }

    #[test]
    fn dataset_generation_deterministic() {
        let cfg = fracture_free_config(1.5);
        let a = generate_dataset(3, 4, &cfg).unwrap();
        let b = generate_dataset(3, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        // Distinct seeds give distinct samples under a stochastic config.
        let c = generate_dataset(3, 2, &fractured_config()).unwrap();
        assert_ne!(c[0].input, c[1].input);
    }

    #[test]
    fn normalization_cases() {
        let cfg = fractured_config();
        let s = generate_sample(5, &cfg).unwrap();
        let n1 = normalize_sample(&s);
        // Baseline 1 leaves a sample unchanged.
        let again = normalize_sample(&n1);
        for c in 0..3 {
            // Fracture voxels shift the recomputed baseline slightly; the
            // repeated application must stay within that drift.
            assert_relative_eq!(
                again.target.voigt[c],
                n1.target.voigt[c] / n1.baseline,
                max_relative = 1e-12
            );
        }

        // Fracture-free: exact idempotence.
        let s = generate_sample(5, &fracture_free_config(3.0)).unwrap();
        let n1 = normalize_sample(&s);
        let n2 = normalize_sample(&n1);
        assert_eq!(n1, n2);
        assert_relative_eq!(n1.baseline, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn normalization_scale_invariance() {
        // Scaling the raw field by c leaves the normalized pair unchanged.
        let a = generate_sample(9, &fracture_free_config(1.0)).unwrap();
        let b = generate_sample(9, &fracture_free_config(7.5)).unwrap();
        let na = normalize_sample(&a);
        let nb = normalize_sample(&b);
        for c in 0..6 {
            assert_relative_eq!(
                na.target.voigt[c],
                nb.target.voigt[c],
                epsilon = 1e-8,
                max_relative = 1e-7
            );
        }
    }

    #[test]
    fn stats_arithmetic_oracle() {
        // Two samples with diagonal target values {e, e³}: log-mean 2,
        // log-std √2.
        let base = generate_sample(1, &fracture_free_config(1.0)).unwrap();
        let mut s1 = base.clone();
        let mut s2 = base.clone();
        for c in 0..3 {
            s1.target.voigt[c] = 1.0f64.exp();
            s2.target.voigt[c] = 3.0f64.exp();
        }
        for c in 3..6 {
            s1.target.voigt[c] = -0.5;
            s2.target.voigt[c] = 0.5;
        }
        // Perturb one input voxel so input components are not constant.
        for c in 0..6 {
            s2.input.channels[c][0] += 0.25;
        }
        let stats = fit_stats(&[s1, s2]).unwrap();
        for c in 0..3 {
            assert_relative_eq!(stats.output[c].mean, 2.0, epsilon = 1e-12);
            assert_relative_eq!(stats.output[c].std, 2.0f64.sqrt(), epsilon = 1e-12);
        }
        for c in 3..6 {
            assert_relative_eq!(stats.output[c].mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(stats.output[c].std, 0.5 * 2.0f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn stats_degenerate_cases() {
        let s = generate_sample(2, &fracture_free_config(1.0)).unwrap();
        // Constant component across the split → data error.
        assert!(matches!(
            fit_stats(&[s.clone(), s.clone()]),
            Err(Error::Data(_))
        ));
        assert!(fit_stats(&[]).is_err());
        // Non-positive diagonal → data error.
        let mut bad = s.clone();
        bad.target.voigt[0] = -1.0;
        let mut other = s;
        other.target.voigt[0] = 2.0;
        assert!(matches!(fit_stats(&[bad, other]), Err(Error::Data(_))));
    }

    #[test]
    fn standardize_round_trip_and_zscores() {
        let stat = Stat { mean: -2.0, std: 0.7 };
        // Value at the training mean maps to 0.
        assert_relative_eq!(
            standardize_value((-2.0f64).exp(), &stat, true),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(standardize_value(-2.0, &stat, false), 0.0, epsilon = 1e-12);
        // Diagonal value e^{μ+σ} → 1.
        assert_relative_eq!(
            standardize_value((-2.0f64 + 0.7).exp(), &stat, true),
            1.0,
            epsilon = 1e-12
        );
        // Round trips within 1e-10.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let v: f64 = rng.gen_range(-3.0..3.0);
            let d = destandardize_value(standardize_value(v.exp(), &stat, true), &stat, true);
            assert_relative_eq!(d, v.exp(), max_relative = 1e-10);
            let o = destandardize_value(standardize_value(v, &stat, false), &stat, false);
            assert_relative_eq!(o, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn split_fractions_and_determinism() {
        let s = split_dataset(100, 11).unwrap();
        assert_eq!(s.train.len(), 64);
        assert_eq!(s.validation.len(), 16);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s, split_dataset(100, 11).unwrap());
        assert_ne!(s, split_dataset(100, 12).unwrap());

        // Disjoint and exhaustive.
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let tiny = split_dataset(5, 1).unwrap();
        assert!(!tiny.train.is_empty());
        assert!(!tiny.validation.is_empty());
        assert!(!tiny.test.is_empty());
        assert!(split_dataset(4, 1).is_err());
    }

    #[test]
    fn nrmse_contract() {
        let targets: Vec<[f64; 6]> = (0..10)
            .map(|i| std::array::from_fn(|c| (i as f64) * 0.3 + c as f64))
            .collect();
        // Perfect predictions → zeros.
        let (per, mean) = nrmse(&targets, &targets).unwrap();
        assert!(per.iter().all(|v| *v == 0.0));
        assert_eq!(mean, 0.0);

        // Mean predictor scores exactly 1 per component.
        let mut centers = [0.0f64; 6];
        for c in 0..6 {
            centers[c] = targets.iter().map(|t| t[c]).sum::<f64>() / targets.len() as f64;
        }
        let constant: Vec<[f64; 6]> = targets.iter().map(|_| centers).collect();
        let (per, mean) = nrmse(&constant, &targets).unwrap();
        for v in per {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(mean, 1.0, epsilon = 1e-12);

        // Translation invariance.
        let shift = |rows: &[[f64; 6]]| -> Vec<[f64; 6]> {
            rows.iter()
                .map(|r| std::array::from_fn(|c| r[c] + 5.0))
                .collect()
        };
        let (per_shifted, _) = nrmse(&shift(&constant), &shift(&targets)).unwrap();
        for (a, b) in per_shifted.iter().zip(&per) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }

        // Degenerate targets rejected.
        let flat = vec![[1.0; 6]; 10];
        assert!(matches!(nrmse(&flat, &flat), Err(Error::Data(_))));
    }

    #[test]
    fn nrmse_noise_convergence() {
        // Predictions = targets + noise of std σ·std(targets) → NRMSE → σ.
        let n = 10_000;
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut targets = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        for _ in 0..n {
            let t: [f64; 6] = std::array::from_fn(|_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * 2.0
            });
            let p: [f64; 6] = std::array::from_fn(|c| {
                t[c] + rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma * 2.0
            });
            targets.push(t);
            preds.push(p);
        }
        let (_, mean) = nrmse(&preds, &targets).unwrap();
        assert!((mean - sigma).abs() < 0.05 * sigma, "mean NRMSE {mean}");
    }

    #[test]
    fn dataset_file_round_trip() {
        let cfg = fractured_config();
        let samples = generate_dataset(77, 5, &cfg).unwrap();
        let mut manifest = DatasetManifest {
            count: 5,
            resolution: cfg.resolution,
            config_hash: cfg.hash(),
            splits: Vec::new(),
            stats: None,
        };
        manifest.set_splits(&split_dataset(5, 1).unwrap()).unwrap();
        let normalized: Vec<DatasetSample> = samples.iter().map(normalize_sample).collect();
        let train: Vec<DatasetSample> = manifest
            .split_indices(0)
            .into_iter()
            .map(|i| normalized[i].clone())
            .collect();
        manifest.stats = fit_stats(&train).ok();

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &manifest, dir.path()).unwrap();
        let (back, manifest_back) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest, manifest_back);
        assert_eq!(samples.len(), back.len());
        for (a, b) in samples.iter().zip(&back) {
            // Inputs round-trip through f32 storage; targets and scalars are
            // exact.
            assert_eq!(a.baseline, b.baseline);
            assert_eq!(a.target.voigt, b.target.voigt);
            assert_eq!(a.meta, b.meta);
            assert_eq!(a.input.grid, b.input.grid);
            for c in 0..6 {
                for (x, y) in a.input.channels[c].iter().zip(&b.input.channels[c]) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }

    #[test]
    fn dataset_file_errors() {
        let cfg = fracture_free_config(1.0);
        let samples = generate_dataset(1, 2, &cfg).unwrap();
        let manifest = DatasetManifest {
            count: 2,
            resolution: cfg.resolution,
            config_hash: cfg.hash(),
            splits: Vec::new(),
            stats: None,
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &manifest, dir.path()).unwrap();

        // Count mismatch.
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        std::fs::write(
            dir.path().join("manifest.txt"),
            text.replace("count = 2", "count = 3"),
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

        // Future version.
        std::fs::write(
            dir.path().join("manifest.txt"),
            text.replace("version = 1", "version = 2"),
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

        // Truncated records.
        std::fs::write(dir.path().join("manifest.txt"), &text).unwrap();
        let bin = std::fs::read(dir.path().join("samples.bin")).unwrap();
        std::fs::write(dir.path().join("samples.bin"), &bin[..bin.len() / 2]).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
