//! Implementations of the `dfm` subcommands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dfm_core::dataset::{
    self, fit_stats, generate_dataset, normalize_sample, split_dataset, standardize_field,
    standardize_voigt, DatasetManifest, DatasetSample, NormalizationStats, Stat,
};
use dfm_core::dfn::{generate_dfn, read_fractures, write_fractures, Fracture};
use dfm_core::field::{
    read_tensor_grid, sample_conductivity_tensor_field, write_tensor_grid, GridSpec, TensorGrid,
};
use dfm_core::homog::{
    block_centers, homogenize_block, homogenize_domain, interpolate_coarse, Backend, BlockLayout,
    CoarseField, PhaseTiming,
};
use dfm_core::net::{
    init, load_weights, predict_equivalent, save_weights, train, SurrogateModel, Tensor4D,
};
use dfm_core::solver::solve_constraint;
use dfm_core::{Error, NetworkConfig, Result};
use nalgebra::Point3;

use crate::config::RunConfig;

/// Backend selector for `upscale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Numerical,
    Surrogate,
}

impl BackendKind {
    fn label(self) -> &'static str {
        match self {
            BackendKind::Numerical => "numerical",
            BackendKind::Surrogate => "surrogate",
        }
    }
}

/// Matrix-field grid for the enlarged generation domain (−l/2, L+l/2)³ with
/// voxel size l / block resolution.
fn enlarged_grid(config: &RunConfig, layout: &BlockLayout) -> Result<GridSpec> {
    let cell = layout.block_size / config.block.resolution as f64;
    let side = config.domain.length + layout.block_size;
    let n = side / cell;
    if (n - n.round()).abs() > 1e-9 * n {
        return Err(Error::parameter(format!(
            "enlarged domain side {side} is not an integer number of {cell} voxels"
        )));
    }
    let half = 0.5 * layout.block_size;
    let n = n.round() as usize;
    GridSpec::new(Point3::new(-half, -half, -half), cell, (n, n, n))
}

/// `gen`: draw the DFN and the matrix conductivity field on the enlarged
/// domain and write both to the output directory.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let layout = block_centers(config.domain.length, config.domain.height)?;
    let enlarged = layout.enlarged_box();
    let grid = enlarged_grid(config, &layout)?;
    let spec = config.dfn_spec();
    let fractures = generate_dfn(config.seed, &spec, &enlarged)?;
    let field = sample_conductivity_tensor_field(
        config.seed,
        &grid,
        &config.covariance()?,
        &config.field_params(),
    )?;

    write_fractures(
        File::create(out.join(&config.paths.fractures))?,
        &fractures,
        spec.hash(),
    )?;
    write_tensor_grid(
        BufWriter::new(File::create(out.join(&config.paths.matrix_field))?),
        &field,
    )?;

    let enlarged_side = enlarged.extent().x;
    let mean = dataset::field_mean(&field);
    let mut summary = String::new();
    summary.push_str(&format!("fractures = {}\n", fractures.len()));
    summary.push_str(&format!("enlarged_side = {enlarged_side}\n"));
    summary.push_str(&format!("field_voxels = {}\n", field.grid.n_voxels()));
    summary.push_str(&format!("field_mean = {mean:.6e}\n"));
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn load_inputs(config: &RunConfig, out: &Path) -> Result<(Vec<Fracture>, TensorGrid)> {
    let (fractures, _) = read_fractures(BufReader::new(File::open(
        out.join(&config.paths.fractures),
    )?))?;
    let field = read_tensor_grid(BufReader::new(File::open(
        out.join(&config.paths.matrix_field),
    )?))?;
    Ok((fractures, field))
}

fn load_surrogate(config: &RunConfig, out: &Path) -> Result<SurrogateModel> {
    let network = load_weights(&out.join(&config.paths.weights))?;
    if network.config.input_resolution != config.block.resolution {
        return Err(Error::parameter(format!(
            "weight file expects {}³ blocks but block.resolution is {}",
            network.config.input_resolution, config.block.resolution
        )));
    }
    let stats = read_stats(&out.join(&config.paths.stats))?;
    Ok(SurrogateModel { network, stats })
}

fn write_blocks_csv(path: &Path, coarse: &CoarseField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "center_x,center_y,center_z,k_xx,k_yy,k_zz,k_yz,k_xz,k_xy")?;
    let c = coarse.layout.counts;
    for idx in 0..coarse.layout.n_blocks() {
        let (i, j, k) = (idx % c, (idx / c) % c, idx / (c * c));
        let p = coarse.layout.center(i, j, k);
        let v = coarse.field.voigt_at(idx);
        writeln!(
            w,
            "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            p.x, p.y, p.z, v[0], v[1], v[2], v[3], v[4], v[5]
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing_csv(path: &Path, timing: &PhaseTiming, wall: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "phase,seconds")?;
    writeln!(w, "voxelization,{:.6}", timing.voxelization)?;
    writeln!(w, "solve,{:.6}", timing.solve)?;
    writeln!(w, "inference,{:.6}", timing.inference)?;
    writeln!(w, "wall,{wall:.6}")?;
    w.flush()?;
    Ok(())
}

/// `upscale`: overlapping-block homogenization of the generated sample with
/// the chosen backend. Writes the coarse tensor field, a per-block CSV, and a
/// timing report.
pub fn cmd_upscale(config: &RunConfig, backend: BackendKind, out: &Path) -> Result<()> {
    config.echo(out)?;
    let (fractures, field) = load_inputs(config, out)?;
    let model;
    let core_backend = match backend {
        BackendKind::Numerical => Backend::Numerical,
        BackendKind::Surrogate => {
            model = load_surrogate(config, out)?;
            Backend::Surrogate(&model)
        }
    };
    let start = Instant::now();
    let (coarse, timing) = homogenize_domain(
        &fractures,
        &field,
        config.domain.length,
        config.domain.height,
        config.domain.cutoff,
        core_backend,
        config.solver.tolerance,
    )?;
    let wall = start.elapsed().as_secs_f64();

    let coarse_path = match backend {
        BackendKind::Numerical => &config.paths.coarse_numerical,
        BackendKind::Surrogate => &config.paths.coarse_surrogate,
    };
    write_tensor_grid(
        BufWriter::new(File::create(out.join(coarse_path))?),
        &coarse.field,
    )?;
    write_blocks_csv(&out.join(format!("blocks_{}.csv", backend.label())), &coarse)?;
    write_timing_csv(
        &out.join(format!("timing_{}.csv", backend.label())),
        &timing,
        wall,
    )?;
    println!(
        "backend = {}\nblocks = {}\nwall_seconds = {wall:.3}",
        backend.label(),
        coarse.layout.n_blocks()
    );
    Ok(())
}

/// Rebuild the block layout of a stored coarse lattice field.
fn layout_from_grid(grid: &GridSpec) -> Result<BlockLayout> {
    let (nx, ny, nz) = grid.dims;
    if nx != ny || nx != nz || nx < 2 {
        return Err(Error::format("coarse field lattice must be cubic"));
    }
    let spacing = grid.cell;
    Ok(BlockLayout {
        domain_side: (nx - 1) as f64 * spacing,
        block_size: 2.0 * spacing,
        spacing,
        counts: nx,
    })
}

/// Outflow Y and domain-level equivalent tensor of one coarse field.
fn macro_quantities(config: &RunConfig, coarse_file: &Path) -> Result<[f64; 7]> {
    let field = read_tensor_grid(BufReader::new(File::open(coarse_file)?))?;
    let layout = layout_from_grid(&field.grid)?;
    let coarse = CoarseField { layout, field };
    let res = config.coarse.resolution;
    let cell = layout.domain_side / res as f64;
    let grid = GridSpec::new(Point3::origin(), cell, (res, res, res))?;
    let interpolated = interpolate_coarse(&coarse, &grid)?;
    let (y, _) = solve_constraint(&interpolated, config.domain.height, config.solver.tolerance)?;
    let eq = homogenize_block(&interpolated, config.solver.tolerance)?;
    Ok([
        y, eq.voigt[0], eq.voigt[1], eq.voigt[2], eq.voigt[3], eq.voigt[4], eq.voigt[5],
    ])
}

/// NRMSE across a batch with the population-std convention; an exact match
/// reports 0 even for degenerate batches.
fn batch_nrmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    let n = targets.len();
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(0.0);
    }
    let mean = targets.iter().sum::<f64>() / n as f64;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
    if var > 0.0 {
        return Ok((mse / var).sqrt());
    }
    // Degenerate batch (e.g. a single sample): fall back to mean-relative
    // RMSE so small report groups stay meaningful.
    if mean != 0.0 {
        return Ok(mse.sqrt() / mean.abs());
    }
    Err(Error::data(
        "targets are identically zero but predictions disagree",
    ))
}

/// Collect one `.tgrd` file, or all `.tgrd` files of a directory in name
/// order.
fn coarse_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tgrd"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(format!(
                "no .tgrd files in {}",
                path.display()
            )));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// `benchmark`: compare numerical and surrogate coarse fields through the
/// macro-scale Constraint (outflow Y) and Anisotropy (K^eq_UP) problems.
pub fn cmd_benchmark(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let targets_files = coarse_files(&out.join(&config.paths.coarse_numerical))?;
    let pred_files = coarse_files(&out.join(&config.paths.coarse_surrogate))?;
    if targets_files.len() != pred_files.len() {
        return Err(Error::parameter(
            "numerical and surrogate inputs differ in sample count",
        ));
    }
    let mut targets = Vec::new();
    let mut preds = Vec::new();
    for (t, p) in targets_files.iter().zip(&pred_files) {
        targets.push(macro_quantities(config, t)?);
        preds.push(macro_quantities(config, p)?);
    }
    let names = ["Y", "k_xx", "k_yy", "k_zz", "k_yz", "k_xz", "k_xy"];
    let mut w = BufWriter::new(File::create(out.join("benchmark.csv"))?);
    writeln!(w, "quantity,nrmse")?;
    println!("samples = {}", targets.len());
    for (q, name) in names.iter().enumerate() {
        let t: Vec<f64> = targets.iter().map(|r| r[q]).collect();
        let p: Vec<f64> = preds.iter().map(|r| r[q]).collect();
        let nrmse = batch_nrmse(&p, &t)?;
        writeln!(w, "{name},{nrmse:.12e}")?;
        println!("{name} NRMSE = {nrmse:.6e}");
    }
    w.flush()?;
    Ok(())
}

/// `build-dataset`: generate homogenization samples, split them, fit the
/// training statistics, and write the dataset directory.
pub fn cmd_build_dataset(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let sample_config = config.sample_config()?;
    let samples = generate_dataset(config.seed, config.dataset.count, &sample_config)?;
    let splits = split_dataset(samples.len(), config.dataset.split_seed)?;
    let mut manifest = DatasetManifest {
        count: samples.len(),
        resolution: config.dataset.resolution,
        config_hash: sample_config.hash(),
        splits: Vec::new(),
        stats: None,
    };
    manifest.set_splits(&splits)?;
    let train_normalized: Vec<DatasetSample> = splits
        .train
        .iter()
        .map(|i| normalize_sample(&samples[*i]))
        .collect();
    manifest.stats = Some(fit_stats(&train_normalized)?);
    let dir = out.join(&config.paths.dataset_dir);
    dataset::write_dataset(&samples, &manifest, &dir)?;
    println!(
        "samples = {}\ntrain/val/test = {}/{}/{}\ndirectory = {}",
        samples.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(())
}

fn write_stats(path: &Path, stats: &NormalizationStats) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (side, block) in [("input", &stats.input), ("output", &stats.output)] {
        for c in 0..6 {
            writeln!(w, "{side}_mean_{c} = {}", block[c].mean)?;
            writeln!(w, "{side}_std_{c} = {}", block[c].std)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_stats(path: &Path) -> Result<NormalizationStats> {
    let text = std::fs::read_to_string(path)?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("stats entry `{line}` is not a number")))?;
            fields.insert(k.trim().to_string(), value);
        }
    }
    let get = |key: String| -> Result<f64> {
        fields
            .get(&key)
            .copied()
            .ok_or_else(|| Error::format(format!("stats file is missing `{key}`")))
    };
    let mut input = [Stat { mean: 0.0, std: 1.0 }; 6];
    let mut output = input;
    for (side, block) in [("input", &mut input), ("output", &mut output)] {
        for c in 0..6 {
            block[c].mean = get(format!("{side}_mean_{c}"))?;
            block[c].std = get(format!("{side}_std_{c}"))?;
        }
    }
    Ok(NormalizationStats { input, output })
}

/// Standardized network input/target pairs for a list of sample indices.
fn prepare_split(
    samples: &[DatasetSample],
    indices: &[usize],
    stats: &NormalizationStats,
) -> Result<(Vec<Tensor4D>, Vec<[f64; 6]>)> {
    let mut inputs = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let normalized = normalize_sample(&samples[i]);
        let standardized = standardize_field(&normalized.input, &stats.input);
        inputs.push(Tensor4D::from_tensor_grid(&standardized)?);
        targets.push(standardize_voigt(&normalized.target.voigt, &stats.output));
    }
    Ok((inputs, targets))
}

/// `train`: fit the surrogate on the dataset's training split and save
/// weights, statistics, and the epoch history.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let dir = out.join(&config.paths.dataset_dir);
    let (samples, manifest) = dataset::read_dataset(&dir)?;
    let stats = manifest
        .stats
        .clone()
        .ok_or_else(|| Error::data("dataset has no normalization statistics"))?;
    if manifest.splits.is_empty() {
        return Err(Error::data("dataset has no recorded splits"));
    }
    let (train_x, train_y) = prepare_split(&samples, &manifest.split_indices(0), &stats)?;
    let (val_x, val_y) = prepare_split(&samples, &manifest.split_indices(1), &stats)?;

    let net_config = NetworkConfig {
        input_resolution: manifest.resolution,
        input_channels: 6,
        conv_channels: config.surrogate.conv_channels.clone(),
        fc_widths: config.surrogate.fc_widths.clone(),
        output_dim: 6,
    };
    let mut network = init(&net_config, config.train.seed)?;
    let history = train(
        &mut network,
        &train_x,
        &train_y,
        &val_x,
        &val_y,
        &config.train_config(),
    )?;

    save_weights(&network, &out.join(&config.paths.weights))?;
    write_stats(&out.join(&config.paths.stats), &stats)?;
    let mut w = BufWriter::new(File::create(out.join(&config.paths.history))?);
    writeln!(w, "epoch,train_mse,val_mse,lr")?;
    for r in &history {
        writeln!(w, "{},{:.12e},{:.12e},{:.12e}", r.epoch, r.train_mse, r.val_mse, r.lr)?;
    }
    w.flush()?;
    let best = history.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    println!(
        "epochs = {}\nbest_val_mse = {best:.6e}\nweights = {}",
        history.len(),
        out.join(&config.paths.weights).display()
    );
    Ok(())
}

/// `predict`: apply the trained surrogate to the dataset's test split and
/// write target-vs-prediction pairs.
pub fn cmd_predict(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let network = load_weights(&out.join(&config.paths.weights))?;
    let stats = read_stats(&out.join(&config.paths.stats))?;
    let dir = out.join(&config.paths.dataset_dir);
    let (samples, manifest) = dataset::read_dataset(&dir)?;
    let indices = if manifest.splits.is_empty() {
        (0..samples.len()).collect()
    } else {
        manifest.split_indices(2)
    };
    if indices.is_empty() {
        return Err(Error::data("dataset test split is empty"));
    }
    let mut w = BufWriter::new(File::create(out.join(&config.paths.predictions))?);
    writeln!(
        w,
        "id,p30,corr_len,class,t_xx,t_yy,t_zz,t_yz,t_xz,t_xy,p_xx,p_yy,p_zz,p_yz,p_xz,p_xy"
    )?;
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for &i in &indices {
        let s = &samples[i];
        let out_tensor = predict_equivalent(&network, &stats, &s.input, s.baseline)?;
        write!(w, "{},{},{},{}", i, s.meta.p30, s.meta.corr_len, s.meta.class)?;
        for v in &s.target.voigt {
            write!(w, ",{v:.12e}")?;
        }
        for v in &out_tensor.voigt {
            write!(w, ",{v:.12e}")?;
        }
        writeln!(w)?;
        preds.push(out_tensor.voigt);
        targets.push(s.target.voigt);
    }
    w.flush()?;
    println!("predictions = {}", indices.len());
    if targets.len() >= 2 {
        if let Ok((_, mean)) = dataset::nrmse(&preds, &targets) {
            println!("mean_nrmse = {mean:.6e}");
        }
    }
    Ok(())
}

struct PredictionRow {
    p30: f64,
    corr_len: f64,
    target: [f64; 6],
    pred: [f64; 6],
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 16 {
            return Err(Error::format(format!(
                "predictions line {} has {} fields, expected 16",
                ln + 1,
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(format!("bad number `{s}` in predictions file")))
        };
        let mut target = [0.0; 6];
        let mut pred = [0.0; 6];
        for c in 0..6 {
            target[c] = num(parts[4 + c])?;
            pred[c] = num(parts[10 + c])?;
        }
        rows.push(PredictionRow {
            p30: num(parts[1])?,
            corr_len: num(parts[2])?,
            target,
            pred,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("predictions file has no rows"));
    }
    Ok(rows)
}

/// Per-component NRMSE of a group of rows (zero-error groups report 0).
fn group_nrmse(rows: &[&PredictionRow]) -> Result<[f64; 7]> {
    let mut out = [0.0; 7];
    let mut total = 0.0;
    for c in 0..6 {
        let p: Vec<f64> = rows.iter().map(|r| r.pred[c]).collect();
        let t: Vec<f64> = rows.iter().map(|r| r.target[c]).collect();
        out[c] = batch_nrmse(&p, &t)?;
        total += out[c];
    }
    out[6] = total / 6.0;
    Ok(out)
}

fn write_grouped(
    path: &Path,
    key_name: &str,
    rows: &[PredictionRow],
    key: impl Fn(&PredictionRow) -> f64,
) -> Result<()> {
    let mut keys: Vec<f64> = rows.iter().map(&key).collect();
    keys.sort_by(f64::total_cmp);
    keys.dedup();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "{key_name},count,nrmse_xx,nrmse_yy,nrmse_zz,nrmse_yz,nrmse_xz,nrmse_xy,nrmse_mean"
    )?;
    for k in keys {
        let group: Vec<&PredictionRow> = rows.iter().filter(|r| key(r) == k).collect();
        let n = group_nrmse(&group)?;
        write!(w, "{k},{}", group.len())?;
        for v in n {
            write!(w, ",{v:.12e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// `report`: summarize predictions as overall NRMSE plus NRMSE grouped by
/// correlation length and by fracture intensity.
pub fn cmd_report(config: &RunConfig, out: &Path) -> Result<()> {
    config.echo(out)?;
    let rows = read_predictions(&out.join(&config.paths.predictions))?;
    let all: Vec<&PredictionRow> = rows.iter().collect();
    let overall = group_nrmse(&all)?;
    let names = ["k_xx", "k_yy", "k_zz", "k_yz", "k_xz", "k_xy", "mean"];
    let mut w = BufWriter::new(File::create(out.join("report.csv"))?);
    writeln!(w, "component,nrmse")?;
    for (name, v) in names.iter().zip(&overall) {
        writeln!(w, "{name},{v:.12e}")?;
        println!("{name} NRMSE = {v:.6e}");
    }
    w.flush()?;
    write_grouped(&out.join("nrmse_by_lambda.csv"), "corr_len", &rows, |r| {
        r.corr_len
    })?;
    write_grouped(&out.join("nrmse_by_p30.csv"), "p30", &rows, |r| r.p30)?;
    Ok(())
}
