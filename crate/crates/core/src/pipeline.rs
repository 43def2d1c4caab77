//! End-to-end FitzHugh–Nagumo fusion experiment, split into stages that
//! communicate through files.
//!
//! Stage outputs inside a run directory:
//!
//! ```text
//! data/   tilde.csv hat.csv joint_tilde.csv joint_hat.csv
//!         heldout_tilde.csv heldout_hat.csv pca_basis.json pca_modes.csv
//!         metadata.json [tilde_fields.bin]
//! model/  tilde/ hat/ (decompositions + whiten.json) fusion/ (fusion model)
//! report/ prediction.csv report_<window>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_nodes_quadtree, AffineDictionary, AnyDictionary, MlsDictionary, RbfDictionary, DEFAULT_COVER_FACTOR};
use crate::edmd::{fit, KoopmanDecomposition, DEFAULT_SVD_TOL};
use crate::error::{Error, Result};
use crate::fhn::{base_state, generate_trajectories_from, trajectory_seed, FhnParams, FieldState, Trajectory, TrajectoryConfig};
use crate::fusion::{build_fusion_model, FusionConfig, FusionModel};
use crate::io;
use crate::measurements::{compute_pca, pca_series, pointwise_series, stacked_snapshots, whiten, MeasurementSeries, PcaBasis, WhitenTransform};
use crate::points::PointSet;

/// Dictionary used for one sensor set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionarySpec {
    /// MLS shape functions on quadtree nodes.
    Mls { max_per_cell: usize, cover_factor: f64 },
    /// Gaussian RBFs centred on an evenly strided subset of the training
    /// points, plus a constant.
    Rbf { centers: usize, shape_parameter: f64 },
    /// Constant and coordinate functions.
    Affine,
}

impl DictionarySpec {
    pub fn mls(max_per_cell: usize) -> Self {
        DictionarySpec::Mls { max_per_cell, cover_factor: DEFAULT_COVER_FACTOR }
    }

    pub fn build(&self, points: &PointSet<f64>) -> Result<AnyDictionary<f64>> {
        Ok(match *self {
            DictionarySpec::Mls { max_per_cell, cover_factor } => {
                AnyDictionary::Mls(MlsDictionary::new(build_nodes_quadtree(points, max_per_cell, cover_factor)?)?)
            }
            DictionarySpec::Rbf { centers, shape_parameter } => {
                if centers == 0 || centers > points.len() {
                    return Err(Error::InvalidParameter(format!(
                        "RBF center count must be in 1..={}, got {centers}",
                        points.len()
                    )));
                }
                let c = PointSet::from_rows(points.dim(), (0..centers).map(|i| points.row(i * points.len() / centers)))?;
                AnyDictionary::Rbf(RbfDictionary::new(c, shape_parameter)?)
            }
            DictionarySpec::Affine => AnyDictionary::Affine(AffineDictionary { dim: points.dim() }),
        })
    }
}

/// Locations of stage outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl RunPaths {
    pub fn under(root: &Path) -> Self {
        Self { data_dir: root.join("data"), model_dir: root.join("model"), report_dir: root.join("report") }
    }
}

impl Default for RunPaths {
    fn default() -> Self {
        Self::under(Path::new("run"))
    }
}

/// Every knob of the experiment. Defaults reproduce the published protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: RunPaths,
    pub seed: u64,
    pub fhn: FhnParams<f64>,
    /// Batch settings shared by both training sets; `rng_seed` is replaced
    /// by a per-batch seed derived from `seed`.
    pub trajectories: TrajectoryConfig<f64>,
    /// Snapshot pairs of each held-out trajectory.
    pub heldout_pairs: usize,
    pub heldout_trajectories: usize,
    pub pca_modes: usize,
    /// Position of the point sensor.
    pub point_location: f64,
    pub dictionary_tilde: DictionarySpec,
    pub dictionary_hat: DictionarySpec,
    pub svd_tol: f64,
    pub fusion: FusionConfig<f64>,
    /// Evaluation windows `[0, w]`.
    pub windows: Vec<f64>,
    /// Also store the tilde batch's raw fields (input of the `pca` stage).
    pub keep_fields: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: RunPaths::default(),
            seed: 0,
            fhn: FhnParams::default(),
            trajectories: TrajectoryConfig::default(),
            heldout_pairs: 2000,
            heldout_trajectories: 1,
            pca_modes: 3,
            point_location: 10.0,
            dictionary_tilde: DictionarySpec::mls(25),
            dictionary_hat: DictionarySpec::mls(25),
            svd_tol: DEFAULT_SVD_TOL,
            fusion: FusionConfig::default(),
            windows: vec![400.0, 4000.0],
            keep_fields: false,
        }
    }
}

/// Seeds of the four independent simulation batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSeeds {
    pub tilde: u64,
    pub hat: u64,
    pub joint: u64,
    pub heldout: u64,
}

impl RunConfig {
    pub fn batch_seeds(&self) -> BatchSeeds {
        BatchSeeds {
            tilde: trajectory_seed(self.seed, 0),
            hat: trajectory_seed(self.seed, 1),
            joint: trajectory_seed(self.seed, 2),
            heldout: trajectory_seed(self.seed, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fhn.validate()?;
        self.trajectories.validate(&self.fhn)?;
        if self.pca_modes == 0 {
            return Err(Error::InvalidParameter("pca_modes must be positive".into()));
        }
        if self.heldout_pairs == 0 || self.heldout_trajectories == 0 {
            return Err(Error::InvalidParameter("held-out run must contain at least one pair".into()));
        }
        if !(0.0..=self.fhn.domain_length).contains(&self.point_location) {
            return Err(Error::InvalidParameter(format!("point_location {} outside the domain", self.point_location)));
        }
        if self.windows.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter("evaluation windows must be positive".into()));
        }
        if !(self.svd_tol > 0.0 && self.svd_tol < 1.0) {
            return Err(Error::InvalidParameter("svd_tol must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything the `simulate` stage produces.
#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub tilde: MeasurementSeries<f64>,
    pub hat: MeasurementSeries<f64>,
    pub joint_tilde: MeasurementSeries<f64>,
    pub joint_hat: MeasurementSeries<f64>,
    pub heldout_tilde: MeasurementSeries<f64>,
    pub heldout_hat: MeasurementSeries<f64>,
    pub basis: PcaBasis<f64>,
    pub base_state: FieldState<f64>,
    pub tilde_fields: Option<Vec<Trajectory<f64>>>,
}

/// Provenance written next to the datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetadata {
    pub format_version: u32,
    pub seed: u64,
    pub batch_seeds: BatchSeeds,
    pub sampling_interval: f64,
    pub grid: Vec<f64>,
    pub fhn: FhnParams<f64>,
    pub trajectories: TrajectoryConfig<f64>,
    pub pca_energy_fraction: f64,
    pub base_state_v: Vec<f64>,
    pub base_state_w: Vec<f64>,
}

/// Simulates the two training batches, the joint run and the held-out run.
pub fn simulate(config: &RunConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let p = &config.fhn;
    let seeds = config.batch_seeds();
    let base = base_state(config.trajectories.base_state, p)?;
    let dt = config.trajectories.sampling_interval;
    let batch = |seed: u64, n: usize, pairs: usize| {
        let cfg = TrajectoryConfig { rng_seed: seed, n_trajectories: n, pairs_per_trajectory: pairs, ..config.trajectories.clone() };
        generate_trajectories_from(&cfg, p, &base)
    };

    let tilde_runs = batch(seeds.tilde, config.trajectories.n_trajectories, config.trajectories.pairs_per_trajectory)?;
    let basis = compute_pca(&stacked_snapshots(&tilde_runs)?, config.pca_modes)?;
    let tilde = pca_series(&tilde_runs, &basis, dt)?;
    let tilde_fields = config.keep_fields.then_some(tilde_runs);

    let hat_runs = batch(seeds.hat, config.trajectories.n_trajectories, config.trajectories.pairs_per_trajectory)?;
    let hat = pointwise_series(&hat_runs, config.point_location, p.domain_length, dt)?;
    drop(hat_runs);

    // The joint pair is the first snapshot of the first trajectory of a
    // third, short run.
    let mut joint_runs = batch(seeds.joint, 1, 1)?;
    joint_runs[0].states.truncate(1);
    let joint_tilde = pca_series(&joint_runs, &basis, dt)?;
    let joint_hat = pointwise_series(&joint_runs, config.point_location, p.domain_length, dt)?;

    let heldout_runs = batch(seeds.heldout, config.heldout_trajectories, config.heldout_pairs)?;
    let heldout_tilde = pca_series(&heldout_runs, &basis, dt)?;
    let heldout_hat = pointwise_series(&heldout_runs, config.point_location, p.domain_length, dt)?;

    Ok(SimulationOutput { tilde, hat, joint_tilde, joint_hat, heldout_tilde, heldout_hat, basis, base_state: base, tilde_fields })
}

pub fn write_simulation(dir: &Path, config: &RunConfig, out: &SimulationOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_series_csv(&dir.join("tilde.csv"), &out.tilde)?;
    io::write_series_csv(&dir.join("hat.csv"), &out.hat)?;
    io::write_series_csv(&dir.join("joint_tilde.csv"), &out.joint_tilde)?;
    io::write_series_csv(&dir.join("joint_hat.csv"), &out.joint_hat)?;
    io::write_series_csv(&dir.join("heldout_tilde.csv"), &out.heldout_tilde)?;
    io::write_series_csv(&dir.join("heldout_hat.csv"), &out.heldout_hat)?;
    write_pca(dir, &out.basis)?;
    if let Some(fields) = &out.tilde_fields {
        io::write_fields(&dir.join("tilde_fields.bin"), fields)?;
    }
    io::write_json(
        &dir.join("metadata.json"),
        &SimulationMetadata {
            format_version: io::FORMAT_VERSION,
            seed: config.seed,
            batch_seeds: config.batch_seeds(),
            sampling_interval: config.trajectories.sampling_interval,
            grid: config.fhn.grid(),
            fhn: config.fhn.clone(),
            trajectories: config.trajectories.clone(),
            pca_energy_fraction: out.basis.energy_fraction,
            base_state_v: out.base_state.v.clone(),
            base_state_w: out.base_state.w.clone(),
        },
    )
}

/// `pca_basis.json` plus plot-ready `pca_modes.csv` (one column per mode,
/// `v` nodes first, then `w`).
pub fn write_pca(dir: &Path, basis: &PcaBasis<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_json(&dir.join("pca_basis.json"), basis)?;
    let mut w = csv::Writer::from_path(dir.join("pca_modes.csv"))?;
    w.write_record((1..=basis.retained).map(|i| format!("mode{i}")))?;
    for j in 0..basis.dim() {
        w.write_record(basis.modes.iter().map(|m| m[j].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// PCA of stored field snapshots, projected back onto the same snapshots.
pub fn pca_stage(fields: &[Trajectory<f64>], modes: usize, dt: f64) -> Result<(PcaBasis<f64>, MeasurementSeries<f64>)> {
    let basis = compute_pca(&stacked_snapshots(fields)?, modes)?;
    let series = pca_series(fields, &basis, dt)?;
    Ok((basis, series))
}

/// A decomposition together with the whitening it was fitted under.
#[derive(Clone, Debug)]
pub struct EdmdOutput {
    pub decomposition: KoopmanDecomposition<f64>,
    pub whiten: WhitenTransform<f64>,
}

/// Whitens the series' snapshot pairs and fits the Koopman approximation.
pub fn edmd_stage(series: &MeasurementSeries<f64>, spec: &DictionarySpec, svd_tol: f64) -> Result<EdmdOutput> {
    let (white, transform) = whiten(&series.pairs()?)?;
    let dictionary = spec.build(&white.pairs.x)?;
    let decomposition = fit(&white.pairs, dictionary, svd_tol)?;
    Ok(EdmdOutput { decomposition, whiten: transform })
}

pub fn write_edmd(dir: &Path, out: &EdmdOutput) -> Result<()> {
    io::write_decomposition(dir, &out.decomposition)?;
    io::write_json(&dir.join("whiten.json"), &out.whiten)
}

pub fn read_edmd(dir: &Path) -> Result<EdmdOutput> {
    Ok(EdmdOutput { decomposition: io::read_decomposition(dir)?, whiten: io::read_json(&dir.join("whiten.json"))? })
}

/// Builds the model translating `hat` measurements to `tilde` ones. The
/// inverse map is sampled on every snapshot of the tilde training series.
pub fn fuse_build(
    tilde: EdmdOutput,
    hat: EdmdOutput,
    joint_tilde: &MeasurementSeries<f64>,
    joint_hat: &MeasurementSeries<f64>,
    training_tilde: &MeasurementSeries<f64>,
    config: &FusionConfig<f64>,
) -> Result<FusionModel<f64>> {
    if joint_tilde.len() != joint_hat.len() {
        return Err(Error::InvalidParameter(format!(
            "joint sets differ in size: {} target rows, {} source rows",
            joint_tilde.len(),
            joint_hat.len()
        )));
    }
    build_fusion_model(
        tilde.decomposition,
        hat.decomposition,
        tilde.whiten,
        hat.whiten,
        &joint_tilde.values,
        &joint_hat.values,
        &training_tilde.values,
        config,
    )
}

/// Component name of the untrusted-point flag in prediction files.
pub const FLAG_COLUMN: &str = "flagged";

/// Translates every row of `input`. The output keeps the `trajectory,t`
/// keys and appends `phi1`, `angle` and [`FLAG_COLUMN`] (1 = not trusted).
pub fn fuse_apply(model: &FusionModel<f64>, target_components: &[String], input: &MeasurementSeries<f64>) -> Result<MeasurementSeries<f64>> {
    if input.dim() != model.source_dim() {
        return Err(Error::DimensionMismatch { expected: model.source_dim(), found: input.dim() });
    }
    let mut components = target_components.to_vec();
    components.extend(["phi1".to_string(), "angle".to_string(), FLAG_COLUMN.to_string()]);
    let estimates = model.fuse_all(&input.values)?;
    let mut out = MeasurementSeries::new("prediction", components, input.dt);
    let mut row = Vec::with_capacity(target_components.len() + 3);
    for (i, e) in estimates.iter().enumerate() {
        row.clear();
        row.extend_from_slice(&e.values);
        row.extend([e.phi1, e.angle, if e.trusted { 0.0 } else { 1.0 }]);
        out.push(input.trajectory[i], input.time[i], &row)?;
    }
    Ok(out)
}

/// Matched eigenvalue pair as reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueMatch {
    pub role: String,
    pub index_tilde: usize,
    pub index_hat: usize,
    pub lambda_tilde: Complex<f64>,
    pub lambda_hat: Complex<f64>,
    pub gap: f64,
    pub alpha: Option<Complex<f64>>,
}

/// Relative reconstruction errors over one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub window: [f64; 2],
    pub norm: String,
    pub components: Vec<String>,
    /// `e_i` over every point in the window.
    pub errors: Vec<f64>,
    /// `e_i` restricted to trusted points (intervals with an untrusted end
    /// are dropped from both integrals).
    pub errors_trusted: Vec<f64>,
    pub points: usize,
    pub flagged: usize,
    pub eigenvalues: Vec<EigenvalueMatch>,
}

impl ErrorReport {
    /// Adds the matched eigenvalues and registration constants of `model`.
    pub fn with_model(mut self, model: &FusionModel<f64>) -> Self {
        self.eigenvalues = [("decaying", &model.decaying), ("oscillatory", &model.oscillatory)]
            .into_iter()
            .map(|(role, p)| EigenvalueMatch {
                role: role.into(),
                index_tilde: p.index_tilde,
                index_hat: p.index_hat,
                lambda_tilde: p.lambda_tilde,
                lambda_hat: p.lambda_hat,
                gap: p.eigenvalue_gap,
                alpha: p.alpha,
            })
            .collect();
        self
    }
}

/// `e_i = ||a_true - a_pred|| / ||a_true||` with `||f||^2 = integral of f^2
/// over [0, window]`, trapezoidal in time, summed over trajectories.
///
/// Rows are matched on `(trajectory, t)`; components are matched by name.
/// A [`FLAG_COLUMN`] in `prediction` marks untrusted rows.
pub fn evaluate(prediction: &MeasurementSeries<f64>, truth: &MeasurementSeries<f64>, window: f64) -> Result<ErrorReport> {
    if prediction.len() != truth.len() {
        return Err(Error::InvalidParameter(format!(
            "prediction has {} rows, truth has {}",
            prediction.len(),
            truth.len()
        )));
    }
    let columns: Vec<usize> = truth
        .components
        .iter()
        .map(|c| {
            prediction
                .components
                .iter()
                .position(|p| p == c)
                .ok_or_else(|| Error::InvalidParameter(format!("prediction lacks component '{c}'")))
        })
        .collect::<Result<_>>()?;
    let flag = prediction.components.iter().position(|c| c == FLAG_COLUMN);
    for i in 0..truth.len() {
        let tol = 1e-9 * truth.time[i].abs().max(1.0);
        if prediction.trajectory[i] != truth.trajectory[i] || (prediction.time[i] - truth.time[i]).abs() > tol {
            return Err(Error::InvalidParameter(format!(
                "timestamp mismatch at row {i}: prediction ({}, {}) vs truth ({}, {})",
                prediction.trajectory[i], prediction.time[i], truth.trajectory[i], truth.time[i]
            )));
        }
    }

    let d = truth.dim();
    let in_window = |i: usize| truth.time[i] >= -1e-12 && truth.time[i] <= window * (1.0 + 1e-12);
    let trusted = |i: usize| flag.is_none_or(|f| prediction.values.row(i)[f] == 0.0);
    let sq = |i: usize, k: usize| {
        let t = truth.values.row(i)[k];
        let e = t - prediction.values.row(i)[columns[k]];
        (e * e, t * t)
    };
    let (mut num, mut den) = (vec![0.0; d], vec![0.0; d]);
    let (mut num_t, mut den_t) = (vec![0.0; d], vec![0.0; d]);
    let (mut points, mut flagged) = (0, 0);
    for i in 0..truth.len() {
        if !in_window(i) {
            continue;
        }
        points += 1;
        if !trusted(i) {
            flagged += 1;
        }
        if i == 0 || truth.trajectory[i - 1] != truth.trajectory[i] || !in_window(i - 1) {
            continue;
        }
        let h = 0.5 * (truth.time[i] - truth.time[i - 1]);
        let both = trusted(i) && trusted(i - 1);
        for k in 0..d {
            let (e0, t0) = sq(i - 1, k);
            let (e1, t1) = sq(i, k);
            num[k] += h * (e0 + e1);
            den[k] += h * (t0 + t1);
            if both {
                num_t[k] += h * (e0 + e1);
                den_t[k] += h * (t0 + t1);
            }
        }
    }
    if points == 0 {
        return Err(Error::InvalidParameter(format!("no samples inside the window [0, {window}]")));
    }
    let ratio = |n: &[f64], d: &[f64]| n.iter().zip(d).map(|(n, d)| if *d > 0.0 { (n / d).sqrt() } else { f64::NAN }).collect();
    Ok(ErrorReport {
        window: [0.0, window],
        norm: "relative L2 in time, trapezoidal rule".into(),
        components: truth.components.clone(),
        errors: ratio(&num, &den),
        errors_trusted: ratio(&num_t, &den_t),
        points,
        flagged,
        eigenvalues: Vec::new(),
    })
}

pub fn report_file_name(window: f64) -> String {
    format!("report_{window}.json")
}

/// Outcome of [`reproduce`].
#[derive(Clone, Debug)]
pub struct Reproduction {
    pub pca_energy_fraction: f64,
    pub tilde: KoopmanDecomposition<f64>,
    pub hat: KoopmanDecomposition<f64>,
    pub model: FusionModel<f64>,
    pub reports: Vec<ErrorReport>,
}

/// Runs every stage in order, writing the same files the individual
/// subcommands write.
pub fn reproduce(config: &RunConfig) -> Result<Reproduction> {
    let sim = simulate(config)?;
    let paths = &config.paths;
    write_simulation(&paths.data_dir, config, &sim)?;

    let tilde = edmd_stage(&sim.tilde, &config.dictionary_tilde, config.svd_tol)?;
    write_edmd(&paths.model_dir.join("tilde"), &tilde)?;
    let hat = edmd_stage(&sim.hat, &config.dictionary_hat, config.svd_tol)?;
    write_edmd(&paths.model_dir.join("hat"), &hat)?;

    let (tilde_dec, hat_dec) = (tilde.decomposition.clone(), hat.decomposition.clone());
    let model = fuse_build(tilde, hat, &sim.joint_tilde, &sim.joint_hat, &sim.tilde, &config.fusion)?;
    io::write_fusion_model(&paths.model_dir.join("fusion"), &model, &sim.tilde.components)?;

    let prediction = fuse_apply(&model, &sim.tilde.components, &sim.heldout_hat)?;
    fs::create_dir_all(&paths.report_dir)?;
    io::write_series_csv(&paths.report_dir.join("prediction.csv"), &prediction)?;
    let mut reports = Vec::new();
    for &w in &config.windows {
        let report = evaluate(&prediction, &sim.heldout_tilde, w)?.with_model(&model);
        io::write_json(&paths.report_dir.join(report_file_name(w)), &report)?;
        reports.push(report);
    }
    Ok(Reproduction { pca_energy_fraction: sim.basis.energy_fraction, tilde: tilde_dec, hat: hat_dec, model, reports })
}
