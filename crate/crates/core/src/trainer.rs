//! Adam optimisation of a Gaussian cloud against a measured tilt series,
//! with periodic pruning and densification.

use std::io::Write;

use log::{debug, warn};
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::NPARAM;
use crate::error::{Error, Result};
use crate::gaussians::{inverse_softplus, quat_to_matrix, GaussianCloud, ScaleBounds};
use crate::geometry::TiltGeometry;
use crate::losses::{total_loss, LossOptions, LossWeights, TvMode};
use crate::splatter::{prepare_cloud, CloudGradients, PreparedView, RenderOptions};
use crate::volume::{GridSpec, ProjectionStack};
use crate::voxelizer::PreparedVolume;

/// Per-group Adam step sizes. The position rate is relative to the scene
/// extent; the others are absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub denza_raw: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { position: 2e-3, log_scale: 5e-3, rotation: 1e-3, denza_raw: 5e-2 }
    }
}

impl LearningRates {
    /// Rate for every slot of the per-Gaussian parameter row.
    pub fn row(&self, scene_extent: f64) -> [f64; NPARAM] {
        let mut r = [0.0; NPARAM];
        r[..3].fill(self.position * scene_extent);
        r[3..6].fill(self.log_scale);
        r[6..10].fill(self.rotation);
        r[10] = self.denza_raw;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub prune_interval: usize,
    pub prune_denza_floor: f64,
    pub densify_interval: usize,
    /// Percentile of mean position-gradient norms above which a Gaussian splits.
    pub densify_percentile: f64,
    /// Last iteration at which densification may run; defaults to 60% of
    /// `iterations`.
    pub densify_until: Option<usize>,
    /// Growth cap as a multiple of the initial Gaussian count.
    pub max_growth: f64,
    /// Grid for the volume regulariser; defaults to a 64³ cube spanning the
    /// detector field of view.
    pub tv_grid: Option<GridSpec>,
    /// Evaluate the volume regulariser every `tv_stride` iterations.
    pub tv_stride: usize,
    pub tv_mode: TvMode,
    pub weights: LossWeights,
    /// Scale clamp; defaults to the bounds for the TV grid extent.
    pub scale_bounds: Option<ScaleBounds>,
    pub use_gamma: bool,
    /// Views rendered per step; `None` uses every view.
    pub views_per_step: Option<usize>,
    pub checkpoint_interval: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            prune_interval: 500,
            prune_denza_floor: 1e-3,
            densify_interval: 500,
            densify_percentile: 90.0,
            densify_until: None,
            max_growth: 4.0,
            tv_grid: None,
            tv_stride: 1,
            tv_mode: TvMode::Axial3,
            weights: LossWeights::default(),
            scale_bounds: None,
            use_gamma: true,
            views_per_step: None,
            checkpoint_interval: 0,
            rng_seed: 0,
        }
    }
}

pub const DEFAULT_TV_DIM: usize = 64;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = [self.lr.position, self.lr.log_scale, self.lr.rotation, self.lr.denza_raw];
        if lr.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("learning rates must be positive: {:?}", self.lr)));
        }
        if self.prune_interval == 0 || self.densify_interval == 0 || self.tv_stride == 0 {
            return Err(Error::Config("prune_interval, densify_interval and tv_stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "invalid Adam constants beta1={} beta2={} epsilon={}",
                self.beta1, self.beta2, self.epsilon
            )));
        }
        if !(0.0..=100.0).contains(&self.densify_percentile) {
            return Err(Error::Config(format!("densify_percentile must lie in [0, 100], got {}", self.densify_percentile)));
        }
        if !(self.max_growth >= 1.0) {
            return Err(Error::Config(format!("max_growth must be at least 1, got {}", self.max_growth)));
        }
        if self.views_per_step == Some(0) {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn densify_until(&self) -> usize {
        self.densify_until.unwrap_or((0.6 * self.iterations as f64) as usize)
    }

    pub fn resolved_tv_grid(&self, geom: &TiltGeometry) -> GridSpec {
        self.tv_grid.unwrap_or_else(|| {
            let det = geom.detector();
            let width = det.pixel_size * det.nu.max(det.nv) as f64;
            GridSpec::centered_cube(DEFAULT_TV_DIM, width / DEFAULT_TV_DIM as f64)
        })
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub n_gaussians: usize,
    pub pixel: f64,
    pub freq: f64,
    pub ssim: f64,
    pub tv3d: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
    pub pruned: usize,
    pub split: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,n_gaussians,pixel,freq,ssim,tv3d,total";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.iteration, r.n_gaussians, r.pixel, r.freq, r.ssim, r.tv3d, r.total
            )?;
        }
        Ok(())
    }
}

/// Optimiser state: the cloud plus everything whose shape tracks it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub m: Vec<[f64; NPARAM]>,
    pub v: Vec<[f64; NPARAM]>,
    /// Adam step counter (drives bias correction).
    pub step: u64,
    pub iteration: usize,
    pub scene_extent: f64,
    pub log: TrainLog,
    grad_norm_sum: Vec<f64>,
    grad_norm_count: Vec<u32>,
    bound_strikes: Vec<u32>,
    seed_count: usize,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, scene_extent: f64) -> Self {
        let n = cloud.len();
        Self {
            cloud,
            m: vec![[0.0; NPARAM]; n],
            v: vec![[0.0; NPARAM]; n],
            step: 0,
            iteration: 0,
            scene_extent,
            log: TrainLog::default(),
            grad_norm_sum: vec![0.0; n],
            grad_norm_count: vec![0; n],
            bound_strikes: vec![0; n],
            seed_count: n,
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Add the position-gradient norms of one step to the densification
    /// statistics.
    pub fn track_gradients(&mut self, grads: &CloudGradients) {
        for (i, g) in grads.d_positions.iter().enumerate() {
            self.grad_norm_sum[i] += Vector3::from(*g).norm();
            self.grad_norm_count[i] += 1;
        }
    }

    fn compact(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        self.cloud.retain_mask(keep);
        filter(&mut self.m, keep);
        filter(&mut self.v, keep);
        filter(&mut self.grad_norm_sum, keep);
        filter(&mut self.grad_norm_count, keep);
        filter(&mut self.bound_strikes, keep);
    }

    fn param_mut(&mut self, i: usize, p: usize) -> &mut f64 {
        match p {
            0..=2 => &mut self.cloud.positions[i][p],
            3..=5 => &mut self.cloud.log_scales[i][p - 3],
            6..=9 => &mut self.cloud.rotations[i][p - 6],
            _ => &mut self.cloud.denza_raw[i],
        }
    }
}

/// One bias-corrected Adam update with per-group learning rates.
pub fn adam_step(state: &mut TrainState, grads: &CloudGradients, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradient rows for {} Gaussians",
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let rates = cfg.lr.row(state.scene_extent);
    for i in 0..state.len() {
        for (p, &lr) in rates.iter().enumerate() {
            let g = grads.get(i, p);
            let m = cfg.beta1 * state.m[i][p] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * state.v[i][p] + (1.0 - cfg.beta2) * g * g;
            state.m[i][p] = m;
            state.v[i][p] = v;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
            *state.param_mut(i, p) -= update;
        }
    }
    Ok(())
}

/// Remove faint Gaussians and those stuck at the scale clamp for more than
/// two consecutive prune events. Returns the number removed.
pub fn prune(state: &mut TrainState, cfg: &TrainConfig, bounds: &ScaleBounds) -> Result<usize> {
    let (lo, hi) = (bounds.min.ln(), bounds.max.ln());
    let tol = 1e-12;
    let mut keep = vec![true; state.len()];
    for (i, k) in keep.iter_mut().enumerate() {
        let at_bound = state.cloud.log_scales[i].iter().any(|&s| s <= lo + tol || s >= hi - tol);
        state.bound_strikes[i] = if at_bound { state.bound_strikes[i] + 1 } else { 0 };
        *k = state.cloud.denza(i) >= cfg.prune_denza_floor && state.bound_strikes[i] <= 2;
    }
    let removed = keep.iter().filter(|k| !**k).count();
    if removed == state.len() {
        return Err(Error::Training { iteration: state.iteration, reason: "pruning would remove every Gaussian".into() });
    }
    if removed > 0 {
        state.compact(&keep);
        debug!("pruned {removed} Gaussians, {} remain", state.len());
    }
    state.log.pruned += removed;
    Ok(removed)
}

/// Split Gaussians whose mean position-gradient norm exceeds the configured
/// percentile. Returns the number of splits.
pub fn densify(state: &mut TrainState, cfg: &TrainConfig) -> usize {
    let n = state.len();
    let mean_norm: Vec<f64> = (0..n)
        .map(|i| {
            let c = state.grad_norm_count[i];
            if c == 0 {
                0.0
            } else {
                state.grad_norm_sum[i] / c as f64
            }
        })
        .collect();
    state.grad_norm_sum.fill(0.0);
    state.grad_norm_count.fill(0);
    if n == 0 {
        return 0;
    }
    let mut sorted = mean_norm.clone();
    sorted.sort_by(f64::total_cmp);
    // Linear interpolation between order statistics.
    let pos = cfg.densify_percentile / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let threshold = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| mean_norm[i] > threshold).collect();
    if candidates.is_empty() {
        return 0;
    }
    let cap = (cfg.max_growth * state.seed_count as f64).floor() as usize;
    let room = cap.saturating_sub(n);
    if room == 0 {
        warn!("densification skipped: cloud already at the growth cap of {cap} Gaussians");
        return 0;
    }
    if candidates.len() > room {
        warn!("densification limited to {room} of {} candidates by the growth cap of {cap}", candidates.len());
        // Keep the strongest candidates, then restore index order.
        candidates.sort_by(|&a, &b| mean_norm[b].total_cmp(&mean_norm[a]).then(a.cmp(&b)));
        candidates.truncate(room);
        candidates.sort_unstable();
    }
    let shrink = 1.6f64.ln();
    for &i in &candidates {
        let ls = state.cloud.log_scales[i];
        let axis = (0..3).max_by(|&a, &b| ls[a].total_cmp(&ls[b]).then(b.cmp(&a))).unwrap();
        let rot = quat_to_matrix(&state.cloud.rotations[i]);
        let offset = 0.5 * ls[axis].exp() * rot.column(axis);
        let p = Vector3::from(state.cloud.positions[i]);
        let child_raw = inverse_softplus(0.5 * state.cloud.denza(i));
        let child_ls = ls.map(|s| s - shrink);
        let q = state.cloud.rotations[i];

        state.cloud.positions[i] = (p + offset).into();
        state.cloud.log_scales[i] = child_ls;
        state.cloud.denza_raw[i] = child_raw;
        state.m[i] = [0.0; NPARAM];
        state.v[i] = [0.0; NPARAM];
        state.bound_strikes[i] = 0;

        state.cloud.push((p - offset).into(), child_ls, q, child_raw);
        state.m.push([0.0; NPARAM]);
        state.v.push([0.0; NPARAM]);
        state.grad_norm_sum.push(0.0);
        state.grad_norm_count.push(0);
        state.bound_strikes.push(0);
    }
    state.log.split += candidates.len();
    debug!("split {} Gaussians, {} total", candidates.len(), state.len());
    candidates.len()
}

/// Hooks for checkpointing and progress reporting.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &LossRecord) {}

    fn on_checkpoint(&mut self, _iteration: usize, _cloud: &GaussianCloud) -> Result<()> {
        Ok(())
    }

    /// Called with the last parameters that produced a finite loss before
    /// training aborts.
    fn on_abort(&mut self, _iteration: usize, _last_good: &GaussianCloud, _reason: &str) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Loss and gradients of one full evaluation.
pub struct StepEval {
    pub record: LossRecord,
    pub grads: CloudGradients,
}

/// Render the chosen views, voxelise when the regulariser is active, and
/// backpropagate the total loss to the cloud.
pub fn evaluate_step(
    cloud: &GaussianCloud,
    stack: &ProjectionStack,
    geom: &TiltGeometry,
    views: &[usize],
    cfg: &TrainConfig,
    tv_grid: Option<&GridSpec>,
    data_range: f64,
) -> Result<StepEval> {
    let duals = prepare_cloud(cloud);
    let opts = RenderOptions { use_gamma: cfg.use_gamma };
    let prepared: Vec<PreparedView> = views.iter().map(|&v| PreparedView::new(&duals, geom, v, opts)).collect();
    let renders: Vec<_> = prepared.iter().map(|p| p.rasterize()).collect();
    let meas: Vec<_> = views.iter().map(|&v| stack.images[v].clone()).collect();
    let vol = tv_grid.map(|g| PreparedVolume::new(&duals, g));
    let vol_data = vol.as_ref().map(|v| v.forward());
    let report = total_loss(
        &renders,
        &meas,
        vol_data.as_ref(),
        &cfg.weights,
        &LossOptions { data_range, tv_mode: cfg.tv_mode },
    )?;
    let record = LossRecord {
        iteration: 0,
        n_gaussians: cloud.len(),
        pixel: report.pixel,
        freq: report.freq,
        ssim: report.ssim,
        tv3d: report.tv3d,
        total: report.total,
    };
    let mut grads = CloudGradients::zeros(cloud.len());
    if record.total.is_finite() {
        let parts: Vec<CloudGradients> = prepared
            .par_iter()
            .zip(&report.grad_images)
            .map(|(p, g)| p.backward(g))
            .collect();
        for p in &parts {
            grads.accumulate(p);
        }
        if let (Some(v), Some(gv)) = (&vol, &report.grad_volume) {
            grads.accumulate(&v.backward(gv));
        }
    }
    Ok(StepEval { record, grads })
}

fn select_views(n: usize, per_step: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_step {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

pub fn train(stack: &ProjectionStack, geom: &TiltGeometry, init: &GaussianCloud, cfg: &TrainConfig) -> Result<(GaussianCloud, TrainLog)> {
    train_with(stack, geom, init, cfg, &mut NoObserver)
}

pub fn train_with(
    stack: &ProjectionStack,
    geom: &TiltGeometry,
    init: &GaussianCloud,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(GaussianCloud, TrainLog)> {
    cfg.validate()?;
    stack.check_geometry(geom)?;
    if init.is_empty() {
        return Err(Error::Config("initial cloud is empty".into()));
    }
    if !init.all_finite() {
        return Err(Error::Config("initial cloud has non-finite parameters".into()));
    }
    if cfg.iterations == 0 {
        return Ok((init.clone(), TrainLog::default()));
    }
    let tv_grid = cfg.resolved_tv_grid(geom);
    let bounds = cfg.scale_bounds.unwrap_or_else(|| ScaleBounds::for_extent(tv_grid.extent()));
    let data_range = stack.max();
    if !(data_range > 0.0) {
        return Err(Error::Config("measured stack has no positive values".into()));
    }
    let densify_until = cfg.densify_until();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = TrainState::new(init.clone(), tv_grid.extent());
    state.cloud.normalize_rotations();
    state.cloud.clamp_scales(&bounds);

    for it in 0..cfg.iterations {
        state.iteration = it;
        let views = select_views(stack.len(), cfg.views_per_step, &mut rng);
        let use_tv = cfg.weights.lambda_3dtv > 0.0 && it % cfg.tv_stride == 0;
        let eval = evaluate_step(&state.cloud, stack, geom, &views, cfg, use_tv.then_some(&tv_grid), data_range)?;
        let mut record = eval.record;
        record.iteration = it;
        if !record.total.is_finite() || !eval.grads.all_finite() {
            let reason = format!("non-finite loss or gradient (total = {})", record.total);
            observer.on_abort(it, &state.cloud, &reason);
            return Err(Error::Training { iteration: it, reason });
        }
        observer.on_record(&record);
        state.log.records.push(record);

        let last_good = state.cloud.clone();
        state.track_gradients(&eval.grads);
        adam_step(&mut state, &eval.grads, cfg)?;
        state.cloud.normalize_rotations();
        state.cloud.clamp_scales(&bounds);
        if !state.cloud.all_finite() {
            let reason = "parameter update produced non-finite values".to_string();
            observer.on_abort(it, &last_good, &reason);
            return Err(Error::Training { iteration: it, reason });
        }

        let done = it + 1;
        if done < cfg.iterations {
            if done % cfg.prune_interval == 0 {
                if let Err(e) = prune(&mut state, cfg, &bounds) {
                    observer.on_abort(it, &state.cloud, &e.to_string());
                    return Err(e);
                }
            }
            if done % cfg.densify_interval == 0 && done <= densify_until {
                densify(&mut state, cfg);
            }
        }
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
            observer.on_checkpoint(done, &state.cloud)?;
        }
    }
    Ok((state.cloud, state.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorGrid;
    use crate::splatter::render_all;

    fn toy_state(values: [f64; 3]) -> TrainState {
        let mut c = GaussianCloud::new();
        c.push([values[0], 0.0, 0.0], [values[1], 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], values[2]);
        TrainState::new(c, 1.0)
    }

    fn toy_grads(g: [f64; 3]) -> CloudGradients {
        let mut out = CloudGradients::zeros(1);
        out.d_positions[0][0] = g[0];
        out.d_log_scales[0][0] = g[1];
        out.d_denza_raw[0] = g[2];
        out
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = toy_state([0.3, -0.2, 1.1]);
        let before = s.cloud.clone();
        adam_step(&mut s, &CloudGradients::zeros(1), &TrainConfig::default()).unwrap();
        assert_eq!(s.cloud, before);
    }

    #[test]
    fn first_step_is_sign_times_rate() {
        let cfg = TrainConfig { epsilon: 1e-15, ..Default::default() };
        let mut s = toy_state([0.0, 0.0, 0.0]);
        adam_step(&mut s, &toy_grads([3.0, -0.25, 1e-4]), &cfg).unwrap();
        let rates = cfg.lr.row(1.0);
        assert!((s.cloud.positions[0][0] + rates[0]).abs() < 1e-12);
        assert!((s.cloud.log_scales[0][0] - rates[3]).abs() < 1e-12);
        assert!((s.cloud.denza_raw[0] + rates[10]).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_hand_moments() {
        let cfg = TrainConfig::default();
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
        let rates = cfg.lr.row(1.0);
        let lr = [rates[0], rates[3], rates[10]];
        let x0 = [0.5, -0.1, 0.2];
        let g1 = [0.4, -1.5, 2.0];
        let g2 = [-0.3, 0.7, 0.05];
        let mut s = toy_state(x0);
        adam_step(&mut s, &toy_grads(g1), &cfg).unwrap();
        adam_step(&mut s, &toy_grads(g2), &cfg).unwrap();
        for k in 0..3 {
            let m1 = (1.0 - b1) * g1[k];
            let v1 = (1.0 - b2) * g1[k] * g1[k];
            let x1 = x0[k] - lr[k] * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
            let m2 = b1 * m1 + (1.0 - b1) * g2[k];
            let v2 = b2 * v1 + (1.0 - b2) * g2[k] * g2[k];
            let x2 = x1 - lr[k] * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
            let got = [s.cloud.positions[0][0], s.cloud.log_scales[0][0], s.cloud.denza_raw[0]][k];
            assert!((got - x2).abs() < 1e-12, "param {k}: {got} vs {x2}");
            let slot = [0, 3, 10][k];
            assert!((s.m[0][slot] - m2).abs() < 1e-12);
            assert!((s.v[0][slot] - v2).abs() < 1e-12);
        }
    }

    fn three_blobs() -> GaussianCloud {
        let mut c = GaussianCloud::new();
        c.push_isotropic([-3.0, 0.0, 1.0], 1.5, 1.0);
        c.push_isotropic([2.0, 1.0, -1.0], 1.2, 0.8);
        c.push_isotropic([0.0, -2.0, 0.0], 1.0, 0.5);
        c
    }

    #[test]
    fn prune_removes_faint_gaussians() {
        let bounds = ScaleBounds::for_extent(32.0);
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(three_blobs(), 32.0);
        assert_eq!(prune(&mut s, &cfg, &bounds).unwrap(), 0);
        assert_eq!(s.cloud, three_blobs());

        let geom = TiltGeometry::uniform_parallel(3, 60.0, DetectorGrid::square(16)).unwrap();
        let mut c = three_blobs();
        c.push_isotropic([1.0, 1.0, 1.0], 1.0, 1.0);
        c.denza_raw[3] = -20.0;
        let before = render_all(&c, &geom);
        let mut s = TrainState::new(c, 32.0);
        assert_eq!(prune(&mut s, &cfg, &bounds).unwrap(), 1);
        assert_eq!(s.len(), 3);
        assert_eq!(s.m.len(), 3);
        let after = render_all(&s.cloud, &geom);
        for (a, b) in before.images.iter().zip(&after.images) {
            let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff / a.sum() < 1e-3);
        }
    }

    #[test]
    fn prune_counts_consecutive_bound_hits() {
        let bounds = ScaleBounds::new(0.5, 8.0);
        let cfg = TrainConfig::default();
        let mut c = three_blobs();
        c.log_scales[1] = [0.5f64.ln(); 3];
        let mut s = TrainState::new(c, 32.0);
        for _ in 0..2 {
            assert_eq!(prune(&mut s, &cfg, &bounds).unwrap(), 0);
        }
        assert_eq!(prune(&mut s, &cfg, &bounds).unwrap(), 1);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn prune_to_empty_is_an_error() {
        let mut c = GaussianCloud::new();
        c.push_isotropic([0.0; 3], 1.0, 1.0);
        c.denza_raw[0] = -20.0;
        let mut s = TrainState::new(c, 32.0);
        assert!(prune(&mut s, &TrainConfig::default(), &ScaleBounds::for_extent(32.0)).is_err());
    }

    #[test]
    fn densify_identity_when_gradients_equal() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(three_blobs(), 32.0);
        let mut g = CloudGradients::zeros(3);
        g.d_positions = vec![[0.1, 0.0, 0.0]; 3];
        s.track_gradients(&g);
        assert_eq!(densify(&mut s, &cfg), 0);
        assert_eq!(s.cloud, three_blobs());
    }

    #[test]
    fn densify_splits_and_preserves_denza() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(three_blobs(), 32.0);
        let total_before: f64 = (0..3).map(|i| s.cloud.denza(i)).sum();
        let mut g = CloudGradients::zeros(3);
        g.d_positions[1] = [0.0, 2.0, 0.0];
        s.track_gradients(&g);
        assert_eq!(densify(&mut s, &cfg), 1);
        assert_eq!(s.len(), 4);
        assert_eq!(s.m.len(), 4);
        let total_after: f64 = (0..4).map(|i| s.cloud.denza(i)).sum();
        assert!((total_after - total_before).abs() / total_before < 0.01);
        let sep = Vector3::from(s.cloud.positions[1]) - Vector3::from(s.cloud.positions[3]);
        assert!((sep.norm() - 1.2).abs() < 1e-12);
        assert!((s.cloud.log_scales[3][0] - (1.2f64.ln() - 1.6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn densify_respects_growth_cap() {
        let cfg = TrainConfig { max_growth: 1.0, ..Default::default() };
        let mut s = TrainState::new(three_blobs(), 32.0);
        let mut g = CloudGradients::zeros(3);
        g.d_positions[0] = [5.0, 0.0, 0.0];
        s.track_gradients(&g);
        assert_eq!(densify(&mut s, &cfg), 0);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn zero_iterations_return_init() {
        let geom = TiltGeometry::uniform_parallel(3, 60.0, DetectorGrid::square(16)).unwrap();
        let c = three_blobs();
        let stack = render_all(&c, &geom);
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let (out, log) = train(&stack, &geom, &c, &cfg).unwrap();
        assert_eq!(out, c);
        assert!(log.records.is_empty());
        assert!(train(&stack, &geom, &GaussianCloud::new(), &cfg).is_err());
    }

    #[test]
    fn recorded_total_recomposes() {
        let geom = TiltGeometry::uniform_parallel(3, 60.0, DetectorGrid::square(16)).unwrap();
        let stack = render_all(&three_blobs(), &geom);
        let mut init = three_blobs();
        init.positions[0][0] += 0.7;
        let cfg = TrainConfig {
            iterations: 3,
            tv_grid: Some(GridSpec::centered_cube(8, 2.0)),
            weights: LossWeights { lambda_3dtv: 0.05, ..Default::default() },
            ..Default::default()
        };
        let (_, log) = train(&stack, &geom, &init, &cfg).unwrap();
        let w = cfg.weights;
        for r in &log.records {
            let re = w.lambda_pixel * r.pixel + w.lambda_freq * r.freq + w.lambda_ssim * r.ssim + w.lambda_3dtv * r.tv3d;
            assert_eq!(re, r.total);
        }
    }
}
