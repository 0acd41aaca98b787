//! Finite-difference checks of every analytic gradient used in calibration.
//!
//! Two properties are checked end to end on a small two-layer block:
//!
//! * `exact`: the derivative of the real quantized loss (rounding slope 0)
//!   against central differences of that loss;
//! * `ste`: the straight-through gradient used in training (rounding slope 1)
//!   against central differences of the same pass with its rounding offsets
//!   frozen, which is the smooth function the straight-through rule
//!   differentiates.
//!
//! Coordinates whose difference stencil crosses a rounding, clamping or
//! ReLU boundary are nudged off it before being measured.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::calibrate::{mse, Activation, Block, BlockTrainer, Increment, LinearLayer, ParamKind, ParamRef, TrainConfig};
use crate::desv::{grad_band, map_band, BandIncrement};
use crate::error::{Error, Result};
use crate::numerics::{svd, Matrix};
use crate::quantizer::{self, Axis, ClipParams, Granularity, QuantConfig, Rounding};
use crate::synth::gaussian;
use crate::transform::{smooth_activations, smooth_backward, smooth_weights, SmoothParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Coordinates checked per suite.
    pub coords: usize,
    /// Central-difference step.
    pub step: f64,
    /// Maximum relative error.
    pub tol: f64,
    /// Distance a coordinate is moved when its stencil crosses a boundary.
    pub nudge: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero on both sides do not divide by zero.
    pub abs_floor: f64,
}

impl GradCheckConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, coords: 32, step: 1e-5, tol: 1e-3, nudge: 1e-4, abs_floor: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Times the coordinate was moved off a boundary.
    pub nudges: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub tol: f64,
    pub checks: Vec<CoordCheck>,
    /// Coordinates dropped because no boundary-free stencil was found.
    pub skipped: usize,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.rel_err <= self.tol)
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs every suite.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let (trainer, x, target) = block_fixture(cfg.seed)?;
    Ok(vec![
        check_band_adjoint(cfg)?,
        check_smooth(cfg)?,
        check_fake_quant(cfg)?,
        check_block(&trainer, &x, &target, cfg, false)?,
        check_block(&trainer, &x, &target, cfg, true)?,
    ])
}

/// Two-layer GELU block under 4-bit per-channel weights and 8-bit
/// activations, with band increments, smoothing and clipping all active
/// and moved away from their initial values.
pub fn block_fixture(seed: u64) -> Result<(BlockTrainer, Matrix, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l1 = LinearLayer::new("fc1", gaussian(&mut rng, 6, 8, 0.4), (0..8).map(|k| 0.05 * k as f64).collect())?;
    let l2 = LinearLayer::new("fc2", gaussian(&mut rng, 8, 5, 0.4), vec![0.1; 5])?;
    let block = Block::new(vec![l1, l2], Activation::Gelu)?;
    let x = gaussian(&mut rng, 24, 6, 1.0);
    let target = block.forward(&x)?;
    let mut tc = TrainConfig::new(QuantConfig::new(4, Granularity::PerChannel { axis: Axis::Cols })?, Some(8));
    tc.increment = Increment::Band { n_diag: 2 };
    tc.clip_init_logit = Some(1.5);
    let mut trainer = BlockTrainer::new(&block, &x, &tc)?;
    for r in trainer.param_refs() {
        let v = trainer.get(r);
        let jitter = match r.kind {
            ParamKind::Band => 0.02,
            ParamKind::LogScale => 0.1,
            ParamKind::Shift => 0.05,
            ParamKind::ClipHi | ParamKind::ClipLo => 0.5,
        };
        trainer.set(r, v + jitter * rng.gen_range(-1.0..1.0));
    }
    Ok((trainer, x, target))
}

/// Picks up to `n` references spread evenly over parameter kinds.
fn stratified(refs: Vec<ParamRef>, rng: &mut ChaCha8Rng) -> Vec<ParamRef> {
    let kinds = [ParamKind::Band, ParamKind::LogScale, ParamKind::Shift, ParamKind::ClipHi, ParamKind::ClipLo];
    let mut pools: Vec<Vec<ParamRef>> = kinds
        .iter()
        .map(|k| {
            let mut v: Vec<ParamRef> = refs.iter().copied().filter(|r| r.kind == *k).collect();
            v.shuffle(rng);
            v
        })
        .collect();
    let mut out = Vec::with_capacity(refs.len());
    while pools.iter().any(|p| !p.is_empty()) {
        for p in pools.iter_mut() {
            if let Some(r) = p.pop() {
                out.push(r);
            }
        }
    }
    out
}

/// End-to-end check of the block gradient. `ste` selects which property is
/// checked (see the module docs).
pub fn check_block(
    trainer: &BlockTrainer,
    x: &Matrix,
    target: &Matrix,
    cfg: &GradCheckConfig,
    ste: bool,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let candidates = stratified(trainer.param_refs(), &mut rng);
    let name = if ste { "block_ste" } else { "block_exact" };
    let mut report = CheckReport { name: name.into(), tol: cfg.tol, checks: Vec::new(), skipped: 0 };
    for r in candidates {
        if report.checks.len() == cfg.coords {
            break;
        }
        match check_coord(trainer, x, target, cfg, ste, r)? {
            Some(c) => report.checks.push(c),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

const MAX_NUDGES: u32 = 8;

fn check_coord(
    base: &BlockTrainer,
    x: &Matrix,
    target: &Matrix,
    cfg: &GradCheckConfig,
    ste: bool,
    r: ParamRef,
) -> Result<Option<CoordCheck>> {
    let mut t = base.clone();
    let theta = base.get(r);
    for nudges in 0..=MAX_NUDGES {
        let k = nudges.div_ceil(2) as f64;
        let sign = if nudges % 2 == 1 { 1.0 } else { -1.0 };
        t.set(r, theta + sign * k * cfg.nudge);
        let (out, tape) = t.forward(x, None)?;
        let offsets = tape.offsets();
        let state = tape.discrete_state(!ste);
        let frozen = if ste { Some(offsets.as_slice()) } else { None };
        let center = t.get(r);
        let mut values = [0.0; 2];
        let mut smooth = true;
        for (slot, h) in [cfg.step, -cfg.step].into_iter().enumerate() {
            t.set(r, center + h);
            let (o, tp) = t.forward(x, frozen)?;
            if tp.discrete_state(!ste) != state {
                smooth = false;
                break;
            }
            values[slot] = mse(target, &o)?;
        }
        t.set(r, center);
        if !smooth {
            continue;
        }
        let numeric = (values[0] - values[1]) / (2.0 * cfg.step);
        let (_, g_out) = crate::calibrate::mse_with_grad(target, &out)?;
        let grads = t.backward(&tape, &g_out, if ste { 1.0 } else { 0.0 })?;
        let analytic = grads[r.layer].slot(r.kind)[r.index];
        return Ok(Some(CoordCheck {
            label: format!("layer{}.{:?}[{}]", r.layer, r.kind, r.index),
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, cfg.abs_floor),
            nudges,
        }));
    }
    Ok(None)
}

/// Band gradient against differences of `⟨G, U·Map(Z)·V⟩`.
pub fn check_band_adjoint(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (a, b, n) = (7, 5, 2);
    let f = svd(&gaussian(&mut rng, a, b, 1.0))?;
    let g = gaussian(&mut rng, a, b, 1.0);
    let z = BandIncrement::new(n, gaussian(&mut rng, 2 * n + 1, b, 1.0))?;
    let loss = |z: &BandIncrement| -> Result<f64> { Ok(inner(&g, &f.u.matmul(&map_band(z, a, b)?)?.matmul(&f.v)?)) };
    let analytic = grad_band(&g, &f.u, &f.v, n)?;
    let mut report = CheckReport { name: "band_adjoint".into(), tol: cfg.tol, checks: Vec::new(), skipped: 0 };
    let total = z.values().data().len();
    for idx in rand::seq::index::sample(&mut rng, total, cfg.coords.min(total)) {
        let mut zp = z.clone();
        zp.values_mut()[idx] += cfg.step;
        let mut zm = z.clone();
        zm.values_mut()[idx] -= cfg.step;
        let numeric = (loss(&zp)? - loss(&zm)?) / (2.0 * cfg.step);
        let an = analytic.values().data()[idx];
        report.checks.push(CoordCheck {
            label: format!("band[{idx}]"),
            analytic: an,
            numeric,
            rel_err: rel_err(an, numeric, cfg.abs_floor),
            nudges: 0,
        });
    }
    Ok(report)
}

/// Smoothing adjoint against differences of a random linear functional of
/// the transformed activations, weights and bias.
pub fn check_smooth(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let (n, c, o) = (6, 4, 3);
    let x = gaussian(&mut rng, n, c, 1.0);
    let w = gaussian(&mut rng, c, o, 1.0);
    let bias: Vec<f64> = (0..o).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let p = SmoothParams {
        scale: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        shift: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let gx = gaussian(&mut rng, n, c, 1.0);
    let gw = gaussian(&mut rng, c, o, 1.0);
    let gb = Matrix::from_fn(1, o, |_, _| rng.sample::<f64, _>(StandardNormal));
    let loss = |x: &Matrix, w: &Matrix, p: &SmoothParams| -> Result<f64> {
        let xt = smooth_activations(x, p)?;
        let (wt, bt) = smooth_weights(w, &bias, p)?;
        Ok(inner(&gx, &xt) + inner(&gw, &wt) + gb.data().iter().zip(&bt).map(|(a, b)| a * b).sum::<f64>())
    };
    let xt = smooth_activations(&x, &p)?;
    let sg = smooth_backward(&xt, &w, &p, &gx, &gw, gb.data());
    let mut report = CheckReport { name: "smooth".into(), tol: cfg.tol, checks: Vec::new(), skipped: 0 };
    let h = cfg.step;
    let mut push = |label: String, an: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        report.checks.push(CoordCheck { label, analytic: an, numeric, rel_err: rel_err(an, numeric, cfg.abs_floor), nudges: 0 });
    };
    for k in 0..c {
        let mut pp = p.clone();
        pp.scale[k] += h;
        let mut pm = p.clone();
        pm.scale[k] -= h;
        push(format!("scale[{k}]"), sg.scale[k], loss(&x, &w, &pp)?, loss(&x, &w, &pm)?);
        let mut pp = p.clone();
        pp.shift[k] += h;
        let mut pm = p.clone();
        pm.shift[k] -= h;
        push(format!("shift[{k}]"), sg.shift[k], loss(&x, &w, &pp)?, loss(&x, &w, &pm)?);
    }
    for i in 0..c * o {
        let (r, col) = (i / o, i % o);
        let mut wp = w.clone();
        wp.set(r, col, w.get(r, col) + h);
        let mut wm = w.clone();
        wm.set(r, col, w.get(r, col) - h);
        push(format!("w[{r},{col}]"), sg.w.get(r, col), loss(&x, &wp, &p)?, loss(&x, &wm, &p)?);
    }
    for i in 0..n * c {
        let (r, col) = (i / c, i % c);
        let mut xp = x.clone();
        xp.set(r, col, x.get(r, col) + h);
        let mut xm = x.clone();
        xm.set(r, col, x.get(r, col) - h);
        push(format!("x[{r},{col}]"), sg.x.get(r, col), loss(&xp, &w, &p)?, loss(&xm, &w, &p)?);
    }
    Ok(report)
}

/// Straight-through fake-quantization gradient against differences of the
/// frozen-offset pass, for inputs and both clipping factors.
pub fn check_fake_quant(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let qc = QuantConfig::new(3, Granularity::Group { size: 4 })?;
    let w = gaussian(&mut rng, 8, 3, 1.0);
    let layout = qc.layout(8, 3)?;
    let groups = layout.n_groups();
    let clip = ClipParams::new(
        (0..groups).map(|_| rng.gen_range(0.6..0.95)).collect(),
        (0..groups).map(|_| rng.gen_range(0.6..0.95)).collect(),
    )?;
    let g = gaussian(&mut rng, 8, 3, 1.0);
    let (_, tape) = quantizer::forward(&w, &qc, &layout, &clip.gamma, &clip.beta, Rounding::Nearest);
    let offsets = tape.rounding_offsets();
    let state = tape.discrete_state(false);
    let frozen = Rounding::Frozen(&offsets);
    let grad = quantizer::backward(&tape, &g, 1.0);
    let eval = |w: &Matrix, gamma: &[f64], beta: &[f64]| -> Result<f64> {
        let (q, t) = quantizer::forward(w, &qc, &layout, gamma, beta, frozen);
        if t.discrete_state(false) != state {
            return Err(Error::NumericalFailure { what: "stencil crosses a clamp boundary", iterations: 0 });
        }
        Ok(inner(&g, &q))
    };
    let mut report = CheckReport { name: "fake_quant_ste".into(), tol: cfg.tol, checks: Vec::new(), skipped: 0 };
    let h = cfg.step;
    let mut record = |label: String, an: f64, pm: Result<(f64, f64)>| match pm {
        Ok((p, m)) => {
            let numeric = (p - m) / (2.0 * h);
            report.checks.push(CoordCheck { label, analytic: an, numeric, rel_err: rel_err(an, numeric, cfg.abs_floor), nudges: 0 });
        }
        Err(_) => report.skipped += 1,
    };
    for i in 0..w.data().len() {
        let (r, c) = (i / 3, i % 3);
        let pm = (|| {
            let mut wp = w.clone();
            wp.set(r, c, w.get(r, c) + h);
            let mut wm = w.clone();
            wm.set(r, c, w.get(r, c) - h);
            Ok((eval(&wp, &clip.gamma, &clip.beta)?, eval(&wm, &clip.gamma, &clip.beta)?))
        })();
        record(format!("w[{r},{c}]"), grad.input.get(r, c), pm);
    }
    for k in 0..groups {
        let pm = (|| {
            let mut gp = clip.gamma.clone();
            gp[k] += h;
            let mut gm = clip.gamma.clone();
            gm[k] -= h;
            Ok((eval(&w, &gp, &clip.beta)?, eval(&w, &gm, &clip.beta)?))
        })();
        record(format!("gamma[{k}]"), grad.gamma[k], pm);
        let pm = (|| {
            let mut bp = clip.beta.clone();
            bp[k] += h;
            let mut bm = clip.beta.clone();
            bm[k] -= h;
            Ok((eval(&w, &clip.gamma, &bp)?, eval(&w, &clip.gamma, &bm)?))
        })();
        record(format!("beta[{k}]"), grad.beta[k], pm);
    }
    Ok(report)
}
