//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dsvq::analyze::{compare_curves, disturbance_magnitude, expressiveness_curve};
use dsvq::calibrate::{calibrate_layer, rtn_block, Activation, Block, Increment, TrainConfig};
use dsvq::desv::{desv_weight, error_matrix, grad_band, lsi_reconstruct, map_band, requantize, BandIncrement};
use dsvq::gradcheck::{run_suite, GradCheckConfig};
use dsvq::io::{read_container, write_container, Container, Tensor, TensorData};
use dsvq::numerics::{max_abs_diff, reconstruct, relative_frobenius, svd};
use dsvq::quantizer::{compute_params, fake_quant, quantize, Axis, ClipParams, Granularity, QuantConfig};
use dsvq::synth::calibration_fixture;
use dsvq::transform::{apply_smooth, invert_smooth, SmoothParams};
use dsvq::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mag: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-mag..mag))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

fn orthogonality_gap(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).unwrap();
    max_abs_diff(&g, &Matrix::identity(g.rows())).unwrap()
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w).unwrap();
    for r in 0..y.rows() {
        y.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

fn quantizer_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut bad_codes = 0;
    let mut not_idempotent = 0;
    let cases = 10_000;
    for k in 0..cases {
        let bits = [2, 3, 4, 8][k % 4];
        let granularity = match (k / 4) % 4 {
            0 => Granularity::PerTensor,
            1 => Granularity::PerChannel { axis: Axis::Rows },
            2 => Granularity::PerChannel { axis: Axis::Cols },
            _ => Granularity::Group { size: rng.gen_range(1..=6) },
        };
        let cfg = QuantConfig::new(bits, granularity).unwrap();
        let (rows, cols) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let mag = log_uniform(&mut rng, 1e-3, 1e2);
        let w = uniform(&mut rng, rows, cols, mag);
        let groups = cfg.layout(rows, cols).unwrap().n_groups();
        let clip = if k % 2 == 0 {
            ClipParams::identity(groups)
        } else {
            let mut f = || (0..groups).map(|_| rng.gen_range(0.5..=1.0)).collect::<Vec<f64>>();
            ClipParams::new(f(), f()).unwrap()
        };
        let p = compute_params(&w, &cfg, &clip).unwrap();
        let ids = cfg.layout(rows, cols).unwrap().group_ids().to_vec();
        let (fq, mask) = fake_quant(&w, &cfg, &clip).unwrap();
        for (i, &g) in ids.iter().enumerate() {
            if mask.mask[i] {
                worst_excess = worst_excess.max((w.data()[i] - fq.data()[i]).abs() - p.scale[g] / 2.0);
            }
        }
        bad_codes += quantize(&w, &p, &cfg).unwrap().codes.iter().filter(|&&c| c > cfg.qmax()).count();
        let id = ClipParams::identity(groups);
        let (once, _) = fake_quant(&w, &cfg, &id).unwrap();
        let (twice, _) = fake_quant(&once, &cfg, &id).unwrap();
        if once.data().iter().zip(twice.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            not_idempotent += 1;
        }
    }
    check(
        worst_excess <= 1e-9 && bad_codes == 0 && not_idempotent == 0,
        format!("{cases} tensors, max error - scale/2 = {worst_excess:.1e}, codes out of range {bad_codes}, non-idempotent {not_idempotent}"),
    )
}

fn svd_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut rec, mut orth) = (0.0_f64, 0.0_f64);
    let cases = 500;
    for _ in 0..cases {
        let (rows, cols) = (rng.gen_range(1..=128), rng.gen_range(1..=64));
        let mag = log_uniform(&mut rng, 1e-2, 1e2);
        let m = uniform(&mut rng, rows, cols, mag);
        let f = svd(&m).unwrap();
        rec = rec.max(relative_frobenius(&reconstruct(&f).unwrap(), &m).unwrap());
        orth = orth.max(orthogonality_gap(&f.u)).max(orthogonality_gap(&f.v));
    }
    check(
        rec <= 1e-5 && orth <= 1e-6,
        format!("{cases} matrices, max rel reconstruction {rec:.1e}, max orthogonality gap {orth:.1e}"),
    )
}

fn smooth_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut eq, mut inv) = (0.0_f64, 0.0_f64);
    let cases = 1000;
    for _ in 0..cases {
        let (n, c, o) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=32));
        let x = uniform(&mut rng, n, c, 8.0);
        let w = uniform(&mut rng, c, o, 1.0);
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = SmoothParams {
            scale: (0..c).map(|_| log_uniform(&mut rng, 1e-2, 1e2)).collect(),
            shift: (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect(),
        };
        let y = affine(&x, &w, &b);
        let t = apply_smooth(&x, &w, &b, &p).unwrap();
        eq = eq.max(max_abs_diff(&y, &affine(&t.x, &t.w, &t.bias)).unwrap() / (1.0 + y.max_abs()));
        let (w2, b2) = invert_smooth(&t.w, &t.bias, &p).unwrap();
        inv = inv.max(max_abs_diff(&w, &w2).unwrap());
        inv = b.iter().zip(&b2).fold(inv, |m, (u, v)| m.max((u - v).abs()));
    }
    check(eq <= 1e-6 && inv <= 1e-9, format!("{cases} cases, max rel output gap {eq:.1e}, max inverse gap {inv:.1e}"))
}

fn lsi_embedding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 200;
    let mut mismatches = 0;
    for _ in 0..cases {
        let b = rng.gen_range(1..=32);
        let a = rng.gen_range(b..=48);
        let f = svd(&uniform(&mut rng, a, b, 1.0)).unwrap();
        let i: Vec<f64> = (0..b).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let desv = desv_weight(&f, &BandIncrement::from_lsi(&i).unwrap()).unwrap();
        let lsi = lsi_reconstruct(&f.u, &f.s, &i, &f.v).unwrap();
        if desv.data().iter().zip(lsi.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{cases} cases, {mismatches} not bitwise equal"))
}

fn band_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut shapes, mut wrong, mut adjoint) = (0, 0, 0.0_f64);
    let mut wide_rejected = true;
    for a in 1..=10usize {
        for b in 1..=10usize {
            for n in 0..=4usize {
                let values = uniform(&mut rng, 2 * n + 1, b, 1.0);
                let inc = BandIncrement::new(n, values.clone()).unwrap();
                if a < b {
                    wide_rejected &= map_band(&inc, a, b).is_err();
                    continue;
                }
                shapes += 1;
                let oracle = Matrix::from_fn(a, b, |l, j| {
                    let o = l as isize - j as isize;
                    if o.unsigned_abs() <= n {
                        values.get((o + n as isize) as usize, j)
                    } else {
                        0.0
                    }
                });
                if map_band(&inc, a, b).unwrap() != oracle {
                    wrong += 1;
                }
                let f = svd(&uniform(&mut rng, a, b, 1.0)).unwrap();
                let g = uniform(&mut rng, a, b, 1.0);
                let lhs = g.dot(&f.u.matmul(&oracle).unwrap().matmul(&f.v).unwrap()).unwrap();
                let rhs = grad_band(&g, &f.u, &f.v, n).unwrap().values().dot(&values).unwrap();
                adjoint = adjoint.max((lhs - rhs).abs());
            }
        }
    }
    check(
        wrong == 0 && adjoint <= 1e-9 && wide_rejected,
        format!("{shapes} tall (a,b,n) triples, {wrong} oracle mismatches, max adjoint gap {adjoint:.1e}, wide shapes rejected: {wide_rejected}"),
    )
}

fn headroom_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut cases, mut broken, mut unchanged_at_1_5) = (0, 0, 0);
    for bits in [2u32, 3] {
        for granularity in [
            Granularity::PerTensor,
            Granularity::PerChannel { axis: Axis::Rows },
            Granularity::PerChannel { axis: Axis::Cols },
        ] {
            for _ in 0..20 {
                cases += 1;
                let cfg = QuantConfig::new(bits, granularity).unwrap();
                let w = uniform(&mut rng, 4, 3, 1.0);
                let clip = ClipParams::identity(cfg.layout(4, 3).unwrap().n_groups());
                let e = error_matrix(&w, &cfg, &clip).unwrap();
                let base = quantize(&w, &e.params, &cfg).unwrap().codes;
                let h = e.headroom.data();
                for signs in 0..1u32 << 12 {
                    let p = Matrix::from_fn(4, 3, |r, c| {
                        let i = r * 3 + c;
                        let sign = if signs >> i & 1 == 1 { 1.0 } else { -1.0 };
                        sign * 0.999 * h[i]
                    });
                    if requantize(&w, &p, &e).unwrap().codes != base {
                        broken += 1;
                    }
                }
                if !crosses_at_one_and_a_half(&w, &e, &base) {
                    unchanged_at_1_5 += 1;
                }
            }
        }
    }
    check(
        broken == 0 && unchanged_at_1_5 == 0,
        format!("{cases} matrices x 4096 sign patterns, {broken} code changes at 0.999x, {unchanged_at_1_5} cases without a change at 1.5x"),
    )
}

/// Moves the in-range entry closest to a rounding boundary by 1.5x its
/// headroom towards that boundary and reports whether a code changed.
fn crosses_at_one_and_a_half(w: &Matrix, e: &dsvq::desv::ErrorMatrix, base: &[u32]) -> bool {
    let ids = e.cfg.layout(w.rows(), w.cols()).unwrap().group_ids().to_vec();
    let qmax = e.cfg.qmax() as f64;
    let candidate = (0..w.data().len())
        .filter(|&i| !e.saturated_mask[i])
        .filter_map(|i| {
            let g = ids[i];
            let (s, z) = (e.params.scale[g], e.params.zero[g] as f64);
            let x = w.data()[i] / s;
            let dir = if x >= x.round() { 1.0 } else { -1.0 };
            let moved = w.data()[i] + dir * 1.5 * e.headroom.data()[i];
            let code = (moved / s).round() + z;
            let inside = moved >= e.params.clip_lo[g] && moved <= e.params.clip_hi[g];
            (inside && (0.0..=qmax).contains(&code)).then_some((i, dir))
        })
        .min_by(|a, b| e.headroom.data()[a.0].total_cmp(&e.headroom.data()[b.0]));
    let Some((i, dir)) = candidate else {
        return false;
    };
    let mut p = Matrix::zeros(w.rows(), w.cols());
    p.data_mut()[i] = dir * 1.5 * e.headroom.data()[i];
    requantize(w, &p, e).unwrap().codes != base
}

fn gradient_fidelity() -> Outcome {
    let reports = run_suite(&GradCheckConfig::new(7)).unwrap();
    let detail = reports
        .iter()
        .map(|r| format!("{} {}/{:.1e}", r.name, r.checks.len(), r.max_rel_err()))
        .collect::<Vec<_>>()
        .join(", ");
    let block_coords = reports.iter().filter(|r| r.name.starts_with("block")).all(|r| r.checks.len() >= 32);
    check(reports.iter().all(|r| r.passed()) && block_coords, format!("coords/max rel err: {detail}"))
}

fn efficacy_cfg(n_diag: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(QuantConfig::new(3, Granularity::PerChannel { axis: Axis::Cols }).unwrap(), None);
    cfg.seed = 7;
    cfg.steps = 200;
    cfg.increment = Increment::Band { n_diag };
    cfg
}

fn calibration_efficacy() -> Outcome {
    let (layer, x) = calibration_fixture(64, 256, 7).unwrap();
    let (_, full) = calibrate_layer(&layer, &x, &efficacy_cfg(100)).unwrap();
    let (_, four) = calibrate_layer(&layer, &x, &efficacy_cfg(4)).unwrap();
    let (_, zero) = calibrate_layer(&layer, &x, &efficacy_cfg(0)).unwrap();
    let ratio = full.final_loss / full.rtn_loss;
    check(
        ratio <= 0.7 && four.final_loss <= zero.final_loss + 1e-6,
        format!(
            "final/RTN {ratio:.3} (RTN {:.3e}), n_diag=4 {:.4e} vs n_diag=0 {:.4e}",
            full.rtn_loss, four.final_loss, zero.final_loss
        ),
    )
}

fn diagnostics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut bad_curves, mut equiv) = (0, 0.0_f64);
    for _ in 0..1000 {
        let (r, c) = (rng.gen_range(1..=24), rng.gen_range(1..=24));
        let h = uniform(&mut rng, r, c, 3.0);
        let k = log_uniform(&mut rng, 1e-3, 1e3) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let a = expressiveness_curve(&h).unwrap();
        let b = expressiveness_curve(&h.scaled(k)).unwrap();
        if !a.points.windows(2).all(|w| w[0] <= w[1]) || *a.points.last().unwrap() != 1.0 {
            bad_curves += 1;
        }
        equiv = equiv.max(compare_curves(&a, &b).max_deviation);
    }
    let mut oracle = 0.0_f64;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let (a, b) = (uniform(&mut rng, r, c, 2.0), uniform(&mut rng, r, c, 2.0));
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..c {
                total += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        oracle = oracle.max((disturbance_magnitude(&a, &b).unwrap() - total / (r * c) as f64).abs());
    }
    let (layer, x) = calibration_fixture(64, 256, 7).unwrap();
    let block = Block::new(vec![layer.clone()], Activation::None).unwrap();
    let rtn = rtn_block(&block, efficacy_cfg(0).weight, None).unwrap();
    let d_rtn = disturbance_magnitude(&layer.w, &rtn.layers[0].effective_weight().unwrap().0).unwrap();
    let mut d = Vec::new();
    for n in [0, 100] {
        let (q, _) = calibrate_layer(&layer, &x, &efficacy_cfg(n)).unwrap();
        d.push(disturbance_magnitude(&layer.w, &q.effective_weight().unwrap().0).unwrap());
    }
    check(
        bad_curves == 0 && equiv <= 1e-9 && oracle <= 1e-12 && d[1] >= d_rtn,
        format!(
            "1000 curves ({bad_curves} bad, max scale gap {equiv:.1e}), 100 oracle pairs (max gap {oracle:.1e}), disturbance n_diag=100 {:.4e} vs RTN {d_rtn:.4e} (n_diag=0: {:.4e})",
            d[1], d[0]
        ),
    )
}

fn dsvq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dsvq")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("dsvq {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn random_container(rng: &mut ChaCha8Rng) -> Container {
    let mut c = Container::new();
    for k in 0..rng.gen_range(0..6) {
        let n = rng.gen_range(0..40);
        let data = match rng.gen_range(0..4) {
            0 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect()),
            1 => TensorData::F64((0..n).map(|_| f64::from_bits(rng.gen())).collect()),
            2 => TensorData::I32((0..n).map(|_| rng.gen()).collect()),
            _ => TensorData::U8((0..n).map(|_| rng.gen()).collect()),
        };
        c.push(Tensor::new(format!("t{k}"), vec![n as u64], data).unwrap()).unwrap();
    }
    c
}

fn determinism_and_io() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    dsvq(&["gen-model", "--blocks", "2", "--dims", "16,32,16", "--activation", "gelu", "--seed", "3", "--out", &p("model")])?;
    dsvq(&["gen-calib", "--dim", "16", "--rows", "64", "--batches", "2", "--correlated", "--seed", "4", "--out", &p("calib.dsvq")])?;
    for run in ["q1", "q2"] {
        dsvq(&[
            "quantize", "--model", &p("model"), "--calib", &p("calib.dsvq"), "--bits-w", "4", "--bits-a", "8",
            "--diagonals", "4", "--steps", "30", "--batch", "32", "--seed", "5", "--out", &p(run),
        ])?;
    }
    let (a, b) = (dir_bytes(&tmp.path().join("q1")), dir_bytes(&tmp.path().join("q2")));
    let identical = !a.is_empty() && a == b;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut round_trip_failures = 0;
    let cases = 200;
    for k in 0..cases {
        let c = random_container(&mut rng);
        let path = tmp.path().join(format!("c{k}.dsvq"));
        write_container(&path, &c).map_err(|e| e.to_string())?;
        let back = read_container(&path).map_err(|e| e.to_string())?;
        if !back.bits_eq(&c) || back.to_bytes() != std::fs::read(&path).unwrap() {
            round_trip_failures += 1;
        }
    }
    check(
        identical && round_trip_failures == 0,
        format!(
            "quantize runs identical: {identical} ({} files), {cases} containers, {round_trip_failures} round-trip failures",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("quantizer soundness", Duration::from_secs(10), quantizer_soundness),
        ("SVD quality", Duration::from_secs(30), svd_quality),
        ("smooth identity", Duration::from_secs(5), smooth_identity),
        ("LSI embedding", Duration::from_secs(5), lsi_embedding),
        ("band-map oracle", Duration::from_secs(5), band_oracle),
        ("headroom soundness", Duration::from_secs(10), headroom_soundness),
        ("gradient fidelity", Duration::from_secs(20), gradient_fidelity),
        ("calibration efficacy", Duration::from_secs(60), calibration_efficacy),
        ("diagnostics", Duration::from_secs(10), diagnostics),
        ("determinism and I/O", Duration::from_secs(10), determinism_and_io),
    ];
    let mut failed = 0;
    for (k, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= *limit, d),
            Err(d) => (false, d),
        };
        println!(
            "{} {:>2} {name}: {detail} [{:.2} s, limit {} s]",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            took.as_secs_f64(),
            limit.as_secs()
        );
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
