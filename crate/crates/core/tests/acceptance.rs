//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are pinned here and nowhere else.
//!
//! The phantom criterion trains one network per tube voxel and dominates
//! the runtime; build in release or keep the test profile optimized.

use std::io::Cursor;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2pinn::config::{RunConfig, RunManifest};
use t2pinn::format::{
    read_field, read_map, read_series, write_field, write_map, write_png, write_series, Window,
};
use t2pinn::lsq::{fit_lsq, LsqMethod, LsqOptions};
use t2pinn::net::{init_params, MlpParams};
use t2pinn::phantom::{make_phantom, PhantomLayout};
use t2pinn::pipeline::{
    build_mask, generate_frames, map_lsq, map_pinn, CollocationSpan, Dims, ImageSeries, MapKind,
    ParameterMap, PinnConfig, PinnMaps,
};
use t2pinn::score::score_map;
use t2pinn::signal::{synthesize_series, EchoSeries, NoiseSpec, TissueParams};
use t2pinn::trainer::{
    fit_voxel, grad_total, loss_bloch, loss_data, loss_total, softplus_inv, CollocationGrid,
    LossWeights, ResidualNorm, ResidualTime,
};
use t2pinn::trial::ExactDecay;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 50;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const LSQ_NOISELESS_TOL: f64 = 1e-6;
const PINN_NOISELESS_TOL: f64 = 0.02;
const PINN_SHORT_T2_TOL: f64 = 0.05;
const SHORT_T2: f64 = 5.592;
const VOXEL_BUDGET: Duration = Duration::from_secs(5);
const SUMMATION_TOL: f64 = 1e-12;
const FIXED_POINT_LOSS: f64 = 1e-10;
const FIXED_POINT_GRAD: f64 = 1e-8;
const PHANTOM_LSQ_TOL: f64 = 0.03;
const PHANTOM_PINN_TOL: f64 = 0.05;
const PHANTOM_BUDGET: Duration = Duration::from_secs(600);
const PHANTOM_REFERENCE_THREADS: usize = 4;
const GENERATION_FACTOR: f64 = 1.5;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "criterion {n} {name}: {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn echo_times() -> Vec<f64> {
    (1..=9).map(|i| 10.0 * i as f64).collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (MlpParams, EchoSeries) {
    let mut p = init_params(8, rng.random());
    p.set_t_max(90.0);
    for v in p.as_flat_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    p.set_rho(softplus_inv(rng.random_range(5.0..120.0)));
    let tissue =
        TissueParams::new(rng.random_range(0.5..1.5), rng.random_range(5.0..150.0)).unwrap();
    let series = synthesize_series(
        &tissue,
        &echo_times(),
        &NoiseSpec::gaussian(0.02, rng.random()),
    )
    .unwrap();
    (p, series)
}

fn gradient_correctness(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let grid = CollocationGrid::spanning(101, 10.0, 90.0).unwrap();
    let w = LossWeights::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (p, series) = random_instance(&mut rng);
        let (_, g) = grad_total(&p, &grid, &series, &w);
        for (j, &gj) in g.iter().enumerate() {
            let h = 1e-6 * p.as_flat()[j].abs().max(1.0);
            let at = |d: f64| {
                let mut q = p.clone();
                q.as_flat_mut()[j] += d;
                loss_total(&q, &grid, &series, &w)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gj, 1e-6));
        }
    }
    let elapsed = start.elapsed();
    report.line(
        1,
        "gradient correctness",
        worst < GRAD_REL_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max rel err {worst:.2e} < {GRAD_REL_TOL:e} over {GRAD_INSTANCES} instances, {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

fn noiseless_recovery(report: &mut Report) {
    let times = echo_times();
    let cfg = PinnConfig::default();
    let grid = cfg.grid(&times).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    let mut slowest = Duration::ZERO;
    for t2 in [SHORT_T2, 20.0, 50.0, 100.0] {
        let series = synthesize_series(
            &TissueParams::new(1.0, t2).unwrap(),
            &times,
            &NoiseSpec::NONE,
        )
        .unwrap();
        let lsq = fit_lsq(
            &series,
            &LsqOptions {
                method: LsqMethod::LogLinear,
                ..Default::default()
            },
        )
        .unwrap();
        let lsq_err = (lsq.t2_hat - t2).abs() / t2;

        let start = Instant::now();
        let fit = fit_voxel(&series, &grid, &cfg.weights, &cfg.voxel_train(0)).unwrap();
        slowest = slowest.max(start.elapsed());
        let pinn_err = (fit.result.t2_hat - t2).abs() / t2;
        let tol = if t2 == SHORT_T2 {
            PINN_SHORT_T2_TOL
        } else {
            PINN_NOISELESS_TOL
        };

        pass &= lsq_err < LSQ_NOISELESS_TOL && pinn_err < tol;
        detail.push(format!(
            "T2 {t2}: lsq {lsq_err:.1e} pinn {pinn_err:.2e}/{tol}"
        ));
    }
    pass &= slowest < VOXEL_BUDGET;
    detail.push(format!("slowest voxel {:.2} s", slowest.as_secs_f64()));
    report.line(2, "noiseless recovery", pass, detail.join(", "));
}

fn loss_composition(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let k = 1001;
    let grid = CollocationGrid::spanning(k, 10.0, 90.0).unwrap();
    let mut worst_total = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..20 {
        let (p, series) = random_instance(&mut rng);
        let t2 = (1.0 + p.rho().exp()).ln();
        for norm in [ResidualNorm::Absolute, ResidualNorm::Squared] {
            for time in [ResidualTime::Normalized, ResidualTime::Milliseconds] {
                let w = LossWeights {
                    w_bloch: rng.random_range(0.0..1.0),
                    w_data: rng.random_range(0.0..1.0),
                    norm,
                    time,
                };
                let bloch = loss_bloch(&p, &grid, w.form());
                let data = loss_data(&p, &series, norm);
                let total = loss_total(&p, &grid, &series, &w);
                let composed = w.w_bloch * bloch + w.w_data * data;
                worst_total =
                    worst_total.max((total - composed).abs() / (f64::EPSILON * total.abs()));

                let apply = |r: f64| match norm {
                    ResidualNorm::Absolute => r.abs(),
                    ResidualNorm::Squared => r * r,
                };
                let factor = match time {
                    ResidualTime::Normalized => 90.0,
                    ResidualTime::Milliseconds => 1.0,
                };
                let mut brute_bloch = 0.0;
                for i in 0..k {
                    let t = 10.0 + 80.0 * i as f64 / (k - 1) as f64;
                    let r = p.forward(t);
                    brute_bloch += apply(factor * (r.dvalue_dt + r.value / t2));
                }
                brute_bloch /= k as f64;
                let mut brute_data = 0.0;
                for (t, s) in series.times().iter().zip(series.signals()) {
                    brute_data += apply(s - p.forward(*t).value);
                }
                brute_data /= series.len() as f64;
                worst_sum = worst_sum
                    .max(rel_err(bloch, brute_bloch, 0.0))
                    .max(rel_err(data, brute_data, 0.0));
            }
        }
    }
    report.line(
        3,
        "loss composition",
        worst_total <= 4.0 && worst_sum < SUMMATION_TOL,
        format!("total vs weighted sum {worst_total:.1} eps (<= 4), brute force rel err {worst_sum:.1e} < {SUMMATION_TOL:e}"),
    );
}

fn exact_fixed_point(report: &mut Report) {
    let times = echo_times();
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for span in [CollocationSpan::EchoRange, CollocationSpan::Full] {
        let grid = PinnConfig {
            collocation_span: span,
            ..Default::default()
        }
        .grid(&times)
        .unwrap();
        for t2 in [SHORT_T2, 20.0, 50.0, 100.0, 600.0] {
            let exact = ExactDecay::matched(1.0, t2, 90.0);
            let series = synthesize_series(
                &TissueParams::new(1.0, t2).unwrap(),
                &times,
                &NoiseSpec::NONE,
            )
            .unwrap();
            for norm in [ResidualNorm::Squared, ResidualNorm::Absolute] {
                for time in [ResidualTime::Normalized, ResidualTime::Milliseconds] {
                    let w = LossWeights {
                        norm,
                        time,
                        ..Default::default()
                    };
                    let (parts, g) = grad_total(&exact, &grid, &series, &w);
                    worst_loss = worst_loss.max(parts.bloch);
                    worst_grad = g.iter().fold(worst_grad, |m, v| m.max(v.abs()));
                }
            }
        }
    }
    report.line(
        4,
        "exact-solution fixed point",
        worst_loss < FIXED_POINT_LOSS && worst_grad < FIXED_POINT_GRAD,
        format!("max bloch loss {worst_loss:.1e} < {FIXED_POINT_LOSS:e}, max |grad| {worst_grad:.1e} < {FIXED_POINT_GRAD:e}"),
    );
}

struct PhantomRun {
    series: ImageSeries,
    pinn: PinnMaps,
    cfg: RunConfig,
}

fn pool_threads() -> usize {
    if cfg!(feature = "parallel") {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        1
    }
}

fn phantom_regression(report: &mut Report) -> PhantomRun {
    let cfg = RunConfig::default();
    let phantom = make_phantom(&cfg.phantom).unwrap();
    let truth = phantom.t2_map();
    let series = phantom.series(&cfg.times, &cfg.noise).unwrap();
    let mask = build_mask(&series, cfg.mask_fraction).unwrap();

    let lsq = map_lsq(&series, &mask, &cfg.lsq, 0).unwrap();
    let lsq_score = score_map(&lsq.t2, &truth).unwrap();

    let start = Instant::now();
    let pinn = map_pinn(&series, &mask, &cfg.pinn, 0).unwrap();
    let elapsed = start.elapsed();
    let pinn_score = score_map(&pinn.maps.t2, &truth).unwrap();

    // thread-count independence on two voxels per tube, which must also
    // agree with the full-map run
    let mut subset = vec![false; mask.len()];
    for region in 0..phantom.region_params().len() {
        let voxels = phantom
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(region))
            .map(|(i, _)| i);
        for idx in voxels.take(2) {
            subset[idx] = true;
        }
    }
    let one = map_pinn(&series, &subset, &cfg.pinn, 1).unwrap();
    let three = map_pinn(&series, &subset, &cfg.pinn, 3).unwrap();
    let bits = |m: &ParameterMap, i: usize| m.values()[i].to_bits();
    let identical = one == three
        && subset
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .all(|(i, _)| {
                bits(&one.maps.t2, i) == bits(&pinn.maps.t2, i)
                    && bits(&one.maps.m0, i) == bits(&pinn.maps.m0, i)
                    && one.field.nets()[i] == pinn.field.nets()[i]
            });

    let threads = pool_threads();
    let (time_pass, time_note) = if threads >= PHANTOM_REFERENCE_THREADS {
        (
            elapsed < PHANTOM_BUDGET,
            format!("{:.0} s on {threads} threads", elapsed.as_secs_f64()),
        )
    } else {
        // the map is embarrassingly parallel; project to the reference
        // thread count assuming linear scaling
        let projected = elapsed.mul_f64(threads as f64 / PHANTOM_REFERENCE_THREADS as f64);
        (
            projected < PHANTOM_BUDGET,
            format!(
                "{:.0} s on {threads} thread(s), projected {:.0} s on {PHANTOM_REFERENCE_THREADS}",
                elapsed.as_secs_f64(),
                projected.as_secs_f64()
            ),
        )
    };

    let lsq_worst = lsq_score.worst_median_rel_error();
    let pinn_worst = pinn_score.worst_median_rel_error();
    let scored = lsq_score.regions.len() == 14 && pinn_score.regions.len() == 14;
    report.line(
        5,
        "phantom regression",
        scored && lsq_worst < PHANTOM_LSQ_TOL && pinn_worst < PHANTOM_PINN_TOL && time_pass && identical,
        format!(
            "{} tubes, worst tube median error lsq {:.2}% < {}%, pinn {:.2}% < {}%; {time_note} < {} s; thread counts {}",
            pinn_score.regions.len(),
            100.0 * lsq_worst,
            100.0 * PHANTOM_LSQ_TOL,
            100.0 * pinn_worst,
            100.0 * PHANTOM_PINN_TOL,
            PHANTOM_BUDGET.as_secs(),
            if identical { "bit-identical" } else { "DIFFER" }
        ),
    );
    for (lsq_r, pinn_r) in lsq_score.regions.iter().zip(&pinn_score.regions) {
        println!(
            "    tube T2 {:>7.3}: {:>3} voxels, lsq {:+.2}%, pinn {:+.2}% ({} fitted)",
            lsq_r.truth,
            lsq_r.voxels,
            100.0 * (lsq_r.median_estimate - lsq_r.truth) / lsq_r.truth,
            100.0 * (pinn_r.median_estimate - pinn_r.truth) / pinn_r.truth,
            pinn_r.fitted
        );
    }
    PhantomRun { series, pinn, cfg }
}

fn data_generation(report: &mut Report, run: &PhantomRun) {
    let frames = generate_frames(&run.pinn.field, run.series.times()).unwrap();
    let norm = run.cfg.pinn.weights.norm;
    let n = run.series.dims().len();
    let mut checked = 0;
    let mut worst_ratio = 0.0f64;
    for (idx, net) in run.pinn.field.nets().iter().enumerate() {
        let (Some(net), Some(fit)) = (net, &run.pinn.maps.fits[idx]) else {
            continue;
        };
        let mae = (0..run.series.frame_count())
            .map(|i| (frames.frame(i)[idx] - run.series.frame(i)[idx]).abs())
            .sum::<f64>()
            / run.series.frame_count() as f64;
        // the data loss is measured on the signal divided by `scale`; a
        // squared loss is brought back to amplitude units by its root
        let bound = net.scale
            * match norm {
                ResidualNorm::Absolute => fit.loss_data,
                ResidualNorm::Squared => fit.loss_data.sqrt(),
            };
        worst_ratio = worst_ratio.max(mae / bound);
        checked += 1;
    }
    let at_zero = generate_frames(&run.pinn.field, &[0.0]).unwrap();
    let m0 = &run.pinn.maps.m0;
    let exact_m0 =
        (0..n).all(|i| !m0.mask()[i] || at_zero.frame(0)[i].to_bits() == m0.values()[i].to_bits());
    report.line(
        6,
        "data generation",
        checked > 0 && worst_ratio <= GENERATION_FACTOR && exact_m0,
        format!(
            "{checked} voxels, worst MAE / data loss {worst_ratio:.3} <= {GENERATION_FACTOR}, t=0 frame {} m0 map",
            if exact_m0 { "equals" } else { "DIFFERS FROM" }
        ),
    );
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        phantom: PhantomLayout::tube_lattice(16, 32, 1.5, &[SHORT_T2, 40.0, 200.0]),
        ..Default::default()
    }
    .with_seed(707);
    cfg.pinn.collocation_points = 201;
    cfg.pinn.train.max_iters = 400;
    cfg.pinn.train.extension_iters = 100;
    cfg
}

fn run_manifest(manifest_text: &str) -> (ParameterMap, ParameterMap, PinnMaps) {
    let manifest = RunManifest::from_toml(manifest_text).unwrap();
    let cfg = manifest.config;
    let series = make_phantom(&cfg.phantom)
        .unwrap()
        .series(&cfg.times, &cfg.noise)
        .unwrap();
    let mask = build_mask(&series, cfg.mask_fraction).unwrap();
    let lsq = map_lsq(&series, &mask, &cfg.lsq, manifest.threads).unwrap();
    let pinn = map_pinn(&series, &mask, &cfg.pinn, manifest.threads).unwrap();
    (lsq.t2, lsq.m0, pinn)
}

fn determinism_and_round_trip(report: &mut Report) {
    let cfg = small_run_config();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "fit".into(),
        threads: 0,
        inputs: vec![],
        outputs: vec![],
        config: cfg.clone(),
    };
    let text = manifest.to_toml();
    let first = run_manifest(&text);
    let second = run_manifest(&text);
    let maps_identical = first == second;

    let mut failures = Vec::new();
    if RunConfig::from_toml(&cfg.to_toml()).unwrap() != cfg {
        failures.push("config");
    }
    if RunManifest::from_toml(&text).unwrap() != manifest {
        failures.push("manifest");
    }
    if PhantomLayout::from_toml(&cfg.phantom.to_toml()).unwrap() != cfg.phantom {
        failures.push("phantom layout");
    }

    // payloads are 32-bit: values that are already f32 come back exactly
    // and re-writing a read file reproduces its bytes
    let series = make_phantom(&cfg.phantom)
        .unwrap()
        .series(&cfg.times, &cfg.noise)
        .unwrap();
    let f32_series = ImageSeries::new(
        series.dims(),
        series.times().iter().map(|&t| t as f32 as f64).collect(),
        series.data().iter().map(|&v| v as f32 as f64).collect(),
    )
    .unwrap();
    let mut bytes = Vec::new();
    write_series(&mut bytes, &f32_series).unwrap();
    let back = read_series(&mut Cursor::new(&bytes)).unwrap();
    let mut again = Vec::new();
    write_series(&mut again, &back).unwrap();
    if back != f32_series || again != bytes {
        failures.push("series");
    }

    let pinn = &first.2;
    for map in [&first.0, &first.1, &pinn.maps.residual] {
        let f32_map = ParameterMap::new(
            map.dims(),
            map.kind(),
            map.values().iter().map(|&v| v as f32 as f64).collect(),
            map.mask().to_vec(),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_map(&mut bytes, &f32_map).unwrap();
        let back = read_map(&mut Cursor::new(&bytes)).unwrap();
        let mut again = Vec::new();
        write_map(&mut again, &back).unwrap();
        if back != f32_map || again != bytes {
            failures.push("map");
        }
    }

    let mut bytes = Vec::new();
    write_field(&mut bytes, &pinn.field).unwrap();
    if read_field(&mut Cursor::new(&bytes)).unwrap() != pinn.field {
        failures.push("field");
    }

    let diff = ParameterMap::new(
        Dims::new(1, 4),
        MapKind::Diff,
        vec![-1.0, 0.0, 1.0, 7.0],
        vec![true, true, true, false],
    )
    .unwrap();
    let window = Window {
        low: -1.0,
        high: 1.0,
    };
    let mut png_bytes = Vec::new();
    write_png(&mut png_bytes, &diff, window).unwrap();
    let mut reader = png::Decoder::new(Cursor::new(png_bytes))
        .read_info()
        .unwrap();
    let mut pixels = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut pixels).unwrap();
    let expect: Vec<u8> = diff.values().iter().map(|&v| window.gray(v)).collect();
    if pixels[..4] != expect[..] {
        failures.push("png");
    }

    report.line(
        7,
        "determinism and round trip",
        maps_identical && failures.is_empty(),
        format!(
            "repeated manifest run {}; round trips: {}",
            if maps_identical {
                "bit-identical"
            } else {
                "DIFFERS"
            },
            if failures.is_empty() {
                "config, manifest, layout, series, map, field, png exact".to_string()
            } else {
                format!("FAILED {failures:?}")
            }
        ),
    );
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    gradient_correctness(&mut report);
    noiseless_recovery(&mut report);
    loss_composition(&mut report);
    exact_fixed_point(&mut report);
    let run = phantom_regression(&mut report);
    data_generation(&mut report, &run);
    determinism_and_round_trip(&mut report);
    if report.failed == 0 {
        println!("acceptance: all 7 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 7 criteria fail", report.failed);
        ExitCode::FAILURE
    }
}
