//! Acceptance gate: nine end-to-end checks (A1-A9) covering identity at
//! init, the scaler formula, loss invariances, the flicker sweep against
//! closed-form statistics, training efficacy, gradient integrity, kernel
//! oracles, format round trips, and latency scaling.
//!
//! Each check prints one `An PASS ...` or `An FAIL ...` line; run with
//! `cargo test -p vdpp --test acceptance -- --nocapture` to see them.
//! Checks with wall-clock budgets take a shared lock so they are timed
//! without competing with each other.

use std::sync::Mutex;
use std::time::Instant;

use vdpp::geometry::{bilinear_resample, median_of, scale_factor, sobel, ScalerParams};
use vdpp::io::{read_pfm, write_pfm, DepthSequence};
use vdpp::loss::{spatial_coeffs, spatial_loss, tgm_loss, total_loss_frozen, LossWeights};
use vdpp::metrics::{bench_d2v, evaluate, tgse, AlignMode};
use vdpp::refiner::{
    load_model, refine_sequence, save_model, RefinerConfig, RefinerGraph, RefinerModel,
};
use vdpp::rng::SplitMix64;
use vdpp::synth::{default_grid, gen_scene, perturb_noise, perturb_scale, sweep, PerturbSpec,
    SceneSpec};
use vdpp::tensor::{grad_check_multi_floor, Tape, Tensor, Var};
use vdpp::train::{train, Corpus, TrainConfig};

/// Serializes the budgeted checks (A4, A5, A6, A9).
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(label: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(msg) => println!("{label} PASS {msg}"),
        Err(msg) => {
            println!("{label} FAIL {msg}");
            panic!("{label}: {msg}");
        }
    }
}

fn es(e: vdpp::Error) -> String {
    e.to_string()
}

fn rand_frame(h: usize, w: usize, lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::new(&[h, w], (0..h * w).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn rand_seq(t: usize, h: usize, w: usize, seed: u64) -> DepthSequence {
    let mut rng = SplitMix64::new(seed);
    let frames = (0..t).map(|_| rand_frame(h, w, 0.5, 3.0, &mut rng)).collect();
    DepthSequence::new(frames, None).unwrap()
}

/// Values on the 1/64 grid so sums and differences of like values are exact
/// in 64-bit floats.
fn grid_frame(h: usize, w: usize, rng: &mut SplitMix64) -> Tensor {
    let data = (0..h * w).map(|_| (rng.below(193) + 16) as f64 / 64.0).collect();
    Tensor::new(&[h, w], data).unwrap()
}

fn nonzero_head(model: &mut RefinerModel, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for name in ["head.w", "head.b"] {
        let shape = model.param(name).unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        let t = Tensor::new(&shape, (0..n).map(|_| rng.uniform(-0.05, 0.05)).collect()).unwrap();
        model.set_param(name, t).unwrap();
    }
}

#[test]
fn a1_identity_at_init() {
    report("A1", (|| {
        let model = RefinerModel::init(RefinerConfig::default()).map_err(es)?;
        for seed in 0..10u64 {
            let seq = rand_seq(16, 64, 64, 100 + seed);
            let out = refine_sequence(&seq, ScalerParams::default(), &model).map_err(es)?;
            if !out.bit_eq(&seq) {
                return Err(format!("sequence {seed}: refined output differs from the input"));
            }
        }
        Ok("fresh model with a=b=0 reproduced 10 random 64x64x16 sequences bit for bit".into())
    })());
}

#[test]
fn a2_scale_factor_formula_and_bounds() {
    report("A2", (|| {
        let got = scale_factor(1.0, 0.0, 1.0);
        let want = (-1.0f64).tanh().exp();
        if (got - want).abs() >= 1e-9 {
            return Err(format!("factor(1,0,1) = {got}, want exp(tanh(-1)) = {want}"));
        }
        let (lo, hi) = ((-1.0f64).exp(), 1.0f64.exp());
        let mut rng = SplitMix64::new(2);
        for i in 0..1000 {
            let (a, b) = (rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));
            let m = rng.uniform(1e-3, 5.0);
            let f = scale_factor(a, b, m);
            if !(f > lo && f < hi) {
                return Err(format!("draw {i}: factor {f} escaped (1/e, e)"));
            }
        }
        Ok(format!(
            "factor(1,0,1) = {got:.12} matches exp(tanh(-1)) within 1e-9; 1000 random factors stayed strictly inside (1/e, e)"
        ))
    })());
}

#[test]
fn a3_loss_invariances() {
    report("A3", (|| {
        // An affine image of the target is a perfect fit for the
        // per-frame scale-shift alignment, so the spatial term vanishes.
        let mut rng = SplitMix64::new(3);
        for k in 0..20 {
            let gt: Vec<Tensor> = (0..3).map(|_| rand_frame(8, 8, 0.5, 2.5, &mut rng)).collect();
            let (a, b) = (rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5));
            let tape = Tape::new();
            let pred: Vec<Var> = gt
                .iter()
                .map(|g| {
                    let data = g.data().iter().map(|&v| a * v + b).collect();
                    tape.constant(&Tensor::new(g.shape(), data).unwrap())
                })
                .collect();
            let loss = tape
                .value(spatial_loss(&tape, &pred, &gt).map_err(es)?)
                .map_err(es)?
                .data()[0];
            if loss >= 1e-10 {
                return Err(format!("pair {k}: spatial loss {loss} for an affine image"));
            }
        }

        // A constant offset leaves every temporal difference untouched;
        // on 1/64-grid values the cancellation is exact, not approximate.
        let mut rng = SplitMix64::new(4);
        let gt: Vec<Tensor> = (0..4).map(|_| grid_frame(6, 6, &mut rng)).collect();
        let c = 21.0 / 64.0;
        let shifted: Vec<Tensor> = gt
            .iter()
            .map(|g| Tensor::new(g.shape(), g.data().iter().map(|&v| v + c).collect()).unwrap())
            .collect();
        let tape = Tape::new();
        let pred: Vec<Var> = shifted.iter().map(|f| tape.constant(f)).collect();
        let tg = tape
            .value(tgm_loss(&tape, &pred, &gt, &[1, 2]).map_err(es)?)
            .map_err(es)?
            .data()[0];
        if tg != 0.0 {
            return Err(format!("tgm loss {tg} under a constant offset, want exactly 0"));
        }
        let ts = tgse(&shifted, &gt).map_err(es)?;
        if ts != 0.0 {
            return Err(format!("tgse {ts} under a constant offset, want exactly 0"));
        }
        Ok("spatial loss < 1e-10 on 20 affine pairs; tgm and tgse exactly 0 under a constant offset".into())
    })());
}

#[test]
fn a4_flicker_sweep_matches_closed_form() {
    let _g = heavy_lock();
    report("A4", (|| {
        let start = Instant::now();
        let frames = (0..64).map(|_| Tensor::full(&[64, 64], 1.0).unwrap()).collect();
        let gt = DepthSequence::new(frames, None).map_err(es)?;
        let rows = sweep(&gt, &default_grid(), 20, 424242).map_err(es)?;

        for w in rows.windows(2) {
            if !(w[1].tgse_mean > w[0].tgse_mean) {
                return Err(format!(
                    "tgse not strictly increasing: {} at lambda {} vs {} at {}",
                    w[0].tgse_mean, w[0].lambda, w[1].tgse_mean, w[1].lambda
                ));
            }
        }

        // Per-frame scales are uniform on (1-l, 1+l), so the mean squared
        // frame-to-frame step is 2*Var = 2l^2/3 and the mean absolute
        // deviation from the target is l/2.
        for (idx, l) in [(2usize, 0.1f64), (6, 0.3), (10, 0.5)] {
            let row = &rows[idx];
            let want_tgse = 2.0 * l * l / 3.0;
            let want_absrel = l / 2.0;
            if (row.tgse_mean - want_tgse).abs() > 0.15 * want_tgse {
                return Err(format!(
                    "lambda {l}: mean tgse {} vs analytic {want_tgse} (over 15% off)",
                    row.tgse_mean
                ));
            }
            if (row.absrel_mean - want_absrel).abs() > 0.15 * want_absrel {
                return Err(format!(
                    "lambda {l}: mean absrel {} vs analytic {want_absrel} (over 15% off)",
                    row.absrel_mean
                ));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 120.0 {
            return Err(format!("sweep took {secs:.0} s, budget is 2 min"));
        }
        Ok(format!(
            "tgse strictly increasing over 11 lambdas; at 0.1/0.3/0.5 tgse within 15% of 2l^2/3 and absrel within 15% of l/2 ({secs:.1} s)"
        ))
    })());
}

#[test]
fn a5_training_beats_degraded_input() {
    let _g = heavy_lock();
    report("A5", (|| {
        let start = Instant::now();
        let mut pairs = Vec::new();
        for i in 0..8u64 {
            let spec = SceneSpec {
                seed: i,
                depth_range: (0.8, 1.25),
                velocity: 1.0,
                ..SceneSpec::default()
            };
            let gt = gen_scene(&spec).map_err(es)?;
            let deg = perturb_scale(&gt, &PerturbSpec { lambda: 0.3, seed: 1 + i }).map_err(es)?;
            pairs.push((deg, gt));
        }
        let corpus = Corpus::new(pairs.clone()).map_err(es)?;

        let mut model = RefinerModel::init(RefinerConfig::default()).map_err(es)?;
        let mut scaler = ScalerParams::default();
        let cfg = TrainConfig::default();
        train(&mut model, &mut scaler, &corpus, &cfg, None, None).map_err(es)?;

        let mode = AlignMode::PerSequenceScaleShift;
        let (mut tg_deg, mut tg_ref, mut ar_deg, mut ar_ref) = (0.0, 0.0, 0.0, 0.0);
        for (deg, gt) in &pairs {
            let refined = refine_sequence(deg, scaler, &model).map_err(es)?;
            let rd = evaluate(deg.frames(), gt.frames(), mode).map_err(es)?;
            let rr = evaluate(refined.frames(), gt.frames(), mode).map_err(es)?;
            tg_deg += rd.tgse / 8.0;
            tg_ref += rr.tgse / 8.0;
            ar_deg += rd.abs_rel / 8.0;
            ar_ref += rr.abs_rel / 8.0;
        }
        if !(tg_ref <= 0.5 * tg_deg) {
            return Err(format!(
                "tgse {tg_ref} vs degraded {tg_deg}: refinement must at least halve it"
            ));
        }
        if !(ar_ref <= 1.1 * ar_deg) {
            return Err(format!(
                "aligned absrel {ar_ref} vs degraded {ar_deg}: over the 1.1x allowance"
            ));
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 900.0 {
            return Err(format!("took {secs:.0} s, budget is 15 min"));
        }
        Ok(format!(
            "500 steps on 8 scenes at lambda 0.3: tgse {tg_ref:.6} vs degraded {tg_deg:.6} (ratio {:.3}), aligned absrel ratio {:.3} ({secs:.0} s)",
            tg_ref / tg_deg,
            ar_ref / ar_deg
        ))
    })());
}

#[test]
fn a6_end_to_end_gradients_match_finite_differences() {
    let _g = heavy_lock();
    report("A6", (|| {
        let start = Instant::now();
        let cfg = RefinerConfig {
            patch: 4,
            embed_dim: 16,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            window: 4,
            ratio: 0.5,
            seed: 11,
        };
        let mut model = RefinerModel::init(cfg).map_err(es)?;
        nonzero_head(&mut model, 13);
        let mut rng = SplitMix64::new(19);
        let input: Vec<Tensor> = (0..2).map(|_| rand_frame(16, 16, 0.5, 3.0, &mut rng)).collect();
        let gt: Vec<Tensor> = (0..2).map(|_| rand_frame(16, 16, 0.5, 3.0, &mut rng)).collect();
        let w = LossWeights::default();
        let (a0, b0) = (0.3, -0.2);

        // The alignment coefficients are detached constants in the
        // objective, so the checker must hold them at their base-point
        // values while it perturbs parameters.
        let coeffs = {
            let tape = Tape::new();
            let graph =
                RefinerGraph::new(&tape, &model, ScalerParams { a: a0, b: b0 }, false).map_err(es)?;
            let fv: Vec<Var> = input.iter().map(|f| tape.constant(f)).collect();
            let pred = graph.refine(&fv).map_err(es)?;
            spatial_coeffs(&tape, &pred, &gt).map_err(es)?
        };

        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        let n_params = names.len();
        let mut xs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        xs.push(Tensor::scalar(a0).map_err(es)?);
        xs.push(Tensor::scalar(b0).map_err(es)?);
        let coords: usize = xs.iter().map(|t| t.len()).sum();

        // Floor at 1e-4: coordinates with a structurally zero derivative
        // (key biases cancel inside softmax) read pure roundoff (~1e-10)
        // under central differences, so they are held to absolute
        // agreement at 1e-8 while every measurable coordinate must meet
        // the 1e-4 relative bound.
        let (input2, gt2) = (input.clone(), gt.clone());
        let worst = grad_check_multi_floor(
            move |tape, vs| {
                let named: Vec<(String, Var)> =
                    names.iter().cloned().zip(vs[..n_params].iter().copied()).collect();
                let graph =
                    RefinerGraph::from_vars(tape, cfg, named, vs[n_params], vs[n_params + 1])?;
                let fv: Vec<Var> = input2.iter().map(|f| tape.constant(f)).collect();
                let pred = graph.refine(&fv)?;
                Ok(total_loss_frozen(tape, &pred, &gt2, &w, &coeffs)?.total)
            },
            &xs,
            1e-5,
            1e-4,
        )
        .map_err(es)?;
        if worst >= 1e-4 {
            return Err(format!("worst relative gradient error {worst:.3e}, limit 1e-4"));
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 120.0 {
            return Err(format!("took {secs:.0} s, budget is 2 min"));
        }
        Ok(format!(
            "all {coords} parameter coordinates plus (a, b) on a 2-frame 16x16 instance: worst relative error {worst:.2e} ({secs:.1} s)"
        ))
    })());
}

#[test]
fn a7_kernel_equivalences_against_brute_force() {
    report("A7", (|| {
        const KX: [f64; 9] = [-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125];
        const KY: [f64; 9] = [-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125];
        let brute = |frame: &Tensor, k: &[f64; 9]| -> Tensor {
            let (h, w) = (frame.shape()[0], frame.shape()[1]);
            let x = frame.data();
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for u in 0..3usize {
                        for v in 0..3usize {
                            let ci = (i as i64 + u as i64 - 1).clamp(0, h as i64 - 1) as usize;
                            let cj = (j as i64 + v as i64 - 1).clamp(0, w as i64 - 1) as usize;
                            s += k[u * 3 + v] * x[ci * w + cj];
                        }
                    }
                    out[i * w + j] = s;
                }
            }
            Tensor::new(&[h, w], out).unwrap()
        };
        let mut rng = SplitMix64::new(7);
        let frame = rand_frame(9, 11, -1.0, 2.0, &mut rng);
        let tape = Tape::new();
        let (gx, gy) = sobel(&tape, tape.constant(&frame)).map_err(es)?;
        let mut worst = 0.0f64;
        for (got, want) in [
            (tape.value(gx).map_err(es)?, brute(&frame, &KX)),
            (tape.value(gy).map_err(es)?, brute(&frame, &KY)),
        ] {
            for (a, b) in got.data().iter().zip(want.data()) {
                worst = worst.max((a - b).abs());
                if (a - b).abs() > 1e-12 {
                    return Err(format!("sobel deviates from brute force by {}", (a - b).abs()));
                }
            }
        }

        let a = rand_frame(7, 5, -1.0, 1.0, &mut rng);
        let b = rand_frame(5, 9, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let got = tape
            .value(tape.matmul(tape.constant(&a), tape.constant(&b)).map_err(es)?)
            .map_err(es)?;
        for i in 0..7 {
            for j in 0..9 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 9 + j];
                }
                let d = (got.data()[i * 9 + j] - s).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("matmul deviates from the triple loop by {d}"));
                }
            }
        }

        for n in 1..=25usize {
            for seed in [21u64, 22] {
                let mut r = SplitMix64::new(seed * 100 + n as u64);
                let data: Vec<f64> = (0..n).map(|_| r.uniform(-5.0, 5.0)).collect();
                let mut sorted = data.clone();
                sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let want = if n % 2 == 1 {
                    sorted[n / 2]
                } else {
                    0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
                };
                let got = median_of(&data).map_err(es)?;
                if got != want {
                    return Err(format!("median of {n} values: {got} vs full sort {want}"));
                }
            }
        }
        let mut r = SplitMix64::new(23);
        let dup: Vec<f64> = (0..12).map(|_| r.below(4) as f64).collect();
        let mut sorted = dup.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if median_of(&dup).map_err(es)? != 0.5 * (sorted[5] + sorted[6]) {
            return Err("median disagrees with full sort on duplicate-heavy data".into());
        }

        let frame = rand_frame(6, 7, 0.1, 3.0, &mut rng);
        let tape = Tape::new();
        let same = tape
            .value(bilinear_resample(&tape, tape.constant(&frame), 1.0).map_err(es)?)
            .map_err(es)?;
        if !same.bit_eq(&frame) {
            return Err("ratio-1 resample is not bit-identical".into());
        }
        Ok(format!(
            "sobel and matmul matched brute force (worst gap {worst:.1e}); medians matched a full sort exactly; ratio-1 resample was bit-exact"
        ))
    })());
}

#[test]
fn a8_round_trips_are_exact() {
    report("A8", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

        let mut rng = SplitMix64::new(8);
        let t0 = rand_frame(5, 6, -3.0, 9.0, &mut rng);
        let p = dir.path().join("x.pfm");
        write_pfm(&p, &t0).map_err(es)?;
        let back = read_pfm(&p).map_err(es)?;
        if back.shape() != t0.shape() {
            return Err("pfm round trip changed the shape".into());
        }
        for (&a, &b) in t0.data().iter().zip(back.data()) {
            if b != a as f32 as f64 {
                return Err(format!("pfm round trip: wrote {a}, read {b}"));
            }
        }

        let cfg = RefinerConfig { seed: 77, ..RefinerConfig::default() };
        let mut model = RefinerModel::init(cfg).map_err(es)?;
        nonzero_head(&mut model, 5);
        let scaler = ScalerParams { a: 0.25, b: -0.125 };
        let mp = dir.path().join("m.vdpp");
        save_model(&mp, &model, scaler).map_err(es)?;
        let (loaded, ls) = load_model(&mp).map_err(es)?;
        if !loaded.bit_eq(&model) || ls != scaler {
            return Err("model container round trip is not bit-exact".into());
        }

        let spec = SceneSpec { seed: 5, ..SceneSpec::default() };
        let s1 = gen_scene(&spec).map_err(es)?;
        let s2 = gen_scene(&spec).map_err(es)?;
        if !s1.bit_eq(&s2) {
            return Err("same-seed scene generation diverged".into());
        }
        let ps = PerturbSpec { lambda: 0.3, seed: 9 };
        if !perturb_scale(&s1, &ps)
            .map_err(es)?
            .bit_eq(&perturb_scale(&s1, &ps).map_err(es)?)
        {
            return Err("same-seed scale perturbation diverged".into());
        }
        if !perturb_noise(&s1, 0.05, 9)
            .map_err(es)?
            .bit_eq(&perturb_noise(&s1, 0.05, 9).map_err(es)?)
        {
            return Err("same-seed noise perturbation diverged".into());
        }
        Ok("pfm values exact at 32-bit; model container bit-exact; same-seed synthesis bit-identical".into())
    })());
}

#[test]
fn a9_latency_scales_superlinearly_with_resolution() {
    let _g = heavy_lock();
    report("A9", (|| {
        let model = RefinerModel::init(RefinerConfig::default()).map_err(es)?;
        let base = rand_seq(16, 64, 64, 90);
        let big = rand_seq(16, 128, 128, 91);
        let (ms_base, fps) = bench_d2v(&model, ScalerParams::default(), &base, 1, 5).map_err(es)?;
        if !(ms_base.is_finite() && ms_base > 0.0) {
            return Err(format!("ms/frame {ms_base} is not a positive finite number"));
        }
        if (fps - 1000.0 / ms_base).abs() > 1e-9 * fps {
            return Err(format!("fps {fps} does not equal 1000/ms for ms {ms_base}"));
        }
        let (ms_big, _) = bench_d2v(&model, ScalerParams::default(), &big, 1, 5).map_err(es)?;
        let ratio = ms_big / ms_base;
        if !(ratio > 2.0 && ratio < 8.0) {
            return Err(format!(
                "doubling H and W scaled ms/frame by {ratio:.2} (64x64 {ms_base:.2} ms, 128x128 {ms_big:.2} ms), expected a factor in (2, 8)"
            ));
        }
        Ok(format!(
            "64x64: {ms_base:.1} ms/frame ({fps:.1} fps); 128x128: {ms_big:.1} ms/frame; ratio {ratio:.2} in (2, 8)"
        ))
    })());
}
