//! Acceptance criteria. Prints one PASS/FAIL line per criterion; every
//! tolerance is a constant below.
//!
//! The process exits 0 once every criterion has been evaluated. Set
//! `YYF_ACCEPTANCE_STRICT=1` to exit nonzero on any FAIL.

mod common;

use std::time::Instant;

use rayon::prelude::*;
use yyf_core::baselines::{bootstrap_pf, kalman_filter};
use yyf_core::diagnostics::{
    convergence_sweep, exp_moment_lemma_check, l4_stability_check, pde_l4_growth_check,
    radius_sweep, CheckOptions, Oracle, SweepOptions,
};
use yyf_core::pde::{assemble_generator, discretize_initial, exp_update, mollifier_value, propagate};
use yyf_core::*;

const RADIUS: f64 = 6.0;
const POINTS: usize = 241;
const SUBSTEPS: usize = 4;

const C1_SEEDS: u64 = 50;
const C1_STEPS: usize = 1000;
const C1_TOLERANCE: f64 = 0.05 * std::f64::consts::FRAC_1_SQRT_2;
const C1_RUNTIME_SECS: f64 = 300.0;

const C2_DELTAS: [f64; 4] = [0.02, 0.01, 0.005, 0.0025];
const C2_SEEDS: u64 = 50;
const C2_SLOPE_BAND: (f64, f64) = (0.35, 0.65);
const C2_HALVING: f64 = 0.5;

const C3_RADII: [f64; 3] = [3.0, 4.5, 6.0];
const C3_SPACING: f64 = 0.05;
const C3_SEEDS: u64 = 20;
const C3_TAIL_ORDER: u32 = 2;
const C3_BOUND_FACTOR: f64 = 1.5;

const C5_MODELS: [&str; 2] = ["benes", "cubic_sensor"];
const C5_SEEDS: u64 = 20;
const C5_PARTICLES: usize = 100_000;
const C5_SE_MULTIPLE: f64 = 3.0;
const C5_FRACTION: f64 = 0.9;
const C5_PF_SEED_OFFSET: u64 = 1_000_003;

const C6_STEPS: [usize; 3] = [100, 200, 400];
const C6_SEEDS: u64 = 20;
const C6_SPREAD: f64 = 0.2;

const C7_LEVEL: f64 = 0.5;
const C7_DELTAS: [f64; 2] = [0.01, 0.001];
const C7_SAMPLES: usize = 10_000;
const C7_SEED: u64 = 7;

const C8_STEPS: usize = 100;
const C8_FIT_TIME: f64 = 0.1;

const C9_STENCIL_RATIO: (f64, f64) = (3.5, 4.5);
const C9_HEAT_RELATIVE: f64 = 1e-3;
const C9_ADDITIVITY: f64 = 1e-12;
const C9_UNIT_MASS: f64 = 1e-12;
const C9_CLAMP_RATIO: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn grid_1d() -> std::sync::Arc<Grid> {
    build_grid(1, RADIUS, POINTS).unwrap()
}

/// The default substep count, raised where the explicit half of
/// Crank–Nicolson would otherwise turn negative on the diagonal.
fn substeps_for(m: &FilterModel, g: &std::sync::Arc<Grid>, delta: f64) -> Result<usize> {
    Ok(SUBSTEPS.max(assemble_generator(m, g)?.positivity_substeps(delta)))
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn c1() -> Result<Outcome> {
    let start = Instant::now();
    let m = builtin_model("linear1d")?;
    let s = TimeSchedule::new(1.0, C1_STEPS)?;
    let f = YauYauFilter::new(&m, &grid_1d(), s.delta(), FilterOptions::default())?;
    let phi = [TestFunction::coordinate(0)];
    let per_seed: Vec<f64> = seeds(C1_SEEDS)
        .par_iter()
        .map(|&seed| {
            let (_, y) = simulate(&m, &s, SUBSTEPS, seed)?;
            let yy = f.run(&y, &phi)?;
            let kf = kalman_filter(&m, &s, &y)?;
            Ok((1..=C1_STEPS).map(|k| (yy.estimates[k][0] - kf.means[k][0]).abs()).sum::<f64>() / C1_STEPS as f64)
        })
        .collect::<Result<_>>()?;
    let err = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: err <= C1_TOLERANCE && secs <= C1_RUNTIME_SECS,
        detail: format!(
            "mean |yy - kalman| = {err:.5} (<= {C1_TOLERANCE:.5}), runtime {secs:.1} s (<= {C1_RUNTIME_SECS} s)"
        ),
    })
}

fn c2() -> Result<Outcome> {
    let m = builtin_model("linear1d")?;
    let r = convergence_sweep(
        &m,
        &grid_1d(),
        1.0,
        &C2_DELTAS,
        &seeds(C2_SEEDS),
        Oracle::Kalman,
        &TestFunction::coordinate(0),
        &SweepOptions::default(),
    )?;
    let fit = r.fit.as_ref().expect("four δ values define a slope");
    let first = r.rows.first().unwrap().mean_err;
    let last = r.rows.last().unwrap().mean_err;
    let in_band = (C2_SLOPE_BAND.0..=C2_SLOPE_BAND.1).contains(&fit.slope);
    let halved = last <= C2_HALVING * first;
    let errs: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("{}: {:.5}±{:.5}", row.value, row.mean_err, row.stderr))
        .collect();
    Ok(Outcome {
        pass: in_band && halved,
        detail: format!(
            "slope {:.3} ± {:.3} (band [{}, {}]: {}), err(0.0025)/err(0.02) = {:.3} (<= {C2_HALVING}: {}); errors [{}]",
            fit.slope,
            fit.slope_ci,
            C2_SLOPE_BAND.0,
            C2_SLOPE_BAND.1,
            verdict(in_band),
            last / first,
            verdict(halved),
            errs.join(", ")
        ),
    })
}

fn c3_c4() -> Result<(Outcome, Outcome)> {
    let m = builtin_model("linear1d")?;
    let s = TimeSchedule::new(1.0, C1_STEPS)?;
    let r = radius_sweep(
        &m,
        &s,
        &C3_RADII,
        C3_SPACING,
        &seeds(C3_SEEDS),
        &TestFunction::coordinate(0),
        C3_TAIL_ORDER,
        &SweepOptions::default(),
    )?;
    let monotone = r.tail.windows(2).all(|w| w[1] <= w[0]);
    let bounded = (1..C3_RADII.len()).all(|i| r.tail[i] <= C3_BOUND_FACTOR * r.bound[i]);
    let c3 = Outcome {
        pass: monotone && bounded,
        detail: format!(
            "tail {:?} (monotone: {}), bound C/(1+R^4) with C = {:.3e}: {:?} (x{C3_BOUND_FACTOR}: {})",
            sci(&r.tail),
            verdict(monotone),
            r.bound_constant,
            sci(&r.bound),
            verdict(bounded)
        ),
    };
    let rows = &r.error.rows;
    let decreasing = rows
        .windows(2)
        .all(|w| w[1].mean_err <= w[0].mean_err + w[0].stderr.max(w[1].stderr));
    let errs: Vec<String> = rows
        .iter()
        .map(|row| format!("R={}: {:.3e}±{:.1e}", row.value, row.mean_err, row.stderr))
        .collect();
    let c4 = Outcome {
        pass: decreasing,
        detail: format!("mean |est(R) - est(6)| [{}]", errs.join(", ")),
    };
    Ok((c3, c4))
}

fn c5() -> Result<Outcome> {
    let s = TimeSchedule::new(1.0, C1_STEPS)?;
    let phi = [TestFunction::coordinate(0)];
    let mut pass = true;
    let mut parts = Vec::new();
    for name in C5_MODELS {
        let m = builtin_model(name)?;
        let g = grid_1d();
        let substeps = substeps_for(&m, &g, s.delta())?;
        let opts = FilterOptions {
            substeps,
            ..FilterOptions::default()
        };
        let f = YauYauFilter::new(&m, &g, s.delta(), opts)?;
        let mut fractions = Vec::new();
        for seed in seeds(C5_SEEDS) {
            let (_, y) = simulate(&m, &s, SUBSTEPS, seed)?;
            let yy = f.run(&y, &phi)?;
            let pf = bootstrap_pf(&m, &s, &y, &phi, C5_PARTICLES, seed + C5_PF_SEED_OFFSET)?;
            let within = (1..=C1_STEPS)
                .filter(|&k| (yy.estimates[k][0] - pf.estimates[k][0]).abs() <= C5_SE_MULTIPLE * pf.stderr[k][0])
                .count();
            fractions.push(within as f64 / C1_STEPS as f64);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        let worst = fractions.iter().cloned().fold(1.0, f64::min);
        pass &= mean >= C5_FRACTION;
        parts.push(format!(
            "{name} ({substeps} substeps): {:.1}% of knots within 3 SE (worst seed {:.1}%)",
            100.0 * mean,
            100.0 * worst
        ));
    }
    Ok(Outcome {
        pass,
        detail: format!("{} (>= {}%)", parts.join("; "), 100.0 * C5_FRACTION),
    })
}

fn c6() -> Result<Outcome> {
    let m = builtin_model("linear1d")?;
    let schedules: Vec<TimeSchedule> = C6_STEPS.iter().map(|&k| TimeSchedule::new(1.0, k)).collect::<Result<_>>()?;
    let r = l4_stability_check(&m, &grid_1d(), &schedules, &seeds(C6_SEEDS), &CheckOptions::default())?;
    Ok(Outcome {
        pass: r.spread < C6_SPREAD,
        detail: format!(
            "sup_k E||u_k||^4 {:?} over δ {:?}, spread {:.4} (< {C6_SPREAD})",
            sci(&r.sup_l4),
            r.deltas,
            r.spread
        ),
    })
}

fn c7() -> Result<Outcome> {
    let m = FilterModel::builder("constant_h", 1)
        .observation(1, |_, o| o[0] = C7_LEVEL)
        .build()?;
    let field = discretize_initial(&m, &grid_1d())?;
    let r = exp_moment_lemma_check(&m, &field, &C7_DELTAS, C7_SAMPLES, C7_SEED)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for row in &r.rows {
        let target = (8.0 * C7_LEVEL * C7_LEVEL * row.delta).exp();
        let ok = (row.amplification - target).abs() <= 3.0 * row.stderr;
        pass &= ok;
        parts.push(format!(
            "δ={}: {:.5} ± {:.5} vs e^(8c²δ) = {:.5} ({})",
            row.delta,
            row.amplification,
            row.stderr,
            target,
            verdict(ok)
        ));
    }
    Ok(Outcome {
        pass,
        detail: parts.join("; "),
    })
}

fn c8() -> Result<Outcome> {
    let m = builtin_model("linear1d")?.unobserved();
    let initial = discretize_initial(&m, &grid_1d())?;
    let s = TimeSchedule::new(1.0, C8_STEPS)?;
    let r = pde_l4_growth_check(&m, &initial, &s, SUBSTEPS, C8_FIT_TIME)?;
    let worst = r
        .times
        .iter()
        .zip(&r.ratios)
        .filter(|(t, _)| **t >= C8_FIT_TIME)
        .map(|(t, q)| q / (r.rate * t).exp())
        .fold(0.0, f64::max);
    Ok(Outcome {
        pass: r.pass,
        detail: format!(
            "C = {:.4} fitted at t = {C8_FIT_TIME}; max ratio/e^(Ct) on [{C8_FIT_TIME}, 1] = {worst:.4} (<= 1); bound also holds before the fit time: {}",
            r.rate, r.holds_before_fit
        ),
    })
}

fn c9() -> Result<Outcome> {
    let mut items = Vec::new();

    let r1 = common::stencil_error_1d(41) / common::stencil_error_1d(81);
    let r2 = common::stencil_error_2d(41) / common::stencil_error_2d(81);
    let band = C9_STENCIL_RATIO.0..=C9_STENCIL_RATIO.1;
    items.push((band.contains(&r1) && band.contains(&r2), format!("stencil ratios {r1:.3} (1D), {r2:.3} (2D)")));

    let heat = FilterModel::builder("heat", 1).build()?;
    let g = grid_1d();
    let (s2, delta) = (1.0f64, 0.1f64);
    let gauss = |x: f64, v: f64| (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let f0 = DensityField::from_fn(g.clone(), |x| gauss(x[0], s2))?;
    let (out, _) = propagate(&assemble_generator(&heat, &g)?, &f0, delta, 10)?;
    let sd = (s2 + delta).sqrt();
    let heat_err = g
        .axis()
        .iter()
        .enumerate()
        .filter(|(_, x)| x.abs() <= 3.0 * sd)
        .map(|(i, &x)| (out.represented(i) / gauss(x, s2 + delta) - 1.0).abs())
        .fold(0.0, f64::max);
    items.push((heat_err <= C9_HEAT_RELATIVE, format!("heat kernel rel err {heat_err:.2e}")));

    let cubic = builtin_model("cubic_sensor")?;
    let base = discretize_initial(&cubic, &g)?;
    let mut additivity: f64 = 0.0;
    for (a, b) in [(0.1, -0.05), (0.3, 0.2), (-0.25, 0.01)] {
        let two = exp_update(&exp_update(&base, &cubic, &[a])?, &cubic, &[b])?;
        let one = exp_update(&base, &cubic, &[a + b])?;
        for i in 0..g.node_count() {
            let (x, y) = (two.represented(i), one.represented(i));
            if x != y {
                additivity = additivity.max((x - y).abs() / x.abs().max(y.abs()));
            }
        }
    }
    items.push((additivity <= C9_ADDITIVITY, format!("exp_update additivity {additivity:.1e}")));

    let unit = estimate(&base, &TestFunction::one())?;
    items.push(((unit - 1.0).abs() <= C9_UNIT_MASS, format!("estimate(1) - 1 = {:.1e}", unit - 1.0)));

    let r = RADIUS;
    let plateau = mollifier_value(r - 1.0 / r - 0.01, r) == 1.0
        && mollifier_value(r - 1.0 / r, r) == 1.0
        && mollifier_value(r, r) == 0.0
        && mollifier_value(r + 0.5, r) == 0.0;
    items.push((plateau, "mollifier plateaus".to_string()));

    let mut worst_clamp: f64 = 0.0;
    let mut used = Vec::new();
    for name in BUILTIN_MODELS {
        let m = builtin_model(name)?;
        let (g, s) = if m.dim() == 1 {
            (grid_1d(), TimeSchedule::new(1.0, C1_STEPS)?)
        } else {
            (build_grid(m.dim(), 5.0, 51)?, TimeSchedule::new(1.0, 100)?)
        };
        let (_, y) = simulate(&m, &s, SUBSTEPS, 0)?;
        let substeps = substeps_for(&m, &g, s.delta())?;
        used.push(format!("{name} {substeps}"));
        let opts = FilterOptions {
            substeps,
            clamp_tolerance: f64::INFINITY,
            ..FilterOptions::default()
        };
        let out = YauYauFilter::new(&m, &g, s.delta(), opts)?.run(&y, m.test_functions())?;
        for dg in &out.diagnostics {
            worst_clamp = worst_clamp.max(dg.clamped_mass / dg.mass_mantissa);
        }
    }
    items.push((worst_clamp < C9_CLAMP_RATIO, format!("max clamped/mass {worst_clamp:.1e} (substeps: {})", used.join(", "))));

    Ok(Outcome {
        pass: items.iter().all(|(ok, _)| *ok),
        detail: items
            .iter()
            .map(|(ok, d)| format!("{d} ({})", verdict(*ok)))
            .collect::<Vec<_>>()
            .join("; "),
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "violated"
    }
}

fn sci(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3e}")).collect()
}

fn print(id: &str, title: &str, outcome: &Result<Outcome>, secs: f64) -> bool {
    match outcome {
        Ok(o) => {
            println!("{} {id} {title}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {id} {title}: error: {e} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    let mut passed = 0;
    let mut total = 0;
    let mut record = |id: &str, title: &str, outcome: Result<Outcome>, secs: f64| {
        total += 1;
        if print(id, title, &outcome, secs) {
            passed += 1;
        }
    };
    type Criterion = (&'static str, &'static str, fn() -> Result<Outcome>);
    let single: [Criterion; 7] = [
        ("C1", "Kalman equivalence", c1),
        ("C2", "convergence rate", c2),
        ("C5", "nonlinear cross-validation", c5),
        ("C6", "L4 non-explosion", c6),
        ("C7", "one-step exponential moment", c7),
        ("C8", "PDE L4 growth", c8),
        ("C9", "unit-level suites", c9),
    ];
    for (id, title, run) in &single[..2] {
        let t = Instant::now();
        record(id, title, run(), t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    match c3_c4() {
        Ok((c3, c4)) => {
            let secs = t.elapsed().as_secs_f64();
            record("C3", "tail-mass decay", Ok(c3), secs);
            record("C4", "radius self-consistency", Ok(c4), secs);
        }
        Err(e) => {
            let secs = t.elapsed().as_secs_f64();
            let msg = e.to_string();
            record("C3", "tail-mass decay", Err(Error::InvalidArgument(msg.clone())), secs);
            record("C4", "radius self-consistency", Err(Error::InvalidArgument(msg)), secs);
        }
    }
    for (id, title, run) in &single[2..] {
        let t = Instant::now();
        record(id, title, run(), t.elapsed().as_secs_f64());
    }
    println!("acceptance: {passed}/{total} criteria passed");
    let strict = std::env::var("YYF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < total {
        std::process::exit(1);
    }
}
