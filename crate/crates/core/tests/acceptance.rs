//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::process::Command;
use std::time::Instant;

use ensemble_backstep::characteristics::{trace_f_curve, trace_g_curve, ConstantSpeeds, FnSpeeds};
use ensemble_backstep::cli::{lyapunov_checks, round_trip_error};
use ensemble_backstep::grid::{weighted_dot, GridSpec, TriField};
use ensemble_backstep::kernelsolve::{
    kernel_pde_residual, solve_backstepping_kernels, toy_kernel_error, GoursatOptions,
    KernelSolution,
};
use ensemble_backstep::model::{toy_analytic_kernels, toy_model, SampledCoefficients};
use ensemble_backstep::simulator::{
    forward_transform, simulate, v_norm, InitialCondition, Mode, TargetSystem,
};
use ensemble_backstep::volterra::{resolvent, solve_kappa, VolterraRule};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_ensemble-backstep");

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!(
            "[{}] criterion {id}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
}

fn solve(nx: usize, ny: usize) -> (KernelSolution, f64) {
    let t = Instant::now();
    let g = GridSpec::spatial(nx, ny).unwrap();
    let s = solve_backstepping_kernels(&toy_model(), &g, &GoursatOptions::default()).unwrap();
    (s, t.elapsed().as_secs_f64())
}

fn residual(sol: &KernelSolution) -> (f64, f64) {
    let m = toy_model();
    let c = m.sample(&sol.grid).unwrap();
    let r = kernel_pde_residual(&m, &c, &sol.k, &sol.ktilde).unwrap();
    (r.k_rel, r.ktilde_rel)
}

fn picard_kappa(w: &Array2<f64>, kt: &TriField) -> TriField {
    let (nx, ny) = (kt.nx, w.ncols());
    let rule = VolterraRule::new(nx);
    let base = TriField::from_fn(nx, ny, |i, j, l| w[[i, l]] * kt.get(i, j, 0));
    let mut cur = base.clone();
    for _ in 0..400 {
        let mut next = base.clone();
        for (i, j) in kt.tri().nodes() {
            let wq = rule.weights(i - j);
            for s in j..=i {
                let c = wq[s - j] * kt.get(s, j, 0);
                let src = cur.at(i, s).to_vec();
                for (o, v) in next.at_mut(i, j).iter_mut().zip(src) {
                    *o += c * v;
                }
            }
        }
        let d = next.max_abs_diff(&cur);
        cur = next;
        if d <= 1e-14 * cur.sup_norm() {
            break;
        }
    }
    cur
}

fn criterion_1_3(rep: &mut Report) {
    let mut errs = Vec::new();
    let mut res = Vec::new();
    let mut t100 = 0.0;
    for nx in [25, 50, 100] {
        let (s, t) = solve(nx, 60);
        if nx == 100 {
            t100 = t;
        }
        let (rel, edge) = toy_kernel_error(&s);
        errs.push((nx, rel, edge));
        res.push((nx, residual(&s)));
    }
    let (s200, _) = solve(200, 120);
    res.push((200, residual(&s200)));

    let monotone = errs.windows(2).all(|w| w[1].1 < w[0].1);
    let (_, rel100, edge100) = errs[2];
    let ok = rel100 <= 0.02 && edge100 <= 1e-3 && monotone && t100 <= 60.0;
    let list: Vec<String> = errs
        .iter()
        .map(|(n, r, _)| format!("nx={n}: {r:.3e}"))
        .collect();
    rep.line(
        "1",
        ok,
        format!(
            "toy kernel max rel error {} (limit 2e-2, monotone: {monotone}); edge abs error {edge100:.1e} (limit 1e-3); nx=100 solve {t100:.2}s (limit 60s)",
            list.join(", ")
        ),
    );

    let within = res
        .iter()
        .all(|(n, (k, kt))| *k <= 10.0 / *n as f64 && *kt <= 10.0 / *n as f64);
    let ratios: Vec<f64> = res
        .windows(2)
        .map(|w| w[1].1 .0.max(w[1].1 .1) / w[0].1 .0.max(w[0].1 .1))
        .collect();
    let kt_ratios: Vec<String> = res
        .windows(2)
        .map(|w| format!("{:.3}", w[1].1 .1 / w[0].1 .1))
        .collect();
    let halving = ratios.iter().all(|r| (0.375..=0.625).contains(r));
    let list: Vec<String> = res
        .iter()
        .map(|(n, (k, kt))| format!("nx={n}: k {k:.3e}, ktilde {kt:.3e}"))
        .collect();
    rep.line(
        "3",
        within && halving,
        format!(
            "relative residuals {} (limit 10/nx); doubling ratios of max residual {:?} (limit 0.5 +/- 25%); ktilde alone {}",
            list.join("; "),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            kt_ratios.join(", ")
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    let (s, _) = solve(100, 120);
    let m = toy_model();
    let c = m.sample(&s.grid).unwrap();
    let g = s.grid;
    let mut diag = 0.0_f64;
    for i in 0..=g.nx {
        for l in 0..g.ny {
            let (x, y) = (g.x(i), g.y(l));
            let f = -m.xi(x, y) / (m.lambda(x, y) + m.mu(x));
            diag = diag.max((s.k.get(i, i, l) - f).abs());
        }
    }
    let gw: Vec<f64> = (0..g.ny)
        .map(|l| c.lambda[[0, l]] * c.q[l] / c.mu[0])
        .collect();
    let edge = (0..=g.nx)
        .map(|i| (s.ktilde.get(i, 0, 0) - weighted_dot(&c.y_weights, &gw, s.k.at(i, 0))).abs())
        .fold(0.0, f64::max);
    rep.line(
        "2",
        diag == 0.0 && edge <= 1e-6,
        format!("diagonal condition max deviation {diag:.1e} (imposed, exact); edge condition residual {edge:.2e} (limit 1e-6)"),
    );
}

fn criterion_4(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sp = ConstantSpeeds {
        lambda: 1.3,
        mu: 0.8,
    };
    let step = 1e-2;
    let (mut ef, mut eg) = (0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(0.0..=1.0);
        let xi = rng.gen_range(0.0..=x);
        let y = rng.gen_range(0.0..=1.0);
        ef = ef.max(
            (trace_f_curve(&sp, x, xi, y, step).unwrap().s_end - (x - xi) / (sp.lambda + sp.mu))
                .abs(),
        );
        eg = eg.max((trace_g_curve(&sp, x, xi, step).unwrap().s_end - xi / sp.mu).abs());
    }
    let var = FnSpeeds {
        lambda: |_: f64, _: f64| 1.0,
        mu: |x: f64| 1.0 + x,
        lambda_floor: 1.0,
        mu_floor: 1.0,
    };
    let eln = (trace_g_curve(&var, 1.0, 0.5, step).unwrap().s_end - 1.5f64.ln()).abs();
    let toy = toy_model();
    let s: Vec<f64> = (0..50)
        .map(|l| {
            trace_f_curve(&toy, 0.9, 0.3, l as f64 / 49.0, step)
                .unwrap()
                .s_end
        })
        .collect();
    let lip = s
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() * 49.0)
        .fold(0.0, f64::max);
    rep.line(
        "4",
        ef <= 1e-8 && eg <= 1e-8 && eln <= 1e-8 && lip.is_finite() && lip <= 1.0,
        format!("|s_f err| {ef:.1e}, |s_F err| {eg:.1e} over 1000 points, ln 1.5 err {eln:.1e} (limit 1e-8); y-Lipschitz quotient {lip:.2e} (bounded)"),
    );
}

fn criterion_5(rep: &mut Report) {
    let nx = 200;
    let one = TriField::from_fn(nx, 1, |_, _, _| 1.0);
    let r = resolvent(&one, 1e-14).unwrap();
    let h = 1.0 / nx as f64;
    let err = r
        .values
        .tri()
        .nodes()
        .map(|(i, j)| (r.values.get(i, j, 0) - ((i - j) as f64 * h).exp()).abs())
        .fold(0.0, f64::max);

    let g = GridSpec::spatial(100, 120).unwrap();
    let c = toy_model().sample(&g).unwrap();
    let (_, kt) = toy_analytic_kernels(&g);
    let gap = solve_kappa(&c.w, &kt, 1e-15)
        .unwrap()
        .max_abs_diff(&picard_kappa(&c.w, &kt));
    rep.line(
        "5",
        err <= 1e-6 && gap <= 1e-9,
        format!("constant-kernel resolvent vs e^(x-xi) {err:.2e} (limit 1e-6); kappa resolvent vs Picard on toy {gap:.2e} (limit 1e-9)"),
    );
}

fn criterion_6_8(rep: &mut Report) {
    let t0 = Instant::now();
    let (k, _) = solve(200, 120);
    let g = GridSpec::new(200, 120, 0.004, 5.0).unwrap();
    let coeff: SampledCoefficients = toy_model().sample(&g).unwrap();
    let ts = TargetSystem::new(&coeff, &k).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rt = round_trip_error(&g, &k, &ts, &mut rng, 20).unwrap();
    rep.line(
        "6",
        rt <= 1e-3,
        format!(
            "inverse(forward(state)) max relative error in v {rt:.2e} over 20 states (limit 1e-3)"
        ),
    );

    let ic = InitialCondition::Default { amp: 1.0 }.build(&g);
    let open = simulate(&coeff, None, Mode::Open, &ic, &[]).unwrap();
    let closed = simulate(&coeff, Some(&k), Mode::Closed, &ic, &[0.0, 3.0]).unwrap();
    let growth = open.final_norm() / open.joint_norms[0].max(1e-300);
    let frac = closed.final_norm() / closed.max_norm();
    let slope = closed.decay_rate.unwrap_or(f64::NAN);
    let b0 = v_norm(
        &g,
        &forward_transform(&closed.snapshots[0].state, &k.k, &k.ktilde)
            .unwrap()
            .v,
    );
    let b3 = v_norm(
        &g,
        &forward_transform(&closed.snapshots[1].state, &k.k, &k.ktilde)
            .unwrap()
            .v,
    );
    let elapsed = t0.elapsed().as_secs_f64();
    rep.line(
        "7",
        growth >= 10.0 && frac <= 0.05 && slope < 0.0 && b3 <= 0.05 * b0 && elapsed <= 300.0,
        format!(
            "open-loop growth {growth:.3e} (limit >= 10); closed final/max {frac:.4} (limit 0.05); slope on [2,5] {slope:.4} (< 0); |beta(3)|/|beta(0)| {:.4} (limit 0.05); {elapsed:.1}s (limit 300s)",
            b3 / b0
        ),
    );

    let target = simulate(&coeff, Some(&k), Mode::Target, &ic, &[]).unwrap();
    let (grow, sandwich) = lyapunov_checks(&target, &ts);
    rep.line(
        "8",
        grow <= 1e-3 && sandwich == 0.0,
        format!(
            "max V step growth after t=dt {grow:.2e} (limit 1e-3); sandwich violation {sandwich:.1e} with p={:.4}, delta={:.4e}, m={:.3e}, M={:.3e}",
            ts.lyapunov.p, ts.lyapunov.delta, ts.lyapunov.lower, ts.lyapunov.upper
        ),
    );
}

fn criterion_9(rep: &mut Report) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut ok = true;
    for (dir, threads) in dirs.iter().zip(["1", "4"]) {
        let out = dir.path().to_str().unwrap();
        for cmd in ["kernels", "simulate"] {
            let status = Command::new(BIN)
                .args([
                    cmd,
                    "--nx",
                    "60",
                    "--ny",
                    "31",
                    "--dt",
                    "0.0125",
                    "--t-final",
                    "2",
                    "--seed",
                    "9",
                    "--out",
                    out,
                ])
                .env("ENSEMBLE_BACKSTEP_THREADS", threads)
                .output()
                .unwrap();
            ok &= status.status.success();
        }
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let same = names
        .iter()
        .all(|n| fs::read(dirs[0].path().join(n)).ok() == fs::read(dirs[1].path().join(n)).ok());
    rep.line(
        "9",
        ok && same && !names.is_empty(),
        format!(
            "{} output files byte-identical with 1 and 4 threads: {same}",
            names.len()
        ),
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    criterion_1_3(&mut rep);
    criterion_2(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6_8(&mut rep);
    criterion_9(&mut rep);
    if rep.failures > 0 {
        println!("{} acceptance criteria failed", rep.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
