//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any fails.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::{diagonal_corpus, lp_max, CorpusEntry};
use nalgebra::{DMatrix, SymmetricEigen};
use psdp_core::decision::{
    certificate_stats, decide, decide_with_sink, is_psd, verify_packing, DecisionOutcome,
    IterationRecord, OutcomeKind, RunInfo, SolverParams, TraceSink,
};
use psdp_core::expdot::{
    apply_truncated_exp, big_dot_exp, taylor_degree, ExpEngineConfig, ExpMode, TaylorOperator,
};
use psdp_core::io::{gen_instance, GenKind};
use psdp_core::linalg::{
    eigendecompose, lambda_max, FactoredPSD, SparseFactor, SymMatrix,
};
use psdp_core::mmwu_check::{golden_thompson_check, replay_mmwu, GainSequence, MmwuReport};
use psdp_core::normalize::{
    normalize_instance, scale_instance, NormalizedInstance, Objective, RawConstraint, RawInstance,
};
use psdp_core::optimizer::{approx_psdp, approx_psdp_with_sink, SearchResult};
use psdp_core::sequential::{decide_sequential, default_sequential_max_iters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 0.1;

/// Checks the per-iteration invariants of every decision run streamed into
/// it, and replays each run's gains through the regret bound.
#[derive(Default)]
struct Audit {
    replay_gains: bool,
    run: Option<RunInfo>,
    iters: usize,
    phases: usize,
    prev: Option<(i64, Vec<usize>)>,
    replay: Option<psdp_core::mmwu_check::MmwuReplay>,

    runs: usize,
    records: usize,
    spectrum_violations: usize,
    l1_violations: usize,
    budget_violations: usize,
    phase_violations: usize,
    monotone_violations: usize,
    worst_spectrum_ratio: f64,
    worst_iter_ratio: f64,
    worst_phase_ratio: f64,
    replays: Vec<MmwuReport>,
    replay_errors: Vec<String>,
}

impl Audit {
    fn with_replay() -> Self {
        Audit {
            replay_gains: true,
            ..Audit::default()
        }
    }

    fn iteration_budget(eps: f64, n: usize) -> f64 {
        20.0 * (n as f64).ln().powi(3) / eps.powi(4)
    }
}

impl TraceSink for Audit {
    fn begin_run(&mut self, info: &RunInfo) {
        self.run = Some(info.clone());
        self.iters = 0;
        self.phases = 0;
        self.prev = None;
        self.replay = if self.replay_gains {
            Some(psdp_core::mmwu_check::MmwuReplay::new(info.n, info.eps).unwrap())
        } else {
            None
        };
    }

    fn record(&mut self, rec: &IterationRecord, gain: Option<&SymMatrix>) {
        let info = self.run.as_ref().expect("record outside a run");
        self.records += 1;
        self.iters += 1;
        let cap = (1.0 + 10.0 * info.eps) * info.k;
        self.worst_spectrum_ratio = self.worst_spectrum_ratio.max(rec.lambda_max_psi / cap);
        if rec.lambda_max_psi.is_nan() || rec.lambda_max_psi > cap + 1e-6 {
            self.spectrum_violations += 1;
        }
        if rec.x_l1 > info.k + info.eps + 1e-9 {
            self.l1_violations += 1;
        }
        match &self.prev {
            Some((p, prev_b)) if *p == rec.p => {
                let prev: HashSet<usize> = prev_b.iter().copied().collect();
                if !rec.b_set.iter().all(|i| prev.contains(i)) {
                    self.monotone_violations += 1;
                }
            }
            _ => self.phases += 1,
        }
        self.prev = Some((rec.p, rec.b_set.clone()));
        if let (Some(r), Some(g)) = (self.replay.as_mut(), gain) {
            if let Err(e) = r.observe(g) {
                self.replay_errors.push(e.to_string());
                self.replay = None;
            }
        }
    }

    fn end_run(&mut self, _kind: OutcomeKind) {
        let info = self.run.take().expect("end outside a run");
        self.runs += 1;
        let budget = Self::iteration_budget(info.eps, info.n);
        self.worst_iter_ratio = self.worst_iter_ratio.max(self.iters as f64 / budget);
        if self.iters as f64 > budget {
            self.budget_violations += 1;
        }
        let phase_cap = 2.0 * info.k / info.eps;
        self.worst_phase_ratio = self.worst_phase_ratio.max(self.phases as f64 / phase_cap);
        if self.phases as f64 > phase_cap {
            self.phase_violations += 1;
        }
        if let Some(r) = self.replay.take() {
            if r.steps() > 0 {
                match r.finish() {
                    Ok(rep) => self.replays.push(rep),
                    Err(e) => self.replay_errors.push(e.to_string()),
                }
            }
        }
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "criterion {id:>2} [{}] {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn random_psd(n: usize, norm: f64, rng: &mut impl Rng) -> SymMatrix {
    let r = rng.random_range(1..=n);
    let g = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    let m = SymMatrix::from_dense_symmetrized(&(&g * g.transpose())).unwrap();
    let l = lambda_max(&m).unwrap();
    if l > 0.0 {
        m.scaled(norm / l)
    } else {
        m
    }
}

fn solve_checked(norm: &NormalizedInstance, opt: f64, audit: &mut Audit) -> (SearchResult, bool, f64) {
    let res = approx_psdp_with_sink(norm, EPS, &ExpEngineConfig::exact(), audit).unwrap();
    let check = verify_packing(norm, &res.best_x, 1e-8).unwrap();
    let ok = check.violation <= 1e-8 && res.best_objective >= (1.0 - EPS) * opt;
    (res, ok, check.violation)
}

fn criterion_1(report: &mut Report, corpus: &[CorpusEntry], audit: &mut Audit) {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst_ratio = f64::INFINITY;
    let mut worst_violation: f64 = 0.0;
    for e in corpus {
        let (res, ok, v) = solve_checked(&e.norm, e.opt, audit);
        worst_ratio = worst_ratio.min(res.best_objective / e.opt);
        worst_violation = worst_violation.max(v);
        if !ok {
            failed.push(e.seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        "oracle equivalence",
        failed.is_empty() && secs < 60.0,
        format!(
            "{} instances, min objective/OPT {worst_ratio:.4}, max violation {worst_violation:.1e}, \
             failed seeds {failed:?}, {secs:.1}s (incl. audit and replay)",
            corpus.len()
        ),
    );
}

fn criterion_2(report: &mut Report, audit: &mut Audit) {
    let mut parts = Vec::new();
    let mut pass = true;
    for n in [4, 16] {
        let norm = normalize_instance(&gen_instance(GenKind::Identity, n, 1, 0).unwrap()).unwrap();
        let (res, _, v) = solve_checked(&norm, 1.0, audit);
        let ok = res.best_objective >= 0.9 && res.best_objective <= 1.0 + 1e-8 && v <= 1e-8;
        pass &= ok;
        parts.push(format!("identity n={n}: {:.6}", res.best_objective));
    }
    for n in [4, 8] {
        let norm = normalize_instance(&gen_instance(GenKind::Basis, n, 1, 0).unwrap()).unwrap();
        let (res, _, v) = solve_checked(&norm, n as f64, audit);
        let ok = res.best_objective >= 0.9 * n as f64 && v <= 1e-8;
        pass &= ok;
        parts.push(format!("basis n={n}: {:.6}", res.best_objective));
    }
    report.line(2, "closed-form optima", pass, parts.join(", "));
}

fn criterion_3(report: &mut Report, audit: &Audit) {
    let pass = audit.spectrum_violations == 0 && audit.l1_violations == 0 && audit.records > 0;
    report.line(
        3,
        "spectrum invariant",
        pass,
        format!(
            "{} runs, {} iterations, spectrum violations {}, l1 violations {}, max lambda/cap {:.4}",
            audit.runs,
            audit.records,
            audit.spectrum_violations,
            audit.l1_violations,
            audit.worst_spectrum_ratio
        ),
    );
}

fn criterion_4(report: &mut Report, corpus: &[CorpusEntry], audit: &mut Audit) {
    let target = (1.0 + EPS).powi(2) - 1e-6;
    let mut failed = Vec::new();
    let mut worst_min_dot = f64::INFINITY;
    let mut worst_trace_err: f64 = 0.0;
    let mut above_one_eps = 0usize;
    for e in corpus.iter().take(20) {
        let scaled = scale_instance(&e.norm, 2.0 * e.opt).unwrap();
        let params = SolverParams::new(EPS, scaled.dim()).unwrap();
        let run = decide_with_sink(&scaled, &params, &mut *audit).unwrap();
        let DecisionOutcome::Infeasible { p } = run.outcome else {
            failed.push(format!("seed {} feasible", e.seed));
            continue;
        };
        let (tr, min_dot) = certificate_stats(&scaled, &p).unwrap();
        worst_min_dot = worst_min_dot.min(min_dot);
        if min_dot > 1.0 + EPS {
            above_one_eps += 1;
        }
        worst_trace_err = worst_trace_err.max((tr - 1.0).abs());
        if (tr - 1.0).abs() > 1e-9 || !is_psd(&p).unwrap() || min_dot < target {
            failed.push(format!("seed {} (min P.A {min_dot:.6})", e.seed));
        }
    }
    report.line(
        4,
        "infeasibility soundness",
        failed.is_empty(),
        format!(
            "20 probes at 2*OPT, min P.A_i {worst_min_dot:.6} (need {target:.6}; \
             {above_one_eps}/20 exceed 1+eps), max |tr P - 1| {worst_trace_err:.1e}, failures {failed:?}"
        ),
    );
}

fn criterion_5(report: &mut Report, audits: &[&Audit]) {
    let sum = |f: fn(&Audit) -> usize| audits.iter().map(|a| f(a)).sum::<usize>();
    let max = |f: fn(&Audit) -> f64| audits.iter().map(|a| f(a)).fold(0.0, f64::max);
    let budget = sum(|a| a.budget_violations);
    let phases = sum(|a| a.phase_violations);
    let monotone = sum(|a| a.monotone_violations);
    report.line(
        5,
        "iteration budget",
        budget == 0 && phases == 0 && monotone == 0 && sum(|a| a.runs) > 0,
        format!(
            "{} runs, budget violations {budget} (max iters/budget {:.2e}), phase violations {phases} \
             (max phases/cap {:.4}), monotone-B violations {monotone}",
            sum(|a| a.runs),
            max(|a| a.worst_iter_ratio),
            max(|a| a.worst_phase_ratio)
        ),
    );
}

fn criterion_6(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst: f64 = 0.0;
    for kappa in [1.0, 4.0, 16.0] {
        for eps in [0.1, 0.01] {
            let k = taylor_degree(kappa, eps).unwrap();
            for _ in 0..100 {
                let n = rng.random_range(1..=6);
                let b = random_psd(n, kappa * rng.random_range(0.05..=1.0), &mut rng);
                let eig = eigendecompose(&b).unwrap();
                // The operator applies the series to Φ/2, so hand it 2B.
                let op = TaylorOperator::with_degree(&b.scaled(2.0), k);
                for (j, &lam) in eig.eigenvalues.iter().enumerate() {
                    let lam = lam.max(0.0);
                    let mut poly = 0.0;
                    let mut term = 1.0;
                    for i in 0..k {
                        poly += term;
                        term *= lam / (i + 1) as f64;
                    }
                    let v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
                    let tv = apply_truncated_exp(&op, &v).unwrap();
                    let rayleigh: f64 = tv.iter().zip(&v).map(|(a, b)| a * b).sum();
                    let e = lam.exp();
                    for value in [poly, rayleigh] {
                        checked += 1;
                        let low = (1.0 - eps) * e - value;
                        let high = value - e;
                        let excess = low.max(high) / e;
                        worst = worst.max(excess);
                        if excess > 1e-12 {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    report.line(
        6,
        "taylor sandwich",
        violations == 0,
        format!("{checked} eigenvalue checks over 600 matrices, violations {violations}, worst relative excess {worst:.1e}"),
    );
}

fn criterion_7(report: &mut Report) {
    let mut total = 0usize;
    let mut within = 0usize;
    for inst in 0..20u64 {
        let n = 4 + (inst % 5) as usize;
        let m = 1 + (inst % 6) as usize;
        let norm = normalize_instance(&gen_instance(GenKind::RandomFactored, n, m, 700 + inst).unwrap())
            .unwrap();
        let mut sum = SymMatrix::zeros(n);
        for a in norm.constraints() {
            a.accumulate_into(&mut sum, 1.0);
        }
        let kappa = 1.0 + (inst % 8) as f64;
        let phi = sum.scaled(kappa / lambda_max(&sum).unwrap());
        let mut taylor = ExpEngineConfig::with_mode(ExpMode::Taylor, EPS, 0);
        taylor.kappa_bound = kappa * (1.0 + 1e-9);
        let reference = big_dot_exp(&phi, norm.constraints(), &taylor).unwrap();
        for seed in 0..10 {
            let mut cfg = ExpEngineConfig::with_mode(ExpMode::TaylorJl, EPS, seed);
            cfg.kappa_bound = taylor.kappa_bound;
            let sketched = big_dot_exp(&phi, norm.constraints(), &cfg).unwrap();
            for (s, r) in sketched.iter().zip(&reference) {
                total += 1;
                if (s / r - 1.0).abs() <= 0.1 {
                    within += 1;
                }
            }
        }
    }
    let fraction = within as f64 / total as f64;

    let mut solve_pass = true;
    let mut parts = Vec::new();
    let cases = [
        (GenKind::Identity, 4, 1.0),
        (GenKind::Identity, 16, 1.0),
        (GenKind::Basis, 4, 4.0),
        (GenKind::Basis, 8, 8.0),
    ];
    for (kind, n, opt) in cases {
        let norm = normalize_instance(&gen_instance(kind, n, 1, 0).unwrap()).unwrap();
        let cfg = ExpEngineConfig::with_mode(ExpMode::TaylorJl, EPS, 0);
        let res = approx_psdp(&norm, EPS, &cfg).unwrap();
        let check = verify_packing(&norm, &res.best_x, 1e-8).unwrap();
        let ok = check.feasible && res.best_objective >= (1.0 - 3.0 * EPS) * opt;
        solve_pass &= ok;
        parts.push(format!("{kind:?} n={n}: {:.4}", res.best_objective));
    }
    report.line(
        7,
        "sketch accuracy",
        fraction >= 0.95 && solve_pass,
        format!(
            "{within}/{total} entries within 10% ({:.2}%), taylor-jl solves [{}]",
            100.0 * fraction,
            parts.join(", ")
        ),
    );
}

fn criterion_8(report: &mut Report, c1_audit: &Audit) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut random_fail = 0usize;
    for s in 0..100 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(1..=50);
        let eps0 = if s % 2 == 0 { 0.1 } else { 0.5 };
        let gains = (0..t)
            .map(|_| {
                let norm = rng.random_range(0.0..=1.0);
                random_psd(n, norm, &mut rng)
            })
            .collect();
        let rep = replay_mmwu(&GainSequence::new(eps0, gains).unwrap()).unwrap();
        if !rep.holds {
            random_fail += 1;
        }
    }
    let trace_fail = c1_audit.replays.iter().filter(|r| !r.holds).count();
    let min_slack = c1_audit
        .replays
        .iter()
        .map(|r| r.slack)
        .fold(f64::INFINITY, f64::min);
    let mut gt_fail = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let a = random_psd(n, rng.random_range(0.0..5.0), &mut rng);
        let b = random_psd(n, rng.random_range(0.0..5.0), &mut rng);
        if !golden_thompson_check(&a, &b).unwrap().holds {
            gt_fail += 1;
        }
    }
    let pass = random_fail == 0
        && trace_fail == 0
        && gt_fail == 0
        && c1_audit.replay_errors.is_empty()
        && !c1_audit.replays.is_empty();
    report.line(
        8,
        "mmwu regret",
        pass,
        format!(
            "random sequences 100 (failures {random_fail}), criterion-1 runs {} (failures {trace_fail}, \
             min slack {min_slack:.3e}, errors {}), golden-thompson 100 (failures {gt_fail})",
            c1_audit.replays.len(),
            c1_audit.replay_errors.len()
        ),
    );
}

fn criterion_9(report: &mut Report, corpus: &[CorpusEntry]) {
    let mut disagreements = Vec::new();
    let mut worst_budget: f64 = 0.0;
    for e in corpus {
        for g in [e.opt / 2.0, 2.0 * e.opt] {
            let scaled = scale_instance(&e.norm, g).unwrap();
            let params = SolverParams::new(EPS, scaled.dim()).unwrap();
            let mmw = decide(&scaled, &params).unwrap();
            let budget = default_sequential_max_iters(EPS, scaled.dim(), scaled.num_constraints());
            match decide_sequential(&scaled, EPS, Some(budget)) {
                Ok(seq) => {
                    worst_budget = worst_budget.max(seq.iterations as f64 / budget as f64);
                    if seq.outcome.kind() != mmw.outcome.kind() {
                        disagreements.push(format!("seed {} g={g:.4}", e.seed));
                    }
                }
                Err(err) => disagreements.push(format!("seed {} g={g:.4}: {err}", e.seed)),
            }
        }
    }
    report.line(
        9,
        "sequential cross-check",
        disagreements.is_empty(),
        format!(
            "{} decisions, disagreements {disagreements:?}, max iterations/budget {worst_budget:.3}",
            2 * corpus.len()
        ),
    );
}

fn dense_sym(m: &DMatrix<f64>) -> SymMatrix {
    SymMatrix::from_dense_symmetrized(m).unwrap()
}

fn criterion_10(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let m = rng.random_range(1..=4);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c = &g * g.transpose() + DMatrix::identity(n, n) * 0.5;
        let mut dense_a = Vec::new();
        let mut bs = Vec::new();
        let cons = (0..m)
            .map(|_| {
                let r = rng.random_range(1..=n);
                let q = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
                let b = rng.random_range(0.2..3.0);
                dense_a.push(&q * q.transpose());
                bs.push(b);
                RawConstraint {
                    a: FactoredPSD::new(SparseFactor::from_dense(&q).unwrap()),
                    b,
                }
            })
            .collect();
        let raw = RawInstance::new(n, Objective::Matrix(dense_sym(&c)), cons).unwrap();
        let norm = normalize_instance(&raw).unwrap();
        let eig = SymmetricEigen::new(c.clone());
        let s = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        for (i, a) in norm.constraints().iter().enumerate() {
            let expected = &s * &dense_a[i] * &s / bs[i];
            let f = a.factor().to_dense();
            let got = &f * f.transpose();
            let err = (&got - &expected).amax() / expected.amax();
            worst = worst.max(err);
        }
    }
    let dense_pass = worst <= 1e-8;

    let mut lp_fail = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=5);
        let m = rng.random_range(1..=5);
        let cdiag: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut cols = Vec::new();
        let mut bs = Vec::new();
        let cons = (0..m)
            .map(|_| {
                let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
                let b = rng.random_range(0.5..2.0);
                let trip: Vec<_> = d.iter().enumerate().map(|(j, v)| (j, j, v.sqrt())).collect();
                cols.push(d);
                bs.push(b);
                RawConstraint {
                    a: FactoredPSD::new(SparseFactor::from_triplets(n, n, trip).unwrap()),
                    b,
                }
            })
            .collect();
        let raw = RawInstance::new(n, Objective::Matrix(SymMatrix::from_diagonal(&cdiag)), cons).unwrap();
        // max bᵀx s.t. Σ x_i diag(A_i) <= diag(C)
        let raw_opt = lp_max(&bs, &cols, &cdiag);
        let norm = normalize_instance(&raw).unwrap();
        let norm_cols: Vec<Vec<f64>> = cols
            .iter()
            .zip(&bs)
            .map(|(d, b)| d.iter().zip(&cdiag).map(|(a, c)| a / (b * c)).collect())
            .collect();
        let norm_opt = lp_max(&vec![1.0; m], &norm_cols, &vec![1.0; n]);
        let res = approx_psdp(&norm, EPS, &ExpEngineConfig::exact()).unwrap();
        let check = verify_packing(&norm, &res.best_x, 1e-8).unwrap();
        let agree = (raw_opt - norm_opt).abs() <= 1e-9 * raw_opt.max(1.0);
        if !agree || !check.feasible || res.best_objective < (1.0 - EPS) * raw_opt {
            lp_fail.push(format!(
                "seed {seed}: raw {raw_opt:.6} norm {norm_opt:.6} solver {:.6}",
                res.best_objective
            ));
        }
    }
    report.line(
        10,
        "normalization",
        dense_pass && lp_fail.is_empty(),
        format!(
            "20 full-rank objectives, max relative error {worst:.1e}; 10 diagonal raw instances, failures {lp_fail:?}"
        ),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    let corpus = diagonal_corpus(50);
    for e in &corpus {
        assert!(e.raw.dim() <= 6 && e.raw.num_constraints() <= 6);
    }

    let mut c1_audit = Audit::with_replay();
    criterion_1(&mut report, &corpus, &mut c1_audit);
    let mut c2_audit = Audit::default();
    criterion_2(&mut report, &mut c2_audit);
    let combined = Audit {
        runs: c1_audit.runs + c2_audit.runs,
        records: c1_audit.records + c2_audit.records,
        spectrum_violations: c1_audit.spectrum_violations + c2_audit.spectrum_violations,
        l1_violations: c1_audit.l1_violations + c2_audit.l1_violations,
        worst_spectrum_ratio: c1_audit.worst_spectrum_ratio.max(c2_audit.worst_spectrum_ratio),
        ..Audit::default()
    };
    criterion_3(&mut report, &combined);
    let mut c4_audit = Audit::default();
    criterion_4(&mut report, &corpus, &mut c4_audit);
    criterion_5(&mut report, &[&c1_audit, &c2_audit, &c4_audit]);
    criterion_6(&mut report);
    criterion_7(&mut report);
    criterion_8(&mut report, &c1_audit);
    criterion_9(&mut report, &corpus);
    criterion_10(&mut report);

    if report.failures > 0 {
        println!("{} criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
