//! Acceptance suite: one full run of both tables at n = 1000, R = 1000 with
//! the desk boosting profile, a separate double-robustness run, and the exact
//! oracle checks. Prints one PASS/FAIL line per criterion, then asserts.
//!
//! `DRSIM_ACCEPTANCE_REPLICATES` shrinks the table run for quick local checks;
//! the tolerances assume the default.

use drsim::dgp::{generate_replicate, Scenario, TRUE_MEAN};
use drsim::estimators::Family;
use drsim::estimators::{bc_mean, ipw_mean};
use drsim::harness::{
    fit_propensity, rmse, run_cells, run_tables, table_cells, Column, FitCache, FitKey, RmseTable,
    RowKind, SimConfig, TableId,
};
use drsim::linear_models::{
    build_design, fit_least_squares, normal_equation_residual, CovariateSet, RowSelection, Weights,
};
use drsim::propensity::{
    fit_logistic, fit_robit1, logistic_score, robit_log_likelihood, GbmParams, PsMethod,
};
use drsim::weighting::{compute_weights, weighted_ks, Scheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KS_COLUMNS: [Column; 2] = [Column::KsZ, Column::KsX];

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((name.to_string(), ok, detail));
    }
}

fn ipw(method: PsMethod, covariates: CovariateSet, scheme: Scheme) -> RowKind {
    RowKind::Ipw {
        method,
        covariates,
        scheme,
    }
}

fn dr(family: Family, method: PsMethod, covariates: CovariateSet) -> RowKind {
    RowKind::DoublyRobust {
        family,
        method,
        covariates,
    }
}

fn ratio(t: &RmseTable, row: RowKind, col: Column) -> f64 {
    t.ratio(row, col).expect("cell present")
}

fn table_criteria(report: &mut Report, t1: &RmseTable, t2: &RmseTable) {
    // A1
    let printed = [1.16, 1.64, 1.35, 3.58, 5.00];
    let within = t1
        .ols_rmse
        .iter()
        .zip(printed)
        .all(|(got, want)| (got / want - 1.0).abs() <= 0.15);
    report.check(
        "A1 OLS raw RMSEs within 15%",
        within,
        format!("got {:.3?} vs {printed:?}", t1.ols_rmse),
    );

    // A2
    let lz = ipw(PsMethod::Logistic, CovariateSet::Z, Scheme::Pop);
    let (a, b) = (ratio(t1, lz, Column::KsZ), ratio(t1, lz, Column::KsX));
    report.check(
        "A2 logistic-Z IPW-POP",
        (a - 1.4).abs() <= 0.25 && (b - 1.0).abs() <= 0.2,
        format!("{a:.3} (1.4 +- 0.25), {b:.3} (1.0 +- 0.2)"),
    );

    // A3
    let lx = [Scheme::Pop, Scheme::Nr].map(|s| ipw(PsMethod::Logistic, CovariateSet::X, s));
    let ipw_rows: Vec<RowKind> = t1
        .rows
        .iter()
        .copied()
        .filter(|r| matches!(r, RowKind::Ipw { .. }))
        .collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for col in KS_COLUMNS {
        let vals = lx.map(|r| ratio(t1, r, col));
        let others = ipw_rows
            .iter()
            .filter(|r| !lx.contains(r))
            .map(|&r| ratio(t1, r, col))
            .fold(0.0, f64::max);
        ok &= vals.iter().all(|&v| v >= 3.0 && v > others);
        detail.push(format!(
            "{}: POP {:.2}, NR {:.2}, next {:.2}",
            col.id(),
            vals[0],
            vals[1],
            others
        ));
    }
    report.check("A3 logistic-X IPW blow-up", ok, detail.join("; "));

    // A4
    let mut ok = true;
    let mut detail = Vec::new();
    for col in KS_COLUMNS {
        for scheme in [Scheme::Pop, Scheme::Nr] {
            let g = ratio(t1, ipw(PsMethod::Gbm, CovariateSet::X, scheme), col);
            let l = ratio(t1, ipw(PsMethod::Logistic, CovariateSet::X, scheme), col);
            ok &= g <= 4.0 && g < l;
            detail.push(format!("{} {}: {g:.2} vs {l:.2}", col.id(), scheme.id()));
        }
    }
    report.check(
        "A4 GBM-X IPW <= 4 and below logistic-X",
        ok,
        detail.join("; "),
    );

    // A5
    let gw = dr(Family::Wls, PsMethod::Gbm, CovariateSet::X);
    let vals: Vec<f64> = Column::ALL.iter().map(|&c| ratio(t2, gw, c)).collect();
    let ok = vals.iter().all(|&v| v <= 1.15)
        && ratio(t2, gw, Column::IntZ) <= 0.8
        && ratio(t2, gw, Column::IntX) <= 0.8;
    report.check("A5 GBM WLS dominates OLS", ok, format!("{vals:.3?}"));

    // A6
    let lb = dr(Family::Bc, PsMethod::Logistic, CovariateSet::X);
    let vals = [Column::KsX, Column::IntZ, Column::IntX].map(|c| ratio(t2, lb, c));
    report.check(
        "A6 logistic-X BC >= 10 under double misspecification",
        vals.iter().all(|&v| v >= 10.0),
        format!(
            "ks-x {:.2}, int-z {:.2}, int-x {:.2}",
            vals[0], vals[1], vals[2]
        ),
    );

    // A7
    let mut ok = true;
    let mut detail = Vec::new();
    for &row in &t2.rows {
        for col in Column::ALL
            .into_iter()
            .filter(Column::outcome_model_correct)
        {
            let v = ratio(t2, row, col);
            ok &= (0.9..=1.1).contains(&v);
            detail.push(format!("{v:.3}"));
        }
    }
    report.check(
        "A7 DR ratios with a correct outcome model in [0.9, 1.1]",
        ok,
        detail.join(" "),
    );
}

fn double_robustness(report: &mut Report) {
    let config = SimConfig {
        n: 2000,
        replicates: 200,
        ..SimConfig::default()
    };
    // (propensity covariates, column): exactly one of the two models is right.
    let cases = [
        (CovariateSet::Z, Column::KsX),
        (CovariateSet::Z, Column::IntZ),
        (CovariateSet::Z, Column::IntX),
        (CovariateSet::X, Column::KsZ),
        (CovariateSet::X, Column::IntZi),
    ];
    let cells: Vec<_> = table_cells(TableId::Table2, true)
        .into_iter()
        .filter(|c| {
            c.estimator.ps_method == Some(PsMethod::Logistic)
                && cases.contains(&(c.estimator.ps_covariates.unwrap(), c.column))
        })
        .collect();
    let out = run_cells(&cells, &config).expect("double robustness run");
    let mut ok = true;
    let mut detail = Vec::new();
    for cell in &out.cells {
        let est = cell.estimates();
        let bias = est.iter().sum::<f64>() / est.len() as f64 - TRUE_MEAN;
        ok &= bias.abs() < 0.5 && cell.failures() == 0;
        detail.push(format!("{} {bias:+.3}", cell.cell.id()));
    }
    ok &= out.cells.len() == 2 * cases.len();
    report.check(
        "A8 DR bias < 0.5 with one model right",
        ok,
        detail.join("; "),
    );
}

fn brute_force_ks(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let ta: f64 = wa.iter().sum();
    let tb: f64 = wb.iter().sum();
    a.iter()
        .chain(b)
        .map(|&x| {
            let fa: f64 = a
                .iter()
                .zip(wa)
                .filter(|(v, _)| **v <= x)
                .map(|(_, w)| w)
                .sum::<f64>()
                / ta;
            let fb: f64 = b
                .iter()
                .zip(wb)
                .filter(|(v, _)| **v <= x)
                .map(|(_, w)| w)
                .sum::<f64>()
                / tb;
            (fa - fb).abs()
        })
        .fold(0.0, f64::max)
}

fn oracles(report: &mut Report) {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for case in 0..100 {
        let (na, nb) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let a: Vec<f64> = (0..na).map(|_| f64::from(rng.random_range(0..8))).collect();
        let b: Vec<f64> = (0..nb).map(|_| f64::from(rng.random_range(0..8))).collect();
        let wa: Vec<f64> = (0..na)
            .map(|_| f64::from(rng.random_range(1..=9)))
            .collect();
        let wb: Vec<f64> = (0..nb)
            .map(|_| f64::from(rng.random_range(1..=9)))
            .collect();
        if weighted_ks(&a, &wa, &b, &wb).unwrap() != brute_force_ks(&a, &wa, &b, &wb) {
            failures.push(format!("ks case {case}"));
        }
    }

    let ds = generate_replicate(&Scenario::new(1000, false, 7).unwrap(), 0);
    for covs in [CovariateSet::Z, CovariateSet::X] {
        let d = build_design(&ds, covs, false, RowSelection::All).unwrap();
        let fit = fit_logistic(&d, &ds.t).unwrap();
        let score = logistic_score(&d, &ds.t, &fit.coefficients);
        if score.iter().map(|s| s * s).sum::<f64>().sqrt() >= 1e-6 {
            failures.push(format!("IRLS score {covs}"));
        }

        let robit = fit_robit1(&d, &ds.t).unwrap();
        let beta = &robit.coefficients;
        let fd: f64 = (0..beta.len())
            .map(|j| {
                let scale = d.rows().map(|r| r[j].abs()).fold(0.0, f64::max);
                let h = 1e-5 / scale;
                let (mut up, mut down) = (beta.clone(), beta.clone());
                up[j] += h;
                down[j] -= h;
                let g = (robit_log_likelihood(&d, &ds.t, &up)
                    - robit_log_likelihood(&d, &ds.t, &down))
                    / (2.0 * h);
                g * g
            })
            .sum::<f64>()
            .sqrt();
        if fd >= 1e-4 {
            failures.push(format!("robit gradient {covs}: {fd:e}"));
        }

        let resp = build_design(&ds, covs, false, RowSelection::Respondents).unwrap();
        let y = ds.respondent_y();
        let w: Vec<f64> = fit
            .pi_hat
            .iter()
            .zip(&ds.t)
            .filter(|(_, &t)| t)
            .map(|(p, _)| 1.0 / p)
            .collect();
        let wls = fit_least_squares(&resp, &y, Weights::Supplied(&w)).unwrap();
        if normal_equation_residual(&resp, &y, Weights::Supplied(&w), &wls.coefficients) >= 1e-8 {
            failures.push(format!("WLS orthogonality {covs}"));
        }

        let bc = bc_mean(&ds.y, &ds.t, &fit.pi_hat, &vec![0.0; ds.n()]).unwrap();
        let ht = ipw_mean(&ds.y, &ds.t, &fit.pi_hat, Scheme::Pop, false).unwrap();
        if (bc - ht).abs() > 1e-12 * ht.abs() {
            failures.push(format!("BC with zero outcome model {covs}"));
        }

        let pop = compute_weights(&fit.pi_hat, &ds.t, Scheme::Pop).unwrap();
        let nr = compute_weights(&fit.pi_hat, &ds.t, Scheme::Nr).unwrap();
        let pop_nr_ok = (0..ds.n()).filter(|&i| ds.t[i]).all(|i| {
            (pop.as_slice()[i] - nr.as_slice()[i] - 1.0).abs()
                <= 4.0 * f64::EPSILON * pop.as_slice()[i]
        });
        if !pop_nr_ok {
            failures.push(format!("POP - NR weights {covs}"));
        }
    }

    harness_invariants(&mut failures);
    let ok = failures.is_empty();
    let detail = if ok {
        "KS brute force, IRLS score, robit gradient, WLS orthogonality, BC/IPW identity, POP-NR, H1-H4".to_string()
    } else {
        failures.join("; ")
    };
    report.check("A9 oracle and identity suite", ok, detail);
}

fn harness_invariants(failures: &mut Vec<String>) {
    let config = |replicates| SimConfig {
        n: 200,
        replicates,
        seed: 3,
        gbm: GbmParams {
            max_trees: 300,
            shrinkage: 0.05,
            max_depth: 3,
            min_node_size: 10,
        },
        ..SimConfig::default()
    };
    let cells: Vec<_> = [TableId::Table1, TableId::Table2]
        .into_iter()
        .flat_map(|t| table_cells(t, true))
        .collect();
    let values = |out: &drsim::harness::RunOutput| -> Vec<Vec<Option<f64>>> {
        out.cells.iter().map(|c| c.values.clone()).collect()
    };

    // H1: thread count does not change results.
    let pooled = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_cells(&cells, &config(4)).unwrap())
    };
    let one = pooled(1);
    if values(&one) != values(&pooled(3)) {
        failures.push("H1 thread determinism".into());
    }

    // H2: a shared propensity fit gives the same IPW estimate in every column of a scenario.
    for group in one
        .cells
        .chunks(5)
        .filter(|g| g[0].cell.estimator.family == Family::Ipw)
    {
        let by = |c: Column| &group.iter().find(|r| r.cell.column == c).unwrap().values;
        let close = |a: &[Option<f64>], b: &[Option<f64>]| {
            a.iter().zip(b).all(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs(),
                _ => x == y,
            })
        };
        if !close(by(Column::KsZ), by(Column::KsX)) || !close(by(Column::IntZi), by(Column::IntX)) {
            failures.push(format!("H2 {}", group[0].cell.row_id()));
        }
    }

    // H3: cached fits equal fresh fits.
    let cfg = config(1);
    let ds = generate_replicate(&cfg.scenario(false).unwrap(), 0);
    let mut cache = FitCache::new(&ds, &cfg);
    for covariates in [CovariateSet::Z, CovariateSet::X] {
        for (method, selection) in [
            (PsMethod::Logistic, None),
            (PsMethod::Robit1, None),
            (PsMethod::Gbm, Some(Scheme::Pop)),
            (PsMethod::Gbm, Some(Scheme::Nr)),
        ] {
            let key = FitKey {
                method,
                covariates,
                selection,
            };
            if cache.get(key).unwrap().pi_hat != fit_propensity(&ds, key, &cfg).unwrap().pi_hat {
                failures.push(format!("H3 {key:?}"));
            }
        }
    }

    // H4: the RMSE of the first R' replicates equals a run with R = R'.
    let short = run_cells(&cells, &config(2)).unwrap();
    for (long, short) in one.cells.iter().zip(&short.cells) {
        let prefix: Vec<f64> = long.values[..2].iter().flatten().copied().collect();
        if rmse(&prefix, TRUE_MEAN).unwrap() != short.rmse().unwrap() {
            failures.push(format!("H4 {}", long.cell.id()));
        }
    }
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };
    let replicates = std::env::var("DRSIM_ACCEPTANCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000);
    let config = SimConfig {
        replicates,
        ..SimConfig::default()
    };
    let started = std::time::Instant::now();
    let (tables, _) =
        run_tables(&[TableId::Table1, TableId::Table2], &config, true).expect("table run");
    println!(
        "tables: n = {}, R = {}, {:.0} s",
        config.n,
        config.replicates,
        started.elapsed().as_secs_f64()
    );
    for t in &tables {
        println!("{}", t.to_markdown());
    }
    table_criteria(&mut report, &tables[0], &tables[1]);
    double_robustness(&mut report);
    oracles(&mut report);

    let failed: Vec<&str> = report
        .lines
        .iter()
        .filter(|(_, ok, _)| !ok)
        .map(|(name, _, _)| name.as_str())
        .collect();
    println!(
        "{} of {} criteria passed",
        report.lines.len() - failed.len(),
        report.lines.len()
    );
    assert!(failed.is_empty(), "failed: {failed:?}");
}
