//! End-to-end acceptance checks. Runs as a plain binary so each criterion
//! prints a single PASS/FAIL line; pass criterion numbers as arguments to run
//! a subset (`cargo test --test acceptance -- 3 4`).

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use seqfa_core::approx::{fisher_information, fisher_scoring_mode, laplace_proposal, log_target, score, ProposalKind};
use seqfa_core::distributions::{CholeskyFactor, RngStream, LN_2PI};
use seqfa_core::hmc::{
    adapt, leapfrog, pilot_then_short_chains, sample_chain, FnTarget, GradientTarget, HmcConfig, JitterSettings,
};
use seqfa_core::model::likelihood::sigmoid;
use seqfa_core::model::scenarios::continuous1_truth;
use seqfa_core::model::{simulate_scenario, to_unconstrained, FactorModel, Link, ModelSpec, Scenario, Theta};
use seqfa_core::modelselect::{run_menu, ComparisonTable, EngineConfig, MenuHooks, ModelMenu, ModelRun};
use seqfa_core::smc::{
    posterior_summary, weighted_mean, Increment, InitSettings, ParticleSet, SequentialModel, Smc, SmcSettings,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Bypasses the test harness capture so the line is always shown.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

// ---------------------------------------------------------------- 1

/// θ ~ N(0, 1), y | θ ~ N(θ, 1).
struct GaussToy {
    y: Vec<f64>,
}

impl SequentialModel for GaussToy {
    fn theta_dim(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn sample_prior(&self, rng: &mut RngStream) -> Vec<f64> {
        vec![rng.standard_normal()]
    }

    fn increment(&self, x: &mut Vec<f64>, i: usize, _rng: &mut RngStream) -> Increment {
        let r = self.y[i] - x[0];
        Increment {
            log_u: -0.5 * (r * r + LN_2PI),
            fell_back: false,
        }
    }

    fn target(&self, n_obs: usize) -> Box<dyn GradientTarget + '_> {
        let y = &self.y[..n_obs];
        Box::new(FnTarget::new(1, move |x: &[f64], g: &mut [f64]| {
            let mut lp = -0.5 * (x[0] * x[0] + LN_2PI);
            g[0] = -x[0];
            for v in y {
                lp -= 0.5 * ((v - x[0]).powi(2) + LN_2PI);
                g[0] += v - x[0];
            }
            lp
        }))
    }
}

fn conjugate_oracle() -> Outcome {
    let mut rng = RngStream::new(17, 0);
    let y: Vec<f64> = (0..50).map(|_| 0.5 + rng.standard_normal()).collect();
    let n = y.len() as f64;
    let s: f64 = y.iter().sum();
    let ss: f64 = y.iter().map(|v| v * v).sum();
    // y ~ N(0, I + 11ᵀ)
    let exact_logz = -0.5 * n * LN_2PI - 0.5 * (n + 1.0).ln() - 0.5 * (ss - s * s / (n + 1.0));
    let exact_mean = s / (n + 1.0);
    let model = GaussToy { y };
    let reps = 10;
    let mut logz = Vec::new();
    let mut means = Vec::new();
    for r in 0..reps {
        let mut smc = Smc::from_prior(&model, SmcSettings::new(2000, 100 + r)).unwrap();
        smc.run().unwrap();
        logz.push(smc.ledger().total());
        means.push(weighted_mean(smc.particles(), |x| x[0]).unwrap());
    }
    let (lz, lz_sd) = mean_sd(&logz);
    let (mu, mu_sd) = mean_sd(&means);
    let lz_se = lz_sd / (reps as f64).sqrt();
    let mu_se = mu_sd / (reps as f64).sqrt();
    let pass = (lz - exact_logz).abs() < 3.0 * lz_se && (mu - exact_mean).abs() < 3.0 * mu_se;
    outcome(
        pass,
        format!(
            "log Z {lz:.4} vs {exact_logz:.4} (se {lz_se:.4}); mean {mu:.5} vs {exact_mean:.5} (se {mu_se:.5})"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn batch_reference(model: &FactorModel, start: &Theta, chains: u64) -> ParticleSet {
    let target = model.marginal_target(model.n());
    let x0 = to_unconstrained(model.spec(), start).unwrap().values;
    let mut draws = Vec::new();
    for c in 0..chains {
        let mut rng = RngStream::new(31, c);
        let a = adapt(&target, x0.clone(), &HmcConfig::new(model.dim()), 2000, &mut rng);
        let (d, _) = sample_chain(&target, a.x, &a.config, 500, 10_000, 2, &mut rng);
        draws.extend(d);
    }
    let m = draws.len();
    ParticleSet {
        particles: draws,
        logw: vec![0.0; m],
        streams: vec![RngStream::new(0, 0); m],
        i_processed: model.n(),
        theta_dim: model.dim(),
        latent_k: 0,
    }
}

fn ibis_matches_batch() -> Outcome {
    let data = Arc::new(simulate_scenario(&Scenario::Continuous1, 200, &mut RngStream::new(3001, 0)).unwrap());
    let (spec, truth) = continuous1_truth();
    let mut menu = ModelMenu::new();
    menu.push("EZ", spec.clone()).unwrap();
    let runs = run_menu(&menu, data.clone(), &EngineConfig::default(), 3001, 0, MenuHooks::default()).unwrap();
    let model = FactorModel::new(spec.clone(), data).unwrap();
    let ibis = posterior_summary(&model, &runs[0].particles).unwrap();
    let reference = posterior_summary(&model, &batch_reference(&model, &truth, 4)).unwrap();
    let true_values: HashMap<String, f64> = truth.named_values(&spec).into_iter().collect();

    let mut free: usize = 0;
    let mut covered = 0;
    let mut worst_mean = (0.0_f64, String::new());
    let mut worst_sd = (0.0_f64, String::new());
    let fixed: Vec<String> = (0..spec.p)
        .flat_map(|j| (0..spec.k).map(move |f| (j, f)))
        .filter(|&(j, f)| !spec.cell(j, f).is_estimated())
        .map(|(j, f)| format!("lambda[{},{}]", j + 1, f + 1))
        .collect();
    for (a, b) in ibis.iter().zip(&reference) {
        if fixed.contains(&a.name) {
            continue;
        }
        free += 1;
        let dm = (a.mean - b.mean).abs();
        let ds = (a.sd / b.sd - 1.0).abs();
        if dm > worst_mean.0 {
            worst_mean = (dm, a.name.clone());
        }
        if ds > worst_sd.0 {
            worst_sd = (ds, a.name.clone());
        }
        let t = true_values[&a.name];
        covered += (a.q025 <= t && t <= a.q975) as usize;
    }
    // 13 of 15 scaled to the number of free scalars in this parameterisation
    let need = (13 * free).div_ceil(15);
    let pass = worst_mean.0 < 0.05 && worst_sd.0 < 0.2 && covered >= need;
    outcome(
        pass,
        format!(
            "max |Δmean| {:.4} ({}), max sd ratio error {:.1}% ({}), coverage {covered}/{free} (need {need})",
            worst_mean.0,
            worst_mean.1,
            100.0 * worst_sd.0,
            worst_sd.1
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

fn menu_runs(scenario: &Scenario, seed: u64) -> ComparisonTable {
    let data = Arc::new(simulate_scenario(scenario, 200, &mut RngStream::new(seed, 0)).unwrap());
    let menu = ModelMenu::continuous_default(6, 2).unwrap();
    let config = EngineConfig {
        n_particles: 500,
        ..EngineConfig::default()
    };
    let runs: Vec<ModelRun> = run_menu(&menu, data, &config, seed, 0, MenuHooks::default()).unwrap();
    ComparisonTable::from_runs(&runs).unwrap()
}

fn scenario1_ordering() -> Outcome {
    let mut top_ok = 0;
    let mut efa_ok = 0;
    let mut rows = Vec::new();
    for seed in 1001..=1005 {
        let t = menu_runs(&Scenario::Continuous1, seed);
        let top = t.labels[t.ranking()[0]].clone();
        let l21 = t.lbf_between("EFA2", "EFA1").unwrap();
        let l23 = t.lbf_between("EFA2", "EFA3").unwrap();
        top_ok += (top == "EZ" || top == "AZ") as usize;
        efa_ok += (l21 > 20.0 && l23 > 0.0) as usize;
        rows.push(format!("{top} EFA2/EFA1 {l21:.1} EFA2/EFA3 {l23:.1}"));
    }
    outcome(
        top_ok >= 4 && efa_ok >= 4,
        format!("EZ/AZ first {top_ok}/5, EFA2 ordering {efa_ok}/5 [{}]", rows.join("; ")),
    )
}

fn scenario2_ordering() -> Outcome {
    let mut top_ok = 0;
    let mut lbf_ok = 0;
    let mut rows = Vec::new();
    for seed in 2001..=2005 {
        let t = menu_runs(&Scenario::Continuous2, seed);
        let top = t.labels[t.ranking()[0]].clone();
        let l = t.lbf_between("AZ", "EZ").unwrap();
        top_ok += (top == "AZ") as usize;
        lbf_ok += (l > 3.0) as usize;
        rows.push(format!("{top} AZ/EZ {l:.2}"));
    }
    outcome(
        top_ok >= 4 && lbf_ok >= 4,
        format!("AZ first {top_ok}/5, LBF(AZ/EZ) > 3 {lbf_ok}/5 [{}]", rows.join("; ")),
    )
}

// ---------------------------------------------------------------- 5

fn proposal_efficiency() -> Outcome {
    let kinds = [
        ("prior", ProposalKind::Prior),
        ("laplace", ProposalKind::Laplace),
        ("vb", ProposalKind::vb_default()),
    ];
    let mut menu = ModelMenu::new();
    menu.push("EFA1", ModelSpec::exploratory(6, 1, Link::Logit).unwrap()).unwrap();
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); 3];
    let mut halves_ok = 0;
    let mut halves = Vec::new();
    for seed in 4001..=4005 {
        let data = Arc::new(simulate_scenario(&Scenario::Binary1, 100, &mut RngStream::new(seed, 0)).unwrap());
        for (q, (_, kind)) in kinds.iter().enumerate() {
            let config = EngineConfig {
                n_particles: 1000,
                ess_fraction: 0.5,
                proposal: *kind,
                init: InitSettings::default(),
                ..EngineConfig::default()
            };
            let run = run_menu(&menu, data.clone(), &config, seed, 0, MenuHooks::default())
                .unwrap()
                .remove(0);
            counts[q].push(run.triggers.len());
            if q == 1 {
                let first = run.triggers.iter().filter(|t| t.index <= 50).count();
                let second = run.triggers.len() - first;
                halves_ok += (second as f64 <= 0.7 * first as f64) as usize;
                halves.push(format!("{first}/{second}"));
            }
        }
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let (prior, laplace, vb) = (mean(&counts[0]), mean(&counts[1]), mean(&counts[2]));
    let pass = laplace < 0.7 * prior && halves_ok >= 4 && (vb - laplace).abs() <= 5.0;
    outcome(
        pass,
        format!(
            "mean triggers prior {prior:.1}, laplace {laplace:.1}, vb {vb:.1}; per replicate {:?} {:?} {:?}; \
             laplace halves {} ({halves_ok}/5 reduced)",
            counts[0],
            counts[1],
            counts[2],
            halves.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn random_theta(k: usize, rng: &mut RngStream) -> Theta {
    let p = 6;
    let alpha = DVector::from_fn(p, |_, _| rng.standard_normal());
    let lambda = DMatrix::from_fn(p, k, |_, _| 0.5 + rng.uniform());
    let phi = if k == 1 {
        DMatrix::identity(1, 1)
    } else {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8])
    };
    Theta {
        alpha,
        lambda,
        phi,
        psi_diag: DVector::zeros(0),
    }
}

fn simulate_y(theta: &Theta, rng: &mut RngStream) -> Vec<f64> {
    let k = theta.lambda.ncols();
    let chol = CholeskyFactor::new(&theta.phi).unwrap();
    let z = chol.lower() * DVector::from_fn(k, |_, _| rng.standard_normal());
    (0..theta.alpha.len())
        .map(|j| {
            let eta = theta.alpha[j] + (0..k).map(|f| theta.lambda[(j, f)] * z[f]).sum::<f64>();
            (rng.uniform() < sigmoid(eta)) as u8 as f64
        })
        .collect()
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    while b - a > 1e-12 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    0.5 * (a + b)
}

/// Nelder–Mead maximisation.
fn nelder_mead_max(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Vec<f64> {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = (0..=d)
        .map(|i| {
            let mut x = x0.to_vec();
            if i > 0 {
                x[i - 1] += 0.5;
            }
            x
        })
        .collect();
    let neg = |x: &[f64]| -f(x);
    let mut vals: Vec<f64> = simplex.iter().map(|x| neg(x)).collect();
    for _ in 0..20_000 {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let size = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < 1e-11 {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|q| simplex[..d].iter().map(|x| x[q]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|q| centroid[q] + t * (simplex[d][q] - centroid[q])).collect() };
        let xr = along(-1.0);
        let fr = neg(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = neg(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = neg(&xc);
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|q| simplex[0][q] + 0.5 * (simplex[i][q] - simplex[0][q])).collect();
                    vals[i] = neg(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    simplex[best].clone()
}

fn latent_suite() -> Outcome {
    let mut rng = RngStream::new(61, 0);
    let mut score_err: f64 = 0.0;
    let mut fisher_err: f64 = 0.0;
    let mut mode_err: f64 = 0.0;
    for inst in 0..20 {
        let k = 1 + inst % 2;
        let theta = random_theta(k, &mut rng);
        let y = simulate_y(&theta, &mut rng);
        let z: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();

        let g = score(&z, &y, &theta);
        let h = 1e-5;
        for q in 0..k {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[q] += h;
            dn[q] -= h;
            let fd = (log_target(&up, &y, &theta) - log_target(&dn, &y, &theta)) / (2.0 * h);
            score_err = score_err.max((g[q] - fd).abs() / fd.abs().max(1.0));
        }

        // expected outer product of the likelihood score over all 2^p responses
        let prec = CholeskyFactor::new(&theta.phi).unwrap().inverse();
        let zv = DVector::from_column_slice(&z);
        let p = theta.alpha.len();
        let pis: Vec<f64> = (0..p)
            .map(|j| sigmoid(theta.alpha[j] + (0..k).map(|f| theta.lambda[(j, f)] * z[f]).sum::<f64>()))
            .collect();
        let mut oracle = prec.clone();
        for mask in 0..(1u32 << p) {
            let yy: Vec<f64> = (0..p).map(|j| ((mask >> j) & 1) as f64).collect();
            let prob: f64 = (0..p).map(|j| if yy[j] == 1.0 { pis[j] } else { 1.0 - pis[j] }).product();
            let s_lik = score(&z, &yy, &theta) + &prec * &zv;
            oracle += prob * &s_lik * s_lik.transpose();
        }
        fisher_err = fisher_err.max((fisher_information(&z, &theta) - oracle).amax());

        let mode = fisher_scoring_mode(&y, &theta, &vec![0.0; k], 1e-8, 100).unwrap();
        let reference = if k == 1 {
            vec![golden_max(|t| log_target(&[t], &y, &theta), -30.0, 30.0)]
        } else {
            nelder_mead_max(|x| log_target(x, &y, &theta), &[0.0, 0.0])
        };
        for q in 0..k {
            mode_err = mode_err.max((mode[q] - reference[q]).abs());
        }
    }

    // KL(posterior ‖ Laplace) on a fine grid, one factor
    let mut kl_max: f64 = 0.0;
    for _ in 0..20 {
        let theta = random_theta(1, &mut rng);
        let y = simulate_y(&theta, &mut rng);
        let q = laplace_proposal(&y, &theta, false).unwrap();
        let (lo, hi, m) = (-12.0, 12.0, 24_001);
        let dz = (hi - lo) / (m - 1) as f64;
        let grid: Vec<f64> = (0..m).map(|i| lo + i as f64 * dz).collect();
        let lp: Vec<f64> = grid.iter().map(|&t| log_target(&[t], &y, &theta)).collect();
        let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = top + (lp.iter().map(|v| (v - top).exp()).sum::<f64>() * dz).ln();
        let kl: f64 = grid
            .iter()
            .zip(&lp)
            .map(|(&t, &l)| {
                let lpost = l - log_norm;
                lpost.exp() * (lpost - q.logpdf(&[t])) * dz
            })
            .sum();
        kl_max = kl_max.max(kl);
    }
    let pass = score_err < 1e-5 && fisher_err < 1e-5 && mode_err < 1e-6 && kl_max < 0.05;
    outcome(
        pass,
        format!(
            "score rel err {score_err:.1e}, Fisher abs err {fisher_err:.1e}, mode err {mode_err:.1e}, max KL {kl_max:.4}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn gaussian_target(mean: Vec<f64>, cov: DMatrix<f64>) -> impl GradientTarget {
    let prec = CholeskyFactor::new(&cov).unwrap().inverse();
    let d = mean.len();
    FnTarget::new(d, move |x: &[f64], g: &mut [f64]| {
        let r = DVector::from_fn(d, |q, _| x[q] - mean[q]);
        let pr = &prec * &r;
        for q in 0..d {
            g[q] = -pr[q];
        }
        -0.5 * r.dot(&pr)
    })
}

fn hamiltonian(t: &dyn GradientTarget, x: &[f64], p: &[f64]) -> f64 {
    let mut g = vec![0.0; x.len()];
    -t.log_density_grad(x, &mut g) + 0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

fn hmc_integrity() -> Outcome {
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.2, 0.6, 1.0, -0.3, 0.2, -0.3, 0.5]);
    let mu = vec![1.0, -2.0, 0.5];
    let target = gaussian_target(mu.clone(), cov.clone());
    let mut rng = RngStream::new(71, 0);
    let ones = vec![1.0; 3];

    // reversibility, also on a factor-model posterior
    let mut rev_err: f64 = 0.0;
    let data = Arc::new(simulate_scenario(&Scenario::Continuous1, 80, &mut RngStream::new(72, 0)).unwrap());
    let fm = FactorModel::new(continuous1_truth().0, data).unwrap();
    let fm_target = fm.marginal_target(80);
    let fm_x0 = to_unconstrained(fm.spec(), &continuous1_truth().1).unwrap().values;
    let cases: [(&dyn GradientTarget, Vec<f64>, f64); 2] =
        [(&target, vec![0.3, -1.0, 2.0], 0.1), (&fm_target, fm_x0, 0.01)];
    for (t, x0, h) in cases {
        let d = x0.len();
        let mass = vec![1.0; d];
        let p0: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let fwd = leapfrog(t, &x0, &p0, h, 50, &mass);
        let back_p: Vec<f64> = fwd.momentum.iter().map(|v| -v).collect();
        let back = leapfrog(t, &fwd.x, &back_p, h, 50, &mass);
        for q in 0..d {
            rev_err = rev_err.max((back.x[q] - x0[q]).abs()).max((back.momentum[q] + p0[q]).abs());
        }
    }

    // energy error at fixed integration time as the step halves
    let momenta: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
    let x0 = vec![0.0, -1.0, 1.0];
    let mut mean_dh = Vec::new();
    for (h, l) in [(0.2, 5), (0.1, 10), (0.05, 20), (0.025, 40)] {
        let s: f64 = momenta
            .iter()
            .map(|p| {
                let tr = leapfrog(&target, &x0, p, h, l, &ones);
                (hamiltonian(&target, &tr.x, &tr.momentum) - hamiltonian(&target, &x0, p)).abs()
            })
            .sum();
        mean_dh.push(s / momenta.len() as f64);
    }
    let ratios: Vec<f64> = mean_dh.windows(2).map(|w| w[0] / w[1]).collect();
    let scaling_ok = ratios.iter().all(|r| (3.0..=5.0).contains(r));

    // moments of a 10-dimensional standard normal
    let d = 10;
    let std_normal = gaussian_target(vec![0.0; d], DMatrix::identity(d, d));
    let a = adapt(&std_normal, vec![0.0; d], &HmcConfig::new(d), 1000, &mut rng);
    let (draws, _) = sample_chain(&std_normal, a.x, &a.config, 0, 20_000, 1, &mut rng);
    let batches = 50;
    let bs = draws.len() / batches;
    let mut moments_ok = true;
    let mut worst_z: f64 = 0.0;
    for q in 0..d {
        for pow in [1, 2] {
            let target_moment = if pow == 1 { 0.0 } else { 1.0 };
            let bm: Vec<f64> = (0..batches)
                .map(|b| draws[b * bs..(b + 1) * bs].iter().map(|x| x[q].powi(pow)).sum::<f64>() / bs as f64)
                .collect();
            let (m, sd) = mean_sd(&bm);
            let z = (m - target_moment).abs() / (sd / (batches as f64).sqrt());
            worst_z = worst_z.max(z);
            moments_ok &= z < 4.0;
        }
    }

    // pilot-then-short chains keep an exact ensemble exact
    let n = 2000;
    let chol = CholeskyFactor::new(&cov).unwrap();
    let mut ens: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let e = chol.lower() * DVector::from_fn(3, |_, _| rng.standard_normal());
            (0..3).map(|q| mu[q] + e[q]).collect()
        })
        .collect();
    let mut streams: Vec<RngStream> = (0..n as u64).map(|m| RngStream::new(73, m)).collect();
    let mut pilot = RngStream::new(74, 0);
    pilot_then_short_chains(&mut ens, &target, &JitterSettings::default(), None, &mut pilot, &mut streams).unwrap();
    let mut ens_z: f64 = 0.0;
    for q in 0..3 {
        let m = ens.iter().map(|x| x[q]).sum::<f64>() / n as f64;
        ens_z = ens_z.max((m - mu[q]).abs() / (cov[(q, q)] / n as f64).sqrt());
    }

    let pass = rev_err < 1e-8 && scaling_ok && moments_ok && ens_z < 4.0;
    outcome(
        pass,
        format!(
            "reversibility {rev_err:.1e}, |ΔH| halving ratios {:?}, moment max z {worst_z:.2}, ensemble mean max z {ens_z:.2}",
            ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn evidence_csv(runs: &[ModelRun], start: usize, n: usize) -> String {
    let mut s = String::from("replicate,index");
    for r in runs {
        s += &format!(",{}", r.label);
    }
    s.push('\n');
    for i in start..=n {
        s += &format!("1,{i}");
        for r in runs {
            s += &format!(",{}", r.ledger.cumulative_at(i).map_or(String::new(), |v| v.to_string()));
        }
        s.push('\n');
    }
    s
}

fn run_in_pool(threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let cont = Arc::new(simulate_scenario(&Scenario::Continuous1, 60, &mut RngStream::new(81, 0)).unwrap());
        let menu = ModelMenu::continuous_default(6, 2).unwrap();
        let config = EngineConfig {
            n_particles: 200,
            init: InitSettings {
                is_samples: 4000,
                ..InitSettings::batch(10)
            },
            ..EngineConfig::default()
        };
        let a = run_menu(&menu, cont, &config, 81, 0, MenuHooks::default()).unwrap();

        let bin = Arc::new(simulate_scenario(&Scenario::Binary1, 40, &mut RngStream::new(82, 0)).unwrap());
        let mut menu = ModelMenu::new();
        menu.push("EFA1", ModelSpec::exploratory(6, 1, Link::Logit).unwrap()).unwrap();
        menu.push("EFA2", ModelSpec::exploratory(6, 2, Link::Logit).unwrap()).unwrap();
        let config = EngineConfig {
            n_particles: 200,
            init: InitSettings::default(),
            ..EngineConfig::default()
        };
        let b = run_menu(&menu, bin, &config, 82, 0, MenuHooks::default()).unwrap();
        evidence_csv(&a, 11, 60) + &evidence_csv(&b, 1, 40)
    })
}

fn determinism() -> Outcome {
    let outputs: Vec<String> = [1, 2, 4].iter().map(|&t| run_in_pool(t)).collect();
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        same,
        format!("evidence tables from 1, 2 and 4 workers {} ({} bytes)", if same { "identical" } else { "differ" }, outputs[0].len()),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "conjugate evidence oracle", conjugate_oracle),
        (2, "IBIS matches batch HMC posterior", ibis_matches_batch),
        (3, "model ordering, continuous scenario 1", scenario1_ordering),
        (4, "model ordering, continuous scenario 2", scenario2_ordering),
        (5, "latent proposal efficiency", proposal_efficiency),
        (6, "latent approximation suite", latent_suite),
        (7, "HMC integrity", hmc_integrity),
        (8, "determinism across worker counts", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        say(&format!(
            "criterion {id} {verdict}: {name}: {} [{:.1}s]",
            o.detail,
            t0.elapsed().as_secs_f64()
        ));
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        say(&format!("failed criteria: {failed:?}"));
        std::process::exit(1);
    }
}
