//! The `train`, `certify`, `eval`, `attack` and `report` verbs.
//!
//! Output layout under the run directory:
//!
//! ```text
//! g.mlp, q.mlp          MLPv1 checkpoints
//! train_log.csv         training log
//! certificates/seed_<s>.txt, certificates/aggregate.txt
//! eval.csv              one row per evaluation budget
//! attack.csv            one row per attack budget
//! report.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psrl_core::env;
use psrl_core::eval::{attacked_rollout, evaluate, AttackConfig};
use psrl_core::tasc::certify;
use psrl_core::train::{finish_variant, pretrain};
use psrl_core::{format_eps, CertConfig, Certificate, Mlp, Norm, PsrlPolicy, EPS_DENOM};

use crate::config::{RunConfig, SweepEps};

/// Paths of the two checkpoints; default to the run directory.
#[derive(Debug, Clone, Default)]
pub struct Checkpoints {
    pub g: Option<PathBuf>,
    pub q: Option<PathBuf>,
}

impl Checkpoints {
    fn resolve(&self, out: &Path) -> (PathBuf, PathBuf) {
        (
            self.g.clone().unwrap_or_else(|| out.join("g.mlp")),
            self.q.clone().unwrap_or_else(|| out.join("q.mlp")),
        )
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let pre = pretrain(&cfg.preset, &cfg.train).context("pretraining failed")?;
    let (policy, log) = finish_variant(&pre, &cfg.preset, &cfg.train).context("adversarial training failed")?;
    policy.g.save(cfg.out.join("g.mlp"))?;
    policy.q.save(cfg.out.join("q.mlp"))?;
    fs::write(cfg.out.join("train_log.csv"), log.to_csv())?;
    Ok(())
}

pub fn load_policy(cfg: &RunConfig, ckpt: &Checkpoints) -> Result<PsrlPolicy> {
    let (gp, qp) = ckpt.resolve(&cfg.out);
    let g = Mlp::load(&gp).with_context(|| format!("loading {}", gp.display()))?;
    let q = Mlp::load(&qp).with_context(|| format!("loading {}", qp.display()))?;
    if g.input_dim() != cfg.preset.observation_dim() {
        bail!(
            "checkpoint shape mismatch: g takes {} inputs but the {} preset observes {}",
            g.input_dim(),
            cfg.preset.kind.name(),
            cfg.preset.observation_dim()
        );
    }
    PsrlPolicy::new(g, q).context("checkpoint shape mismatch between g and q")
}

fn cert_config(cfg: &RunConfig) -> CertConfig {
    match cfg.norm() {
        Norm::Linf => CertConfig::linf(),
        Norm::L2 => CertConfig::l2(cfg.smoothing.clone()),
    }
}

fn cert_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("certificates")
}

fn cert_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cert_dir(cfg).join(format!("seed_{seed}.txt"))
}

/// Lower median, so an even count still yields a grid value.
pub fn lower_median<T: Copy + Ord>(values: &[T]) -> Option<T> {
    let mut v = values.to_vec();
    v.sort();
    v.get(v.len().saturating_sub(1) / 2).copied()
}

pub fn aggregate_report(certs: &[Certificate]) -> String {
    let eps: Vec<u32> = certs.iter().map(|c| c.eps_safety).collect();
    let nodes: Vec<usize> = certs.iter().map(|c| c.nodes_explored).collect();
    let mut out = String::new();
    writeln!(out, "certificates = {}", certs.len()).unwrap();
    writeln!(out, "median_eps_safety = {}", format_eps(lower_median(&eps).unwrap_or(0))).unwrap();
    writeln!(out, "median_nodes = {}", lower_median(&nodes).unwrap_or(0)).unwrap();
    writeln!(out, "truncated = {}", certs.iter().filter(|c| c.truncated).count()).unwrap();
    writeln!(out, "nominal_unsafe = {}", certs.iter().filter(|c| c.nominal_unsafe).count()).unwrap();
    out
}

/// Certifies every configured initial state, in parallel across seeds.
pub fn certify_all(cfg: &RunConfig, policy: &PsrlPolicy) -> Result<Vec<Certificate>> {
    let cert_cfg = cert_config(cfg);
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(cfg.cert_seeds.len().max(1));
    let chunk = cfg.cert_seeds.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .cert_seeds
            .chunks(chunk)
            .map(|seeds| {
                let cert_cfg = &cert_cfg;
                scope.spawn(move || {
                    seeds
                        .iter()
                        .map(|&seed| {
                            let s0 = env::reset(&cfg.preset, seed);
                            certify(policy, cert_cfg, &cfg.preset, s0, cfg.horizon, cfg.grid, cfg.budget)
                        })
                        .collect::<psrl_core::Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("certification worker panicked")?);
        }
        Ok(all)
    })
}

pub fn cmd_certify(cfg: &RunConfig, ckpt: &Checkpoints) -> Result<Vec<Certificate>> {
    let policy = load_policy(cfg, ckpt)?;
    let certs = certify_all(cfg, &policy)?;
    fs::create_dir_all(cert_dir(cfg))?;
    for (seed, c) in cfg.cert_seeds.iter().zip(&certs) {
        fs::write(cert_path(cfg, *seed), c.report())?;
    }
    fs::write(cert_dir(cfg).join("aggregate.txt"), aggregate_report(&certs))?;
    Ok(certs)
}

fn eps_value(k: u32) -> f64 {
    f64::from(k) / f64::from(EPS_DENOM)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Checkpoints) -> Result<String> {
    let policy = load_policy(cfg, ckpt)?;
    let mut csv = format!("eps,{}\n", psrl_core::eval::EvalReport::CSV_HEADER);
    for &k in &cfg.eval_eps {
        let attack = AttackConfig {
            pgd_steps: cfg.pgd_steps,
            restarts: cfg.restarts,
            ..AttackConfig::new(eps_value(k), cfg.norm(), cfg.attack_seeds.first().copied().unwrap_or(0))
        };
        let r = evaluate(&policy, &cfg.preset, &cfg.eval_seeds, eps_value(cfg.mse_eps), Some(&attack))?;
        writeln!(csv, "{},{}", format_eps(k), r.csv_row()).unwrap();
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("eval.csv"), &csv)?;
    Ok(csv)
}

/// One row of the attack sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub eps: SweepEps,
    pub rollouts: usize,
    pub unsafe_count: usize,
    /// States whose nominal tree is already unsafe; not attacked at the
    /// certified budget.
    pub skipped: usize,
}

impl AttackRow {
    pub const HEADER: &'static str = "eps,rollouts,unsafe,success_rate,skipped";

    pub fn success_rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.unsafe_count as f64 / self.rollouts as f64
        }
    }

    fn csv(&self) -> String {
        format!("{},{},{},{:.6},{}", self.eps, self.rollouts, self.unsafe_count, self.success_rate(), self.skipped)
    }
}

fn load_certificates(cfg: &RunConfig) -> Result<Vec<Certificate>> {
    cfg.cert_seeds
        .iter()
        .map(|&s| {
            let path = cert_path(cfg, s);
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading {} (run `certify` first)", path.display()))?;
            Ok(Certificate::parse_report(&text)?)
        })
        .collect()
}

/// Attacked rollouts over `T_v` states from every certified initial state.
pub fn attack_sweep(cfg: &RunConfig, policy: &PsrlPolicy, certs: Option<&[Certificate]>) -> Result<Vec<AttackRow>> {
    let mut rows = Vec::new();
    for &eps in &cfg.attack_eps {
        let mut row = AttackRow { eps, rollouts: 0, unsafe_count: 0, skipped: 0 };
        for (i, &seed) in cfg.cert_seeds.iter().enumerate() {
            let k = match eps {
                SweepEps::Grid(k) => k,
                SweepEps::Certified => {
                    let c = &certs.context("certified budgets need certificates")?[i];
                    if c.nominal_unsafe {
                        row.skipped += 1;
                        continue;
                    }
                    c.eps_safety
                }
            };
            for &attack_seed in &cfg.attack_seeds {
                let attack = AttackConfig {
                    pgd_steps: cfg.pgd_steps,
                    restarts: cfg.restarts,
                    ..AttackConfig::new(eps_value(k), cfg.norm(), attack_seed)
                };
                let r = attacked_rollout(policy, &cfg.preset, seed, cfg.horizon, &attack)?;
                row.rollouts += 1;
                row.unsafe_count += usize::from(r.unsafe_reached);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_attack(cfg: &RunConfig, ckpt: &Checkpoints) -> Result<Vec<AttackRow>> {
    let policy = load_policy(cfg, ckpt)?;
    let certs = if cfg.attack_eps.contains(&SweepEps::Certified) { Some(load_certificates(cfg)?) } else { None };
    let rows = attack_sweep(cfg, &policy, certs.as_deref())?;
    let mut csv = format!("{}\n", AttackRow::HEADER);
    for r in &rows {
        writeln!(csv, "{}", r.csv()).unwrap();
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("attack.csv"), csv)?;
    Ok(rows)
}

/// Collects whatever artifacts exist into a plain-text summary.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "scenario = {}", cfg.preset.kind.name()).unwrap();
    writeln!(out, "variant = {}", cfg.train.variant).unwrap();
    writeln!(out, "norm = {}", cfg.norm()).unwrap();
    writeln!(out, "seed = {}", cfg.train.seed).unwrap();
    writeln!(out, "tv = {}", cfg.horizon).unwrap();
    let read = |name: &str| fs::read_to_string(cfg.out.join(name)).ok();
    if let Some(log) = read("train_log.csv") {
        out.push_str("\n[training]\n");
        for line in log.lines().skip(1).filter(|l| !l.ends_with(',')) {
            let f: Vec<&str> = line.split(',').collect();
            writeln!(out, "{} final reward = {}", f[0], f[f.len() - 1]).unwrap();
        }
    }
    for (title, name) in
        [("certification", "certificates/aggregate.txt"), ("evaluation", "eval.csv"), ("attack", "attack.csv")]
    {
        if let Some(text) = read(name) {
            writeln!(out, "\n[{title}]").unwrap();
            out.push_str(&text);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("report.txt"), &out)?;
    Ok(out)
}
