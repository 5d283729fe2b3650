//! The `check` subcommand: verification suites with fixed seeds.

use pdc_refine::pdc::VarianceRule;
use pdc_refine::verify;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::{CheckArgs, Suite};

/// Bound on every equivariance deviation.
pub const EQUIVARIANCE_LIMIT: f64 = 1e-9;
/// Standard errors allowed between the closed-form and Monte Carlo variance.
pub const MOMENT_SE: f64 = 4.0;
pub const GRADIENT_LIMIT: f64 = 1e-4;
/// Lowest eigenvalue tolerated for the additive covariance rule.
pub const PSD_FLOOR: f64 = -1e-10;

struct Sizes {
    complexes: usize,
    motions: usize,
    pairs: usize,
    samples: usize,
    gradient_instances: usize,
    psd_complexes: usize,
}

const FULL: Sizes = Sizes { complexes: 10, motions: 100, pairs: 20, samples: 10_000_000, gradient_instances: 5, psd_complexes: 5 };
const QUICK: Sizes = Sizes { complexes: 2, motions: 10, pairs: 4, samples: 200_000, gradient_instances: 1, psd_complexes: 2 };

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn equivariance(n: &Sizes, seed: u64) -> CliResult<(bool, Value)> {
    let mut all = true;
    let mut reports = Vec::new();
    for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
        let r = verify::equivariance_suite(rule, n.complexes, n.motions, 4, seed)?;
        let ok = r.max_deviation() < EQUIVARIANCE_LIMIT;
        all &= ok;
        println!(
            "equivariance {rule:?}: {} complexes x {} motions, max deviation h {:.3e} mu {:.3e} cov {:.3e} (limit {EQUIVARIANCE_LIMIT:e}, {:.1}s) {}",
            r.complexes,
            r.motions,
            r.max_h_deviation,
            r.max_mean_deviation,
            r.max_cov_deviation,
            r.seconds,
            verdict(ok)
        );
        reports.push(r);
    }
    Ok((all, serde_json::to_value(reports)?))
}

fn moments(n: &Sizes, seed: u64) -> CliResult<(bool, Value)> {
    let r = verify::moments_suite(n.pairs, n.samples, MOMENT_SE, seed)?;
    for (k, c) in r.cases.iter().enumerate() {
        println!(
            "  pair {k:>2}: MC variance {:.6} (se {:.2e}); standard {:.6} (z {:+.2}); paper-literal {:.6} (z {:+.2})",
            c.mc_variance, c.variance_se, c.standard_variance, c.z_standard, c.paper_literal_variance, c.z_paper_literal
        );
    }
    let ok = r.standard_matches && r.perturbed_rejected;
    println!(
        "moments: {} pairs x {} samples; standard formula matches MC: {}; paper-literal formula matches MC: {}; perturbed formula rejected: {} ({:.1}s) {}",
        r.cases.len(),
        r.samples_per_pair,
        r.standard_matches,
        r.paper_literal_matches,
        r.perturbed_rejected,
        r.seconds,
        verdict(ok)
    );
    Ok((ok, serde_json::to_value(r)?))
}

fn gradients(n: &Sizes, seed: u64) -> CliResult<(bool, Value)> {
    let reports = verify::gradient_suite(n.gradient_instances, 2, seed)?;
    let mut all = true;
    for r in &reports {
        let ok = r.entries_checked > 0 && r.max_rel_error < GRADIENT_LIMIT;
        all &= ok;
        println!(
            "gradients {}: {} instances, {} entries, max relative error {:.3e} at {} (limit {GRADIENT_LIMIT:e}) {}",
            r.path,
            r.instances,
            r.entries_checked,
            r.max_rel_error,
            r.worst_parameter.as_deref().unwrap_or("-"),
            verdict(ok)
        );
    }
    Ok((all, serde_json::to_value(reports)?))
}

fn psd(n: &Sizes, seed: u64, inject: bool) -> CliResult<(bool, Value)> {
    let reports = verify::psd_suite(10, n.psd_complexes, seed, inject)?;
    let mut all = true;
    for r in &reports {
        let ok = match r.rule {
            VarianceRule::Eq5 => r.min_eigenvalue >= PSD_FLOOR,
            VarianceRule::AppendixVariant => r.psd,
        };
        all &= ok;
        let note = if inject && r.rule == VarianceRule::Eq5 { " [sign flip injected]" } else { "" };
        println!("psd {:?}: {} layers, min eigenvalue {:.3e}, max {:.3e}{note} {}", r.rule, r.layers, r.min_eigenvalue, r.max_eigenvalue, verdict(ok));
    }
    Ok((all, serde_json::to_value(reports)?))
}

fn golden() -> CliResult<(bool, Value)> {
    let cases = verify::interpolation_golden()?;
    for (name, ok) in &cases {
        println!("golden interpolation, {name}: {}", verdict(*ok));
    }
    let value = cases.iter().map(|(n, ok)| json!({ "case": n, "pass": ok })).collect();
    Ok((cases.iter().all(|c| c.1), value))
}

pub fn run(a: CheckArgs) -> CliResult<()> {
    let sizes = if a.quick { &QUICK } else { &FULL };
    let suites = match a.suite {
        Suite::All => vec![Suite::Golden, Suite::Equivariance, Suite::Psd, Suite::Gradients, Suite::Moments],
        s => vec![s],
    };
    let seed = |fixed: u64| a.seed.unwrap_or(fixed);
    let mut failed = Vec::new();
    let mut out = serde_json::Map::new();
    for s in suites {
        let (name, (ok, value)) = match s {
            Suite::Equivariance => ("equivariance", equivariance(sizes, seed(1))?),
            Suite::Moments => ("moments", moments(sizes, seed(2))?),
            Suite::Gradients => ("gradients", gradients(sizes, seed(3))?),
            Suite::Psd => ("psd", psd(sizes, seed(4), a.inject_sign_flip)?),
            Suite::Golden => ("golden", golden()?),
            Suite::All => unreachable!("expanded above"),
        };
        if !ok {
            failed.push(name);
        }
        out.insert(name.to_string(), json!({ "pass": ok, "report": value }));
    }
    if let Some(path) = &a.json {
        crate::data::write(path, &serde_json::to_string_pretty(&Value::Object(out))?)?;
    }
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::check(format!("failed: {}", failed.join(", "))))
    }
}
