use misf::gradcheck::suite::cases;
use misf::gradcheck::GradCheckOptions;

use crate::error::{CliError, CliResult};
use crate::GradcheckArgs;

pub fn run(a: GradcheckArgs) -> CliResult {
    if a.list {
        for c in cases() {
            println!("{}", c.name);
        }
        return Ok(());
    }
    if !(a.tol > 0.0 && a.eps > 0.0) {
        return Err(CliError::config("--tol and --eps must be positive"));
    }
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        max_coords: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
    };
    let selected: Vec<_> = cases()
        .into_iter()
        .filter(|c| a.only.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(CliError::config("no gradient check matches --only"));
    }
    if !a.json {
        println!(
            "{:<32} {:>12} {:>12} {:>8} {:>6}  status",
            "op", "max_rel_err", "max_abs_err", "checked", "kinks"
        );
    }
    let mut failed = Vec::new();
    let mut json = Vec::new();
    for c in selected {
        let r = c.run(&opts)?;
        if a.json {
            json.push(serde_json::json!({
                "op": c.name,
                "max_rel_err": r.max_rel_err,
                "max_abs_err": r.max_abs_err,
                "checked": r.checked,
                "kinks": r.kinks,
                "non_finite": r.non_finite,
                "pass": r.pass,
            }));
        } else {
            println!(
                "{:<32} {:>12.3e} {:>12.3e} {:>8} {:>6}  {}",
                c.name,
                r.max_rel_err,
                r.max_abs_err,
                r.checked,
                r.kinks,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        if !r.pass {
            failed.push(c.name);
        }
    }
    if a.json {
        println!("{}", serde_json::Value::Array(json));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
