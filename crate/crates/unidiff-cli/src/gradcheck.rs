//! `gradcheck`: kernel-level finite-difference checks plus the five loss
//! terms on the small harness model, tolerance 1e-4.

use serde::Serialize;

use unidiff_core::datagen::TaskKind;
use unidiff_core::error::Result;
use unidiff_core::numerics::check_all_kernels;
use unidiff_core::trainer::harness::{check_loss, CHECKED_LOSSES};

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub pass: bool,
    pub lines: Vec<String>,
}

pub fn run_full_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut lines = Vec::new();
    let mut pass = true;

    for k in check_all_kernels()? {
        pass &= k.pass;
        lines.push(format!(
            "kernel {:<18} max_rel_err {:.3e}  {}",
            k.kernel,
            k.max_rel_err,
            if k.pass { "pass" } else { "FAIL" }
        ));
    }
    for kind in CHECKED_LOSSES {
        let r = check_loss(kind, seed, 64, 1e-4, TaskKind::T2i)?;
        pass &= r.pass;
        lines.push(format!(
            "loss {:<12} max_rel_err {:.3e}  ({} params)  {}",
            r.loss,
            r.max_rel_err,
            r.checked_params,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    Ok(GradcheckReport { pass, lines })
}
