use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::evalsts::{evaluate_suite, StsTask};

/// Average Spearman x100 for each model under k = 1, 2, 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingAblation {
    pub rows: Vec<(String, [f64; 3])>,
}

impl PoolingAblation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,k1,k2,k3\n");
        for (name, v) in &self.rows {
            out.push_str(&format!("{name},{:.2},{:.2},{:.2}\n", v[0], v[1], v[2]));
        }
        out
    }
}

pub fn pooling_ablation(models: &[(String, EncoderModel)], tasks: &[StsTask]) -> Result<PoolingAblation> {
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        if model.config().layers + 1 < 3 {
            return Err(Error::invalid(format!(
                "model {name} has {} layers; pooling over 3 needs at least 2",
                model.config().layers
            )));
        }
        let mut cells = [0.0; 3];
        for (cell, pool) in cells.iter_mut().zip(PoolingSpec::all()) {
            let report = evaluate_suite(model, tasks, pool, None)?;
            if report.is_partial() {
                return Err(Error::invalid(format!(
                    "model {name}, k={}: tasks failed: {:?}",
                    pool.k(),
                    report.failed
                )));
            }
            *cell = report.avg_spearman();
        }
        rows.push((name.clone(), cells));
    }
    Ok(PoolingAblation { rows })
}
