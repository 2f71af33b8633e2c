use serde::{Deserialize, Serialize};

/// Max, mean and population standard deviation of a group of run scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub group: String,
    pub values: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Runs that failed and were left out of the statistics.
    pub failed: usize,
}

impl StabilityReport {
    /// Summarises `values`; all three statistics are NaN for an empty list.
    pub fn from_values(group: impl Into<String>, values: Vec<f64>, failed: usize) -> Self {
        let (max, mean, std) = summarize(&values);
        StabilityReport {
            group: group.into(),
            values,
            max,
            mean,
            std,
            failed,
        }
    }
}

/// `(max, mean, population std)`.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (max, mean, var.sqrt())
}

/// CSV of several groups; the header notes the estimator.
pub fn stability_csv(reports: &[StabilityReport]) -> String {
    let mut out = String::from("# std is the population standard deviation (divide by n)\ngroup,runs,failed,max,mean,std\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2}\n",
            r.group,
            r.values.len(),
            r.failed,
            r.max,
            r.mean,
            r.std
        ));
    }
    out
}
