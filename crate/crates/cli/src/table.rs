use std::fmt::Write as _;

use sitfuse::eval::EvalReport;
use sitfuse::gridworld::ObjectClass;

use crate::error::{CliError, CliResult};

/// Success rates with one row per task plus the average, one column per
/// model in the given order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ComparisonTable {
    pub fn from_reports(reports: &[EvalReport]) -> CliResult<Self> {
        let first = reports
            .first()
            .ok_or_else(|| CliError::Usage("the table needs at least one report".into()))?;
        let tasks: Vec<ObjectClass> = first.tasks.iter().map(|t| t.task).collect();
        for r in reports {
            let mine: Vec<ObjectClass> = r.tasks.iter().map(|t| t.task).collect();
            if mine != tasks {
                return Err(CliError::Runtime(format!(
                    "report `{}` covers different tasks",
                    r.model
                )));
            }
        }
        let mut rows: Vec<(String, Vec<f64>)> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name().to_string(), reports.iter().map(|r| r.tasks[i].rate).collect()))
            .collect();
        let avg = reports
            .iter()
            .map(|r| r.tasks.iter().map(|t| t.rate).sum::<f64>() / r.tasks.len() as f64)
            .collect();
        rows.push(("average".to_string(), avg));
        Ok(ComparisonTable {
            models: reports.iter().map(|r| r.model.clone()).collect(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("task,{}\n", self.models.join(","));
        for (task, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{:.4}", v * 100.0)).collect();
            let _ = writeln!(out, "{task},{}", cells.join(","));
        }
        out
    }

    /// Percentages in aligned columns.
    pub fn to_text(&self) -> String {
        let first = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let widths: Vec<usize> = self.models.iter().map(|m| m.len().max(6)).collect();
        let mut out = format!("{:<first$}", "task");
        for (m, w) in self.models.iter().zip(&widths) {
            let _ = write!(out, "  {m:>w$}");
        }
        out.push('\n');
        for (task, vals) in &self.rows {
            let _ = write!(out, "{task:<first$}");
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(out, "  {:>w$.1}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sitfuse::eval::TaskRate;

    fn report(model: &str, rates: [f64; 4]) -> EvalReport {
        let tasks: Vec<TaskRate> = ObjectClass::ALL
            .into_iter()
            .zip(rates)
            .map(|(task, rate)| TaskRate {
                task,
                successes: (rate * 10.0) as usize,
                episodes: 10,
                rate,
            })
            .collect();
        EvalReport {
            model: model.into(),
            average: rates.iter().sum::<f64>() / 4.0,
            tasks,
            episodes: 40,
            seed: 0,
            config_digest: String::new(),
        }
    }

    #[test]
    fn single_report_has_five_rows() {
        let t = ComparisonTable::from_reports(&[report("a", [0.1, 0.2, 0.3, 0.4])]).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert_eq!(t.rows[4].1, vec![0.25]);
        assert_eq!(t.to_csv().lines().count(), 6);
    }

    #[test]
    fn columns_keep_the_given_order_and_averages_match() {
        let reports = [report("z", [1.0, 0.0, 0.5, 0.5]), report("a", [0.2, 0.2, 0.2, 0.6])];
        let t = ComparisonTable::from_reports(&reports).unwrap();
        assert_eq!(t.models, vec!["z", "a"]);
        for (i, r) in reports.iter().enumerate() {
            assert!((t.rows[4].1[i] - r.average).abs() < 1e-12);
        }
        let text = t.to_text();
        assert!(text.starts_with("task"));
        assert!(text.lines().nth(1).unwrap().contains("100.0"));
    }

    #[test]
    fn mismatched_tasks_and_empty_input_are_errors() {
        let mut odd = report("b", [0.0; 4]);
        odd.tasks.pop();
        assert!(ComparisonTable::from_reports(&[report("a", [0.0; 4]), odd]).is_err());
        assert!(ComparisonTable::from_reports(&[]).is_err());
    }
}
