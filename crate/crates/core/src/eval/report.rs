//! Markdown rendering of evaluation results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::matrix::{EvalMatrix, Metric};
use super::protocol::SweepPoint;

/// One variant of an ablation: the same protocol with a different detector
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_attention: bool,
    pub matrix: EvalMatrix,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// ACC and AP grids plus averages.
pub fn render_matrix(title: &str, m: &EvalMatrix) -> String {
    let mut s = format!("## {title}\n\nProtocol: `{}`\n\n", m.protocol);
    for metric in [Metric::Acc, Metric::Ap] {
        let _ = write!(s, "| {} (%) |", metric.name().to_uppercase());
        for c in &m.test_generators {
            let _ = write!(s, " {c} |");
        }
        s.push_str(" real |\n|---|");
        s.push_str(&"---|".repeat(m.cols() + 1));
        s.push('\n');
        let values = m.values(metric);
        for (r, name) in m.train_generators.iter().enumerate() {
            let _ = write!(s, "| {name} |");
            for v in &values[r * m.cols()..(r + 1) * m.cols()] {
                let _ = write!(s, " {} |", pct(*v));
            }
            let real = if metric == Metric::Acc { m.real_acc[r] } else { None };
            let _ = writeln!(s, " {} |", pct(real));
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "Average over fake-generator cells: ACC {} / AP {}\n",
        pct(m.mean_acc),
        pct(m.mean_ap)
    );
    s
}

/// Paired rows, one per variant, with per-test-generator ACC/AP and the
/// averages. Columns follow the first row's matrix.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("## Ablation\n\n| Variant | Attention |");
    let Some(first) = rows.first() else {
        s.push_str("\n\n(no rows)\n");
        return s;
    };
    for c in &first.matrix.test_generators {
        let _ = write!(s, " {c} ACC | {c} AP |");
    }
    s.push_str(" Avg ACC | Avg AP |\n|---|---|");
    s.push_str(&"---|---|".repeat(first.matrix.cols() + 1));
    s.push('\n');
    for row in rows {
        let m = &row.matrix;
        let _ = write!(
            s,
            "| {} | {} |",
            row.variant,
            if row.use_attention { "yes" } else { "no" }
        );
        let (acc, ap) = (m.values(Metric::Acc), m.values(Metric::Ap));
        // Mean over rows per test column, so multi-row protocols collapse to one line.
        for c in 0..m.cols() {
            let col = |v: &[Option<f64>]| {
                let present: Vec<f64> = (0..m.rows()).filter_map(|r| v[r * m.cols() + c]).collect();
                (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
            };
            let _ = write!(s, " {} | {} |", pct(col(&acc)), pct(col(&ap)));
        }
        let _ = writeln!(s, " {} | {} |", pct(m.mean_acc), pct(m.mean_ap));
    }
    s.push('\n');
    s
}

/// Mean ACC/AP per probe timestep.
pub fn render_sweep(points: &[SweepPoint]) -> String {
    let mut s = String::from("## Timestep sweep\n\n| t | mean ACC | mean AP |\n|---|---|---|\n");
    for p in points {
        let _ = writeln!(
            s,
            "| {} | {} | {} |",
            p.timestep,
            pct(p.matrix.mean_acc),
            pct(p.matrix.mean_ap)
        );
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Protocol;
    use crate::eval::EvalCell;

    fn matrix(acc: f64) -> EvalMatrix {
        let cell = |g: &str| {
            Some(EvalCell {
                train_generator: "all".into(),
                test_generator: g.into(),
                acc,
                ap: 0.5,
                n_real: 3,
                n_fake: 3,
            })
        };
        EvalMatrix::new(
            Protocol::Standard,
            vec!["all".into()],
            vec!["ddpm-a".into(), "ddpm-b".into()],
            vec![cell("ddpm-a"), None],
            vec![Some(1.0)],
        )
        .unwrap()
    }

    #[test]
    fn ablation_rows_are_paired() {
        let rows = vec![
            AblationRow {
                variant: "anl-without-attention".into(),
                use_attention: false,
                matrix: matrix(0.75),
            },
            AblationRow {
                variant: "anl".into(),
                use_attention: true,
                matrix: matrix(0.875),
            },
        ];
        let md = render_ablation(&rows);
        let lines: Vec<&str> = md.lines().filter(|l| l.starts_with("| anl")).collect();
        assert_eq!(lines.len(), 2);
        assert!(
            lines[0].contains("| no | 75.00 | 50.00 | – | – | 75.00 | 50.00 |"),
            "{md}"
        );
        assert!(lines[1].contains("87.50"));
    }

    #[test]
    fn matrix_table_marks_absent_cells() {
        let md = render_matrix("Standard", &matrix(0.5));
        assert!(md.contains("| all | 50.00 | – | 100.00 |"), "{md}");
        assert!(md.contains("ACC 50.00 / AP 50.00"));
    }
}
