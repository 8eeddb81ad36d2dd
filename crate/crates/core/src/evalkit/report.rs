//! Plain-text and CSV rendering of metric tables.

use super::MetricsReport;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    /// Model × (accuracy, macro F1, weighted F1).
    pub text: String,
    pub csv: String,
    /// Class × model F1 matrix; empty when not requested.
    pub class_text: String,
    pub class_csv: String,
}

fn num(x: f64) -> String {
    format!("{x:.3}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Left-aligned first column, right-aligned others, two spaces between.
fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else {
                line.push_str(&format!("  {cell:>w$}", w = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Values rendered at 3 decimals; the column maximum gets a `*` when there is
/// more than one row. Best flags compare the rendered values.
fn flagged(values: &[f64]) -> Vec<String> {
    let rendered: Vec<String> = values.iter().map(|v| num(*v)).collect();
    if values.len() < 2 {
        return rendered.into_iter().map(|s| format!("{s} ")).collect();
    }
    let best = rendered
        .iter()
        .map(|s| s.parse::<f64>().unwrap_or(f64::NEG_INFINITY))
        .fold(f64::NEG_INFINITY, f64::max);
    rendered
        .into_iter()
        .map(|s| {
            let mark = if s.parse::<f64>().ok() == Some(best) { '*' } else { ' ' };
            format!("{s}{mark}")
        })
        .collect()
}

fn row_name(r: &MetricsReport, i: usize) -> String {
    if r.model.is_empty() {
        format!("model{}", i + 1)
    } else {
        r.model.clone()
    }
}

pub fn render_report(reports: &[MetricsReport], class_breakdown: bool) -> RenderedReport {
    let names: Vec<String> = reports.iter().enumerate().map(|(i, r)| row_name(r, i)).collect();
    let columns: [fn(&MetricsReport) -> f64; 3] = [|r| r.accuracy, |r| r.macro_f1, |r| r.weighted_f1];
    let cells: Vec<Vec<String>> = columns
        .iter()
        .map(|f| flagged(&reports.iter().map(f).collect::<Vec<_>>()))
        .collect();

    let mut rows = vec![["Model", "Accuracy", "Macro-F1", "Weighted-F1"].map(|h| format!("{h} ")).to_vec()];
    rows[0][0] = "Model".into();
    let mut csv = String::from("model,accuracy,macro_f1,weighted_f1\n");
    for (i, (name, r)) in names.iter().zip(reports).enumerate() {
        let mut row = vec![name.clone()];
        row.extend(cells.iter().map(|c| c[i].clone()));
        rows.push(row);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(name),
            num(r.accuracy),
            num(r.macro_f1),
            num(r.weighted_f1)
        ));
    }

    let (class_text, class_csv) = if class_breakdown { class_matrix(reports, &names) } else { Default::default() };
    RenderedReport { text: table(&rows), csv, class_text, class_csv }
}

/// Per-class F1 with classes as rows and models as columns. Classes appear in
/// first-seen order; a model without a class shows `-`.
fn class_matrix(reports: &[MetricsReport], names: &[String]) -> (String, String) {
    let mut classes: Vec<&str> = Vec::new();
    for r in reports {
        for c in &r.per_class {
            if !classes.contains(&c.label.as_str()) {
                classes.push(&c.label);
            }
        }
    }
    let mut rows = vec![std::iter::once("Class".to_string()).chain(names.iter().cloned()).collect::<Vec<_>>()];
    let mut csv = std::iter::once("class".to_string())
        .chain(names.iter().map(|n| csv_field(n)))
        .collect::<Vec<_>>()
        .join(",");
    csv.push('\n');
    for class in classes {
        let vals: Vec<String> = reports.iter().map(|r| r.f1_of(class).map_or("-".into(), num)).collect();
        rows.push(std::iter::once(class.to_string()).chain(vals.iter().cloned()).collect());
        csv.push_str(&std::iter::once(csv_field(class)).chain(vals).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    (table(&rows), csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::compute_metrics;
    use crate::labels::{Pred, Sentiment};

    fn collapse(line: &str) -> String {
        line.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    fn lines(text: &str) -> Vec<String> {
        text.lines().map(collapse).collect()
    }

    #[test]
    fn published_rows_render_in_table_format() {
        let rows = [
            MetricsReport::headline("Base", "sentiment", 0.702, 0.506, 0.693),
            MetricsReport::headline("All Aux (Hybrid)", "sentiment", 0.744, 0.582, 0.739),
        ];
        let r = render_report(&rows, false);
        let l = lines(&r.text);
        assert_eq!(l[0], "Model Accuracy Macro-F1 Weighted-F1");
        assert_eq!(l[1], "Base 0.702 0.506 0.693");
        assert_eq!(l[2], "All Aux (Hybrid) 0.744* 0.582* 0.739*");
        assert_eq!(r.csv, "model,accuracy,macro_f1,weighted_f1\nBase,0.702,0.506,0.693\nAll Aux (Hybrid),0.744,0.582,0.739\n");
        assert!(r.class_text.is_empty());
        // digits line up across rows
        let raw: Vec<&str> = r.text.lines().collect();
        assert_eq!(raw[1].find("0.702").unwrap(), raw[2].find("0.744").unwrap());
    }

    #[test]
    fn single_row_has_no_flags() {
        let r = render_report(&[MetricsReport::headline("Base", "sentiment", 0.702, 0.506, 0.693)], true);
        assert!(!r.text.contains('*'));
        assert_eq!(lines(&r.text)[1], "Base 0.702 0.506 0.693");
    }

    #[test]
    fn ties_flag_every_maximum() {
        let rows = [
            MetricsReport::headline("a", "sentiment", 0.5, 0.4, 0.3),
            MetricsReport::headline("b", "sentiment", 0.5, 0.2, 0.1),
        ];
        let l = lines(&render_report(&rows, false).text);
        assert_eq!(l[1], "a 0.500* 0.400* 0.300*");
        assert_eq!(l[2], "b 0.500* 0.200 0.100");
    }

    #[test]
    fn class_matrix_lists_every_class() {
        use Sentiment::*;
        let a = compute_metrics(&[Negative, Neutral], &[Negative.into(), Pred::Invalid], &Sentiment::ALL).unwrap().named("A");
        let b = compute_metrics(&[Negative, Neutral], &[Negative.into(), Neutral.into()], &Sentiment::ALL).unwrap().named("B,2");
        let r = render_report(&[a, b], true);
        let l = lines(&r.class_text);
        assert_eq!(l[0], "Class A B,2");
        assert_eq!(l[1], "negative 1.000 1.000");
        assert_eq!(l[2], "neutral 0.000 1.000");
        assert_eq!(l[3], "positive 0.000 0.000");
        assert!(r.class_csv.starts_with("class,A,\"B,2\"\n"));
    }
}
