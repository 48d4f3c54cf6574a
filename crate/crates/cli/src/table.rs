//! Plain-text metric tables.
//!
//! The comparison layout mirrors the four-column benchmark format:
//! `Models | Metrics | Training Results | Testing Results`, with one
//! four-row section per model and rule lines between sections. Column
//! widths adapt to content; everything else is fixed, so identical numbers
//! render to identical bytes.

/// Metric labels of a comparison section, in row order. The loss row is
/// explicitly labeled as binary cross-entropy to keep it distinct from the
/// misclassification rate.
pub const METRIC_LABELS: [&str; 4] = ["Accuracy", "Precision", "Recall", "Loss (BCE)"];

/// Renders a bordered table. Each group's rows sit between rule lines; a
/// group is typically one model's metric rows. Every row must have exactly
/// `headers.len()` cells.
pub fn render(headers: &[&str], groups: &[Vec<Vec<String>>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for group in groups {
        for row in group {
            debug_assert_eq!(row.len(), cols);
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
    }
    let rule: String = {
        let mut s = String::from("+");
        for w in &widths {
            s.push_str(&"-".repeat(w + 2));
            s.push('+');
        }
        s.push('\n');
        s
    };
    let format_row = |cells: &[String]| {
        let mut s = String::from("|");
        for (w, cell) in widths.iter().zip(cells) {
            s.push_str(&format!(" {cell:<w$} |"));
        }
        s.push('\n');
        s
    };
    let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let mut out = String::new();
    out.push_str(&rule);
    out.push_str(&format_row(&header_cells));
    out.push_str(&rule);
    for group in groups {
        for row in group {
            out.push_str(&format_row(row));
        }
        out.push_str(&rule);
    }
    out
}

/// One model's four metric rows (training and testing values arrive
/// pre-formatted so tables and machine-readable output carry identical
/// digits).
pub fn model_section(model: &str, train: &[String; 4], test: &[String; 4]) -> Vec<Vec<String>> {
    METRIC_LABELS
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let name = if i == 0 { model.to_string() } else { String::new() };
            vec![name, label.to_string(), train[i].clone(), test[i].clone()]
        })
        .collect()
}

/// Header row of the comparison layout.
pub const COMPARE_HEADERS: [&str; 4] = ["Models", "Metrics", "Training Results", "Testing Results"];
