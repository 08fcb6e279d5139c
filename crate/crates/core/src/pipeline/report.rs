use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// System name without the cumulative `+` prefix.
    pub label: String,
    pub bleu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
    /// First row of a block (rendered without `+`).
    #[serde(default)]
    pub base: bool,
    #[serde(default)]
    pub starred: bool,
}

impl ReportRow {
    pub fn base(label: &str, bleu: f64) -> Self {
        Self { label: label.to_string(), bleu, dev_bleu: None, base: true, starred: false }
    }

    pub fn added(label: &str, bleu: f64) -> Self {
        Self { label: label.to_string(), bleu, dev_bleu: None, base: false, starred: false }
    }

    pub fn with_dev(mut self, dev: f64) -> Self {
        self.dev_bleu = Some(dev);
        self
    }

    pub fn display_label(&self) -> String {
        if self.base {
            self.label.clone()
        } else {
            format!("+ {}", self.label)
        }
    }
}

/// Cumulative system table: each non-base row adds one ingredient to the row above.
/// Starred rows (the ensemble) are kept at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    pub fn new(title: &str, rows: Vec<ReportRow>) -> Self {
        let (mut plain, starred): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| !r.starred);
        plain.extend(starred);
        Self { title: title.to_string(), rows: plain }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let has_dev = self.rows.iter().any(|r| r.dev_bleu.is_some());
        let width = self.rows.iter().map(|r| r.display_label().chars().count()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        if has_dev {
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "System", "BLEU", "dev");
        } else {
            let _ = writeln!(out, "{:<width$}  {:>8}", "System", "BLEU");
        }
        let _ = writeln!(out, "{}", "-".repeat(width + if has_dev { 20 } else { 10 }));
        for (i, r) in self.rows.iter().enumerate() {
            if r.base && i > 0 {
                let _ = writeln!(out);
            }
            let score = format!("{:.2}{}", r.bleu, if r.starred { "*" } else { " " });
            let _ = write!(out, "{:<width$}  {:>8}", r.display_label(), score);
            if let Some(d) = r.dev_bleu {
                let _ = write!(out, "  {:>7.2}", d);
            }
            out.push('\n');
        }
        out
    }
}

/// A full-scale Chinese-English biomedical ablation table (untagged and tagged blocks).
pub fn reference_table() -> AblationReport {
    let steps = [
        "IND-TAUS",
        "IND-BIO",
        "OOD-IN-HOUSE",
        "Back-Translation",
        "Knowledge Distillation",
        "Forward-Translation",
        "Multi BT",
        "Finetune",
        "Target denoise finetune",
    ];
    let plain = [34.57, 35.65, 40.96, 41.88, 42.8, 43.12, 43.32, 44.11, 44.96, 45.1];
    let tagged = [34.48, 35.62, 41.07, 42.14, 43.91, 44.14, 44.39, 45.23, 45.43, 45.54];
    let mut rows = Vec::new();
    for (base, scores) in [("Baseline", plain), ("Baseline_TAG", tagged)] {
        rows.push(ReportRow::base(base, scores[0]));
        rows.extend(steps.iter().zip(&scores[1..]).map(|(l, &s)| ReportRow::added(l, s)));
    }
    let mut ens = ReportRow::added("Ensemble", 46.91);
    ens.starred = true;
    rows.push(ens);
    AblationReport::new("Chinese-English biomedical test set", rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let r = reference_table();
        assert_eq!(r.rows.len(), 21);
        assert_eq!(r.rows[0].display_label(), "Baseline");
        assert_eq!(r.rows[2].display_label(), "+ IND-BIO");
        let last = r.rows.last().unwrap();
        assert!(last.starred);
        assert_eq!(last.bleu, 46.91);
        let text = r.render_text();
        assert!(text.contains("+ Target denoise finetune"));
        assert!(text.contains("46.91*"));
    }

    #[test]
    fn text_and_json_agree() {
        let r = AblationReport::new("t", vec![ReportRow::base("Baseline", 12.25)]);
        let back: AblationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.render_text().contains("12.25"));
        assert_eq!(r.render_text().lines().count(), 4);
    }

    #[test]
    fn starred_moves_last() {
        let mut e = ReportRow::added("Ensemble", 3.0);
        e.starred = true;
        let r = AblationReport::new("t", vec![ReportRow::base("Baseline", 1.0), e, ReportRow::added("Finetune", 2.0)]);
        assert_eq!(r.rows.last().unwrap().label, "Ensemble");
    }
}
