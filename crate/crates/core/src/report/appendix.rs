//! Per-concept `mean ± std` tables, grouped by class, in blocks of six
//! concepts. Rows are the real set and/or the providers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stats::MeanStd;

pub const BLOCK_WIDTH: usize = 6;

/// One value for one (concept, row) pair, typically one model × layer cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixCell {
    pub concept: String,
    pub class: String,
    /// Row label: `Real` or a provider label.
    pub row: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixTable {
    pub caption: String,
    pub rows: Vec<String>,
    /// `(class, concept)`, sorted.
    pub columns: Vec<(String, String)>,
    pub values: BTreeMap<(String, String), MeanStd>,
}

/// Lowercase with spaces as underscores, as in the published tables.
pub fn display_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Round to three decimals and print the shortest form, so `0.140` prints
/// as `0.14` and `0.000` as `0.0`.
pub fn format_value(x: f64) -> String {
    if !x.is_finite() {
        return "nan".into();
    }
    let s = format!("{x:.3}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

fn latex_escape(s: &str) -> String {
    s.replace('\\', "\\textbackslash{}")
        .replace('_', "\\_")
        .replace('&', "\\&")
        .replace('%', "\\%")
        .replace('#', "\\#")
}

/// Aggregate cells into `mean ± std` per (concept, row). `rows` fixes the row
/// order; rows without any cell are dropped.
pub fn build_appendix_table(
    cells: &[AppendixCell],
    rows: &[String],
    caption: &str,
) -> AppendixTable {
    let mut columns: BTreeMap<(String, String), ()> = BTreeMap::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for c in cells {
        let concept = display_name(&c.concept);
        columns.insert((display_name(&c.class), concept.clone()), ());
        groups
            .entry((c.row.clone(), concept))
            .or_default()
            .push(c.value);
    }
    let values = groups
        .into_iter()
        .map(|(k, v)| (k, MeanStd::of(&v).expect("non-empty")))
        .collect::<BTreeMap<_, _>>();
    let rows = rows
        .iter()
        .filter(|r| values.keys().any(|(row, _)| row == *r))
        .cloned()
        .collect();
    AppendixTable {
        caption: caption.to_string(),
        rows,
        columns: columns.into_keys().collect(),
        values,
    }
}

impl AppendixTable {
    fn cell(&self, row: &str, concept: &str) -> Option<&MeanStd> {
        self.values.get(&(row.to_string(), concept.to_string()))
    }

    /// Runs of equal class within a block: `(class, span)`.
    fn class_spans(block: &[(String, String)]) -> Vec<(&str, usize)> {
        let mut spans: Vec<(&str, usize)> = Vec::new();
        for (class, _) in block {
            match spans.last_mut() {
                Some((c, n)) if *c == class.as_str() => *n += 1,
                _ => spans.push((class.as_str(), 1)),
            }
        }
        spans
    }

    pub fn to_latex(&self) -> String {
        let mut out = String::from("\\begin{table}[h!]\n\\footnotesize\n\\centering\n");
        for (b, block) in self.columns.chunks(BLOCK_WIDTH).enumerate() {
            if b > 0 {
                out.push('\n');
            }
            out += &format!(
                "\\begin{{tabular}}{{|{}}}\n\\toprule\n",
                "c|".repeat(block.len() + 1)
            );
            out += "Class";
            for (class, span) in Self::class_spans(block) {
                let name = latex_escape(class);
                if span == 1 {
                    out += &format!(" & {name}");
                } else {
                    out += &format!(" & \\multicolumn{{{span}}}{{c|}}{{{name}}}");
                }
            }
            out += " \\\\\n\\midrule\nConcept";
            for (_, concept) in block {
                out += &format!(" & {}", latex_escape(concept));
            }
            out += " \\\\\n\\midrule\n";
            for row in &self.rows {
                out += &latex_escape(row);
                for (_, concept) in block {
                    match self.cell(row, concept) {
                        Some(ms) => {
                            out += &format!(
                                " & ${}\\pm {}$",
                                format_value(ms.mean),
                                format_value(ms.std)
                            )
                        }
                        None => out += " & --",
                    }
                }
                out += " \\\\\n";
            }
            out += "\\bottomrule\n\\end{tabular}\n";
        }
        out += &format!("\n\\caption{{{}}}\n\\end{{table}}\n", self.caption);
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("**{}**\n", self.caption);
        for block in self.columns.chunks(BLOCK_WIDTH) {
            out.push('\n');
            out += "| Class |";
            for (class, _) in block {
                out += &format!(" {class} |");
            }
            out += &format!("\n|{}\n| Concept |", "---|".repeat(block.len() + 1));
            for (_, concept) in block {
                out += &format!(" {concept} |");
            }
            out.push('\n');
            for row in &self.rows {
                out += &format!("| {row} |");
                for (_, concept) in block {
                    match self.cell(row, concept) {
                        Some(ms) => {
                            out +=
                                &format!(" {} ± {} |", format_value(ms.mean), format_value(ms.std))
                        }
                        None => out += " -- |",
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}
