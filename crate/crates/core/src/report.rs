//! Plot-ready CSV exports of run logs and credit traces.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::trainer::{CreditTrace, MetricRecord};

pub const CSV_SCHEMA: &str = "rlsd-lab-csv/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Series {
    Reward,
    Kl,
    Entropy,
    Clip,
    Leakage,
    Rho,
}

impl Series {
    pub const ALL: [Series; 6] = [
        Series::Reward,
        Series::Kl,
        Series::Entropy,
        Series::Clip,
        Series::Leakage,
        Series::Rho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Series::Reward => "reward",
            Series::Kl => "kl",
            Series::Entropy => "entropy",
            Series::Clip => "clip",
            Series::Leakage => "leakage",
            Series::Rho => "rho",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Series::Reward => &["step", "mean_reward", "train_accuracy", "eval_accuracy"],
            Series::Kl => &["step", "kl", "delta_s", "delta_t"],
            Series::Entropy => &["step", "entropy"],
            Series::Clip => &["step", "clip_fraction", "credit_clip_fraction", "lambda"],
            Series::Leakage => &["step", "probe_score", "sensitivity"],
            Series::Rho => &["step", "rho", "g_star_norm", "delta_norm"],
        }
    }

    fn values(self, r: &MetricRecord) -> Vec<Option<f64>> {
        match self {
            Series::Reward => vec![r.mean_reward, r.train_accuracy, r.eval_accuracy],
            Series::Kl => vec![r.kl, r.delta_s, r.delta_t],
            Series::Entropy => vec![Some(r.entropy)],
            Series::Clip => vec![r.clip_fraction, r.credit_clip_fraction, r.lambda],
            Series::Leakage => vec![Some(r.probe_score), Some(r.sensitivity)],
            Series::Rho => vec![r.rho, r.g_star_norm, r.delta_norm],
        }
    }
}

impl FromStr for Series {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Series::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| LabError::UnknownSeries(s.to_string()))
    }
}

/// Twelve significant digits, fixed notation for moderate exponents.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let fixed = format!("{:.*}", (11 - exp) as usize, x);
        let trimmed = if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.')
        } else {
            &fixed
        };
        trimmed.to_string()
    } else {
        let (mant, e) = sci.split_at(sci.find('e').expect("exponent"));
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}{e}")
    }
}

fn header(out: &mut String, kind: &str, columns: &[&str]) {
    writeln!(out, "# schema: {CSV_SCHEMA} {kind}").expect("write to string");
    out.push_str(&columns.join(","));
    out.push('\n');
}

/// One row per record; missing values are empty fields.
pub fn export_series(records: &[MetricRecord], which: Series) -> String {
    let mut out = String::new();
    header(&mut out, &format!("series={}", which.name()), which.columns());
    for r in records {
        out.push_str(&r.step.to_string());
        for v in which.values(r) {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format_sig(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn export_series_named(records: &[MetricRecord], which: &str) -> Result<String> {
    Ok(export_series(records, which.parse()?))
}

pub const HEATMAP_COLUMNS: [&str; 12] = [
    "step",
    "prompt",
    "rollout",
    "position",
    "token",
    "student_lp",
    "teacher_lp",
    "delta",
    "weight",
    "clipped_weight",
    "advantage",
    "clipped",
];

/// Per-token rows `(position, token, Â_t)` of every trace, with the
/// evidence weight before and after clipping.
pub fn export_credit_heatmap_data(traces: &[CreditTrace]) -> String {
    let mut out = String::new();
    header(&mut out, "credit-heatmap", &HEATMAP_COLUMNS);
    for tr in traces {
        for (pos, (tok, c)) in tr.tokens.iter().zip(&tr.credits).enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                tr.step,
                tr.prompt,
                tr.rollout,
                pos,
                tok,
                format_sig(tr.student_lp[pos]),
                format_sig(tr.teacher_lp[pos]),
                format_sig(c.delta),
                format_sig(c.weight),
                format_sig(c.clipped_weight),
                format_sig(c.advantage),
                c.clipped as u8
            )
            .expect("write to string");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(-0.25), "-0.25");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_sig(123456.789), "123456.789");
        assert_eq!(format_sig(2.0 / 3.0 * 1e-7), "6.66666666667e-8");
        assert_eq!(format_sig(1e15), "1e15");
    }

    #[test]
    fn unknown_series_is_an_error() {
        assert!(matches!("loss".parse::<Series>(), Err(LabError::UnknownSeries(_))));
        for s in Series::ALL {
            assert_eq!(s.name().parse::<Series>().unwrap(), s);
        }
    }

    #[test]
    fn empty_log_gives_header_only() {
        let csv = export_series(&[], Series::Kl);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("# schema: rlsd-lab-csv/1 series=kl\n"));
        assert_eq!(csv.lines().nth(1), Some("step,kl,delta_s,delta_t"));
    }
}
