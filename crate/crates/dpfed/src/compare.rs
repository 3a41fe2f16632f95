//! Side-by-side accuracy curves for runs that share an evaluation schedule.

use std::io::Write;
use std::path::Path;

use crate::error::{DpfedError, Result};
use crate::run::read_metrics;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub rounds: Vec<u64>,
    pub accuracy: Vec<f64>,
}

impl Series {
    pub fn read(run: &Path) -> Result<Self> {
        let (rounds, accuracy) = read_metrics(run)?
            .into_iter()
            .filter_map(|r| Some((r.round, r.accuracy_top1?)))
            .unzip();
        Ok(Series {
            name: run
                .file_name()
                .map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned()),
            rounds,
            accuracy,
        })
    }
}

/// Trailing mean over up to `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub rounds: Vec<u64>,
    /// `smoothed[run][eval]`.
    pub smoothed: Vec<Vec<f64>>,
    /// `deltas[run][eval]`: smoothed accuracy minus the first run's.
    pub deltas: Vec<Vec<f64>>,
}

pub fn compare(series: &[Series], window: usize) -> Result<Comparison> {
    let [first, rest @ ..] = series else {
        return Err(DpfedError::config("compare needs at least two runs"));
    };
    if rest.is_empty() {
        return Err(DpfedError::config("compare needs at least two runs"));
    }
    for s in rest {
        if s.rounds != first.rounds {
            return Err(DpfedError::Mismatch(format!(
                "{} evaluates at rounds {} but {} at {}",
                first.name,
                preview(&first.rounds),
                s.name,
                preview(&s.rounds)
            )));
        }
    }
    if first.rounds.is_empty() {
        return Err(DpfedError::Mismatch("runs have no evaluations".into()));
    }
    let smoothed: Vec<Vec<f64>> = series.iter().map(|s| smooth(&s.accuracy, window)).collect();
    let deltas = smoothed
        .iter()
        .map(|s| s.iter().zip(&smoothed[0]).map(|(a, b)| a - b).collect())
        .collect();
    Ok(Comparison {
        names: series.iter().map(|s| s.name.clone()).collect(),
        rounds: first.rounds.clone(),
        smoothed,
        deltas,
    })
}

fn preview(rounds: &[u64]) -> String {
    let head: Vec<String> = rounds.iter().take(4).map(u64::to_string).collect();
    let more = if rounds.len() > 4 { ", ..." } else { "" };
    format!("[{}{more}] ({} evaluations)", head.join(", "), rounds.len())
}

impl Comparison {
    /// Smoothed accuracy and delta of every run at the last evaluation.
    pub fn final_deltas(&self) -> Vec<f64> {
        self.deltas.iter().map(|d| *d.last().unwrap()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        header.extend(self.names.iter().map(|n| format!("accuracy_top1:{n}")));
        header.extend(self.names.iter().skip(1).map(|n| format!("delta:{n}")));
        w.write_record(&header)?;
        for (i, round) in self.rounds.iter().enumerate() {
            let mut rec = vec![round.to_string()];
            rec.extend(self.smoothed.iter().map(|s| s[i].to_string()));
            rec.extend(self.deltas.iter().skip(1).map(|d| d[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(name: &str, rounds: Vec<u64>, accuracy: Vec<f64>) -> Series {
        Series {
            name: name.into(),
            rounds,
            accuracy,
        }
    }

    #[test]
    fn trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[2.0], 5), vec![2.0]);
    }

    #[test]
    fn identical_runs_have_zero_deltas() {
        let a = series("a", vec![20, 40, 60], vec![0.1, 0.2, 0.3]);
        let b = Series { name: "b".into(), ..a.clone() };
        let c = compare(&[a, b], 5).unwrap();
        assert!(c.deltas.iter().flatten().all(|&d| d == 0.0));
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("round,accuracy_top1:a,accuracy_top1:b,delta:b\n"));
    }

    #[test]
    fn cadence_mismatch_is_an_error() {
        let a = series("a", vec![20, 40], vec![0.1, 0.2]);
        let b = series("b", vec![10, 20, 30, 40], vec![0.1; 4]);
        assert!(matches!(compare(&[a.clone(), b], 5), Err(DpfedError::Mismatch(_))));
        assert!(matches!(compare(&[a], 5), Err(DpfedError::Config(_))));
    }
}
