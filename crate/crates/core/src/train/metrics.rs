use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `counts[truth][pred]`, both zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Builds from 1-based labels.
    pub fn from_labels(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Input(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if !(1..=classes).contains(&p) || !(1..=classes).contains(&t) {
                return Err(Error::Input(format!("label pair ({t}, {p}) outside 1..={classes}")));
            }
            counts[t - 1][p - 1] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> usize {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Header `class,1..=C`, then one row per true class.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let header: Vec<String> = (1..=self.classes()).map(|c| c.to_string()).collect();
        writeln!(f, "class,{}", header.join(","))?;
        for (i, row) in self.counts.iter().enumerate() {
            let row: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{}", i + 1, row.join(","))?;
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    /// Seconds per sample at batch size 1.
    pub inference_s: f64,
}

impl MetricsReport {
    /// Macro-averaged metrics; a class with an empty denominator scores 0.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Input("no predictions to score".into()));
        }
        let c = confusion.classes();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let tp = confusion.counts[k][k];
            let pk = ratio(tp, confusion.col_sum(k));
            let rk = ratio(tp, confusion.row_sum(k));
            p += pk;
            r += rk;
            f += if pk + rk > 0.0 { 2.0 * pk * rk / (pk + rk) } else { 0.0 };
        }
        Ok(MetricsReport {
            accuracy: ratio(confusion.trace(), n),
            precision: p / c as f64,
            recall: r / c as f64,
            f1: f / c as f64,
            confusion,
            inference_s: 0.0,
        })
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(ConfusionMatrix::from_labels(predicted, truth, classes)?)
    }

    /// `metric,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "metric,value")?;
        writeln!(f, "accuracy,{}", self.accuracy)?;
        writeln!(f, "precision,{}", self.precision)?;
        writeln!(f, "recall,{}", self.recall)?;
        writeln!(f, "f1,{}", self.f1)?;
        writeln!(f, "samples,{}", self.confusion.total())?;
        writeln!(f, "inference_s,{}", self.inference_s)?;
        Ok(())
    }
}
