use std::fmt::Write as _;
use std::path::Path;

use super::{auc, confusion, point_metrics, roc_curve, Confusion, ScoredSample, FLAG_AUC_UNDEFINED};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::train::predict_samples;

/// One evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// Empty when only one class is present.
    pub roc: Vec<(f64, f64)>,
    pub n_samples: usize,
    pub flags: Vec<String>,
}

fn real(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    pub fn from_samples(samples: &[ScoredSample], threshold: f64) -> Result<Self> {
        let c = confusion(samples, threshold)?;
        let p = point_metrics(&c);
        let mut flags: Vec<String> = p.flags.iter().map(|f| f.to_string()).collect();
        let (auc, roc) = match (auc(samples), roc_curve(samples)) {
            (Ok(a), Ok(r)) => (Some(a), r),
            (Err(Error::SingleClass), _) => {
                flags.push(FLAG_AUC_UNDEFINED.to_string());
                (None, Vec::new())
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok(MetricsReport {
            threshold,
            confusion: c,
            accuracy: p.accuracy,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            auc,
            roc,
            n_samples: samples.len(),
            flags,
        })
    }

    /// JSON with every real printed to six decimal places.
    pub fn to_json(&self) -> String {
        let c = &self.confusion;
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"threshold\": {},", real(self.threshold));
        let _ = writeln!(
            s,
            "  \"confusion\": {{\"tp\": {}, \"fp\": {}, \"tn\": {}, \"fn\": {}}},",
            c.tp, c.fp, c.tn, c.fn_
        );
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            let _ = writeln!(s, "  \"{k}\": {},", real(v));
        }
        let _ = writeln!(s, "  \"auc\": {},", self.auc.map_or("null".to_string(), real));
        let roc: Vec<String> = self.roc.iter().map(|&(x, y)| format!("[{}, {}]", real(x), real(y))).collect();
        let _ = writeln!(s, "  \"roc\": [{}],", roc.join(", "));
        let _ = writeln!(s, "  \"n_samples\": {},", self.n_samples);
        let flags: Vec<String> = self.flags.iter().map(|f| format!("\"{f}\"")).collect();
        let _ = writeln!(s, "  \"flags\": [{}]", flags.join(", "));
        s.push_str("}\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Accuracy, precision, recall, F1 and AUC, one per line.
    pub fn headline(&self) -> String {
        format!(
            "accuracy  {}\nprecision {}\nrecall    {}\nf1        {}\nauc       {}",
            real(self.accuracy),
            real(self.precision),
            real(self.recall),
            real(self.f1),
            self.auc.map_or("undefined".to_string(), real)
        )
    }
}

/// `subject_id,view_index,score,label`, scores at full precision.
pub fn write_scores_csv(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    let mut s = String::from("subject_id,view_index,score,label\n");
    for r in samples {
        let _ = writeln!(s, "{},{},{},{}", r.subject_id, r.view_index, r.score, r.label);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
    reader
        .records()
        .map(|row| {
            let row = row.map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let bad = || Error::Labels(format!("{}: malformed row {row:?}", path.display()));
            Ok(ScoredSample {
                subject_id: field(0).parse().map_err(|_| bad())?,
                view_index: field(1).parse().map_err(|_| bad())?,
                score: field(2).parse().map_err(|_| bad())?,
                label: field(3).parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Scores every sample once in eval mode, writes the report to `out_path`,
/// and returns it with the per-sample scores.
pub fn evaluate_split(
    net: &Network,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
    out_path: &Path,
) -> Result<(MetricsReport, Vec<ScoredSample>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let probs = predict_samples(net, samples, batch_size)?;
    let scored: Vec<ScoredSample> = samples
        .iter()
        .zip(&probs)
        .map(|(s, &p)| ScoredSample {
            subject_id: s.subject_id,
            view_index: s.view_index,
            score: p as f64,
            label: (s.target >= 0.5) as u8,
        })
        .collect();
    let report = MetricsReport::from_samples(&scored, threshold)?;
    report.save(out_path)?;
    Ok((report, scored))
}
