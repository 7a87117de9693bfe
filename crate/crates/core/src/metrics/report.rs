use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use super::{ged_squared, krippendorff_alpha, wilcoxon_signed_rank, AlphaRegion, MaskSet, MetricsError};

/// Metrics for one test image. `kalpha_roi` is `None` when neither the
/// predictions nor the annotations mark any foreground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub ged: f64,
    pub kalpha_all: f64,
    pub kalpha_roi: Option<f64>,
}

fn alpha(set: &MaskSet, region: AlphaRegion) -> Result<Option<f64>, MetricsError> {
    match krippendorff_alpha(set, region) {
        Ok(k) => Ok(Some(k.value)),
        Err(MetricsError::EmptyRoi) => Ok(None),
        Err(e) => Err(e),
    }
}

/// GED between the predicted and annotated sets, Kα over the predictions.
pub fn evaluate_image(image_id: &str, predictions: &MaskSet, annotations: &MaskSet) -> Result<ImageRecord, MetricsError> {
    Ok(ImageRecord {
        image_id: image_id.to_string(),
        ged: ged_squared(predictions, annotations)?,
        kalpha_all: alpha(predictions, AlphaRegion::All)?.expect("the full region is never empty"),
        kalpha_roi: alpha(predictions, AlphaRegion::Roi)?,
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let sd = if values.len() > 1 { values.std_dev() } else { 0.0 };
        Some(Self { mean: values.mean(), sd, n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub records: Vec<ImageRecord>,
    pub ged: Summary,
    pub kalpha_all: Summary,
    /// Over the images whose ROI is non-empty.
    pub kalpha_roi: Option<Summary>,
}

impl MetricsReport {
    pub fn from_records(method: &str, records: Vec<ImageRecord>) -> Result<Self, MetricsError> {
        let col = |f: fn(&ImageRecord) -> Option<f64>| records.iter().filter_map(f).collect::<Vec<_>>();
        let ged = Summary::of(&col(|r| Some(r.ged))).ok_or(MetricsError::TooFewMasks { needed: 1, got: 0 })?;
        let kalpha_all = Summary::of(&col(|r| Some(r.kalpha_all))).expect("records are non-empty");
        let kalpha_roi = Summary::of(&col(|r| r.kalpha_roi));
        Ok(Self { method: method.to_string(), records, ged, kalpha_all, kalpha_roi })
    }

    /// Values of one metric in record order.
    pub fn column(&self, metric: Metric) -> Vec<f64> {
        self.records.iter().map(|r| metric.of(r).unwrap_or(f64::NAN)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ged,
    KalphaAll,
    KalphaRoi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ged, Metric::KalphaAll, Metric::KalphaRoi];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ged => "ged",
            Metric::KalphaAll => "kalpha_all",
            Metric::KalphaRoi => "kalpha_roi",
        }
    }

    pub fn of(self, r: &ImageRecord) -> Option<f64> {
        match self {
            Metric::Ged => Some(r.ged),
            Metric::KalphaAll => Some(r.kalpha_all),
            Metric::KalphaRoi => r.kalpha_roi,
        }
    }
}

/// Two-sided p-value for one method pair and metric; `None` when the test
/// is undefined (too few non-zero differences).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub p_value: Option<f64>,
}

/// Signed-rank tests over every unordered method pair, pairing records by
/// image id. Images missing a value in either method are skipped.
pub fn pairwise_wilcoxon(reports: &[MetricsReport]) -> Result<Vec<PairwiseTest>, MetricsError> {
    let mut out = vec![];
    for (i, ra) in reports.iter().enumerate() {
        for rb in &reports[i + 1..] {
            for metric in Metric::ALL {
                let (mut xa, mut xb) = (vec![], vec![]);
                for r in &ra.records {
                    let Some(other) = rb.records.iter().find(|o| o.image_id == r.image_id) else {
                        continue;
                    };
                    if let (Some(u), Some(v)) = (metric.of(r), metric.of(other)) {
                        xa.push(u);
                        xb.push(v);
                    }
                }
                let p_value = match wilcoxon_signed_rank(&xa, &xb) {
                    Ok(w) => Some(w.p_value),
                    Err(MetricsError::UndefinedTest(_)) => None,
                    Err(e) => return Err(e),
                };
                out.push(PairwiseTest { a: ra.method.clone(), b: rb.method.clone(), metric, p_value });
            }
        }
    }
    Ok(out)
}
