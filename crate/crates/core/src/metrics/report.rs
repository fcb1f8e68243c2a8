//! Report serialization: JSON lines (one record per image plus one
//! aggregate record) and CSV.

use serde::Serialize;

/// Per-image evaluation record.
#[derive(Debug, Clone, Serialize)]
pub struct ImageRecord {
    pub split: String,
    pub image_id: String,
    pub dice: f64,
    pub miou: f64,
    pub biou: f64,
}

/// Aggregate over a split: metrics from the global confusion matrix,
/// per-image-averaged boundary IoU, and the model cost columns.
///
/// FLOPs follow the 1 multiply-accumulate = 2 FLOPs convention.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub split: String,
    pub images: usize,
    pub dice: f64,
    pub miou: f64,
    pub biou: f64,
    pub per_class_iou: Vec<f64>,
    pub params: u64,
    pub flops: u64,
    pub flops_convention: String,
}

impl MetricReport {
    pub fn bounded(&self) -> bool {
        [self.dice, self.miou, self.biou]
            .iter()
            .chain(self.per_class_iou.iter())
            .all(|v| (0.0..=1.0).contains(v))
    }
}

/// One JSON object per line: every image record, then the aggregate.
pub fn to_jsonl(records: &[ImageRecord], aggregate: &MetricReport) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("image record serializes"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(aggregate).expect("aggregate serializes"));
    out.push('\n');
    out
}

/// CSV export of the per-image records.
pub fn to_csv(records: &[ImageRecord]) -> String {
    let mut out = String::from("split,image_id,dice,miou,biou\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.split, r.image_id, r.dice, r.miou, r.biou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_spec_header_and_rows() {
        let rec = ImageRecord {
            split: "val".into(),
            image_id: "synth_000001".into(),
            dice: 0.75,
            miou: 0.5,
            biou: 0.25,
        };
        let csv = to_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "split,image_id,dice,miou,biou");
        assert_eq!(lines.next().unwrap(), "val,synth_000001,0.75,0.5,0.25");
    }

    #[test]
    fn jsonl_is_one_object_per_line() {
        let rec = ImageRecord {
            split: "val".into(),
            image_id: "a".into(),
            dice: 1.0,
            miou: 1.0,
            biou: 1.0,
        };
        let agg = MetricReport {
            split: "val".into(),
            images: 1,
            dice: 1.0,
            miou: 1.0,
            biou: 1.0,
            per_class_iou: vec![1.0, 1.0],
            params: 10,
            flops: 20,
            flops_convention: "1 multiply-accumulate = 2 FLOPs".into(),
        };
        let text = to_jsonl(&[rec], &agg);
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            assert!(serde_json::from_str::<serde_json::Value>(line).is_ok());
        }
    }
}
