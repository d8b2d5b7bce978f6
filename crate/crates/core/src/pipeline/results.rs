use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorFamily;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, ImageRecord};

/// One line of a results file: a record per image, then one summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResultLine {
    Image {
        attack: String,
        detector: DetectorFamily,
        #[serde(flatten)]
        record: ImageRecord,
    },
    Summary {
        attack: String,
        detector: DetectorFamily,
        clean_map: f64,
        map: f64,
        map_drop: f64,
        clean_per_class_ap: Vec<Option<f64>>,
        per_class_ap: Vec<Option<f64>>,
        mean_attack_seconds: Option<f64>,
        mean_l2: f64,
        mean_linf: f64,
    },
}

impl ResultLine {
    pub fn from_report(attack: &str, report: &EvalReport) -> Vec<ResultLine> {
        let mut lines: Vec<ResultLine> = report
            .images
            .iter()
            .map(|r| ResultLine::Image {
                attack: attack.to_string(),
                detector: report.detector,
                record: r.clone(),
            })
            .collect();
        lines.push(ResultLine::Summary {
            attack: attack.to_string(),
            detector: report.detector,
            clean_map: report.clean_map,
            map: report.map,
            map_drop: report.map_drop,
            clean_per_class_ap: report.clean_per_class_ap.clone(),
            per_class_ap: report.per_class_ap.clone(),
            mean_attack_seconds: report.mean_attack_seconds,
            mean_l2: report.mean_l2,
            mean_linf: report.mean_linf,
        });
        lines
    }
}

/// Writes reports as JSON lines, one block per `(attack name, report)`.
pub fn write_results(path: &Path, reports: &[(&str, &EvalReport)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (attack, report) in reports {
        for line in ResultLine::from_report(attack, report) {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Perceptibility;

    #[test]
    fn lines_parse_back() {
        let report = EvalReport {
            detector: DetectorFamily::ProposalBased,
            clean_per_class_ap: vec![Some(1.0), None],
            per_class_ap: vec![Some(0.25), None],
            clean_map: 1.0,
            map: 0.25,
            map_drop: 0.75,
            mean_attack_seconds: Some(0.01),
            mean_l2: 0.02,
            mean_linf: 0.1,
            images: vec![ImageRecord {
                id: "a".into(),
                objects: 2,
                fooled_objects: 1,
                fooled: false,
                perceptibility: Perceptibility {
                    mean_l2: 0.02,
                    linf: 0.1,
                },
                attack_seconds: Some(0.01),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/results.jsonl");
        write_results(&path, &[("uea", &report)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<ResultLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, ResultLine::from_report("uea", &report));
        assert!(text.lines().next().unwrap().contains("\"kind\":\"image\""));
    }
}
