//! Downstream heads and metrics that consume the pretrained encoder.
//!
//! Two transfer tasks measure what pretraining put into the encoder:
//!
//! * **Recognition** ([`recognizer`]): a linear CTC head over the encoder's
//!   token columns, trained either as a frozen-encoder probe or as a full
//!   fine-tune, scored by case-folded word accuracy.
//! * **Super-resolution** ([`sr`]): a residual conv decoder over the token
//!   grid of a bicubic-upsampled crop, scored by PSNR/SSIM ([`quality`])
//!   against the ground truth and against the plain-bicubic baseline.
//!
//! Both evaluations produce an [`EvalReport`] — a small JSON document tying
//! the scores to the split and the configuration that produced them.

pub mod ctc;
pub mod quality;
pub mod recognizer;
pub mod sr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ctc::{
    ctc_greedy_decode, ctc_greedy_decode_batch, ctc_loss, ctc_loss_with_labels, min_timesteps,
    transcript_labels, word_accuracy, BLANK, CTC_CLASSES,
};
pub use quality::{psnr, ssim, SSIM_WINDOW};
pub use recognizer::{
    evaluate_recognizer, train_recognizer, RecognizerModel, RecognizerTrainConfig,
};
pub use sr::{bicubic_baseline, evaluate_sr, sr_batch, train_sr, SrModel, SrTrainConfig};

/// Scores of one evaluation pass over one split.
///
/// Recognition runs fill `word_accuracy`; super-resolution runs fill `psnr`
/// and `ssim`. `config_hash` ties the numbers back to the configuration
/// that produced the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_accuracy: Option<f64>,
    /// Mean PSNR in dB. Identical images score `+∞`, which JSON cannot
    /// carry as a number, so it is stored as the string `"inf"`.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "psnr_field")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub samples: usize,
    pub config_hash: String,
}

impl EvalReport {
    /// Checks the report shape: a non-empty split, a positive sample
    /// count, and exactly one metric family with values in range.
    pub fn validate(&self) -> Result<()> {
        if self.split.is_empty() {
            return Err(Error::validation("report split name is empty"));
        }
        if self.samples == 0 {
            return Err(Error::validation("report covers zero samples"));
        }
        let recognition = self.word_accuracy.is_some();
        let restoration = self.psnr.is_some() || self.ssim.is_some();
        match (recognition, restoration) {
            (true, true) => {
                return Err(Error::validation(
                    "report mixes word_accuracy with psnr/ssim",
                ))
            }
            (false, false) => return Err(Error::validation("report carries no metric")),
            (true, false) => {
                let acc = self.word_accuracy.unwrap();
                if !(0.0..=1.0).contains(&acc) {
                    return Err(Error::validation(format!(
                        "word_accuracy {acc} outside [0, 1]"
                    )));
                }
            }
            (false, true) => {
                let (Some(p), Some(s)) = (self.psnr, self.ssim) else {
                    return Err(Error::validation("psnr and ssim must come together"));
                };
                if p.is_nan() {
                    return Err(Error::validation("psnr is NaN"));
                }
                if !(-1.0..=1.0).contains(&s) {
                    return Err(Error::validation(format!("ssim {s} outside [-1, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }
}

/// Serializes an optional PSNR so that `+∞` survives the JSON round trip.
mod psnr_field {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) if v.is_infinite() && *v > 0.0 => s.serialize_str("inf"),
            Some(v) => s.serialize_f64(*v),
            None => s.serialize_none(),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Number(v)) => Ok(Some(v)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(D::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recognition_report() -> EvalReport {
        EvalReport {
            split: "val".into(),
            word_accuracy: Some(0.5),
            psnr: None,
            ssim: None,
            samples: 10,
            config_hash: "abc".into(),
        }
    }

    fn restoration_report() -> EvalReport {
        EvalReport {
            split: "heldout".into(),
            word_accuracy: None,
            psnr: Some(21.5),
            ssim: Some(0.8),
            samples: 7,
            config_hash: "def".into(),
        }
    }

    #[test]
    fn json_round_trip_keeps_fields_and_skips_absent_metrics() {
        let rec = recognition_report();
        let json = rec.to_json().unwrap();
        assert!(json.contains("word_accuracy") && !json.contains("psnr"));
        assert_eq!(EvalReport::from_json(&json).unwrap(), rec);

        let sr = restoration_report();
        let json = sr.to_json().unwrap();
        assert!(json.contains("psnr") && !json.contains("word_accuracy"));
        assert_eq!(EvalReport::from_json(&json).unwrap(), sr);
    }

    #[test]
    fn infinite_psnr_survives_json() {
        let mut report = restoration_report();
        report.psnr = Some(f64::INFINITY);
        let json = report.to_json().unwrap();
        assert!(json.contains("\"inf\""), "json: {json}");
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back.psnr, Some(f64::INFINITY));
    }

    #[test]
    fn validation_rejects_malformed_reports() {
        let mut r = recognition_report();
        r.word_accuracy = Some(1.5);
        assert!(r.validate().is_err());

        let mut r = recognition_report();
        r.psnr = Some(20.0);
        r.ssim = Some(0.5);
        assert!(r.validate().is_err());

        let mut r = restoration_report();
        r.ssim = Some(-2.0);
        assert!(r.validate().is_err());

        let mut r = restoration_report();
        r.ssim = None;
        assert!(r.validate().is_err());

        let mut r = recognition_report();
        r.word_accuracy = None;
        assert!(r.validate().is_err());

        let mut r = recognition_report();
        r.samples = 0;
        assert!(r.validate().is_err());

        let mut r = recognition_report();
        r.split.clear();
        assert!(r.validate().is_err());
    }
}
