use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{assd, dice, BinaryMask};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::exec;

/// Mean and population standard deviation over the defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Values that entered the statistics.
    pub count: usize,
    /// Values left out because the metric was undefined.
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let (mean, std) = if n == 0 {
            (None, None)
        } else {
            let m = defined.iter().sum::<f64>() / n as f64;
            let var = defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            (Some(m), Some(var.sqrt()))
        };
        Summary {
            mean,
            std,
            count: n,
            undefined: values.len() - n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    /// `None` when either mask is empty for this class.
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u8,
    pub images: Vec<ImageScore>,
    pub dice: Summary,
    pub assd: Summary,
}

/// Per-class, per-image Dice (as a fraction) and ASSD (pixels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
}

impl MetricsReport {
    /// One row per image and class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,class,dice,assd\n");
        for c in &self.classes {
            for im in &c.images {
                let assd = im.assd.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{},{},{}", im.id, c.class, im.dice, assd);
            }
        }
        s
    }

    /// Mean foreground Dice across classes, skipping classes without data.
    pub fn mean_dice(&self) -> Option<f64> {
        let means: Vec<f64> = self.classes.iter().filter_map(|c| c.dice.mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

/// Scores every prediction against its ground truth for each class in `classes`.
pub fn report(ids: &[String], preds: &[LabelMap], gts: &[LabelMap], classes: &[u8]) -> Result<MetricsReport> {
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::contract(format!(
            "report needs aligned batches: {} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let per_image = exec::map_indexed(preds.len(), |i| -> Result<Vec<ImageScore>> {
        classes
            .iter()
            .map(|&c| {
                let p = BinaryMask::from_labels(&preds[i], c);
                let g = BinaryMask::from_labels(&gts[i], c);
                let d = dice(&p, &g)?;
                let a = match assd(&p, &g) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(ImageScore {
                    id: ids[i].clone(),
                    dice: d,
                    assd: a,
                })
            })
            .collect()
    });
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    let classes = classes
        .iter()
        .enumerate()
        .map(|(k, &class)| {
            let images: Vec<ImageScore> = per_image.iter().map(|v| v[k].clone()).collect();
            let dice = Summary::of(&images.iter().map(|s| Some(s.dice)).collect::<Vec<_>>());
            let assd = Summary::of(&images.iter().map(|s| s.assd).collect::<Vec<_>>());
            ClassReport {
                class,
                images,
                dice,
                assd,
            }
        })
        .collect();
    Ok(MetricsReport { classes })
}
