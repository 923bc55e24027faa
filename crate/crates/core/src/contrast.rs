//! Relative-contrast tables for a still frame.

use serde::{Deserialize, Serialize};

use crate::detect::{relative_contrast, ContrastError};
use crate::frame::{Frame, PixelRect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRoi {
    pub name: String,
    pub rect: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub reference: PixelRect,
    pub background: PixelRect,
    pub objects: Vec<NamedRoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub name: String,
    pub ratio: f64,
    pub exceeds_reference: bool,
}

pub fn contrast_report(frame: &Frame, spec: &RoiSpec) -> Result<Vec<ContrastRow>, ContrastError> {
    spec.objects
        .iter()
        .map(|o| {
            let ratio = relative_contrast(frame, o.rect, spec.reference, spec.background)?;
            Ok(ContrastRow {
                name: o.name.clone(),
                ratio,
                exceeds_reference: ratio > 1.0,
            })
        })
        .collect()
}

pub fn format_table(rows: &[ContrastRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>8}\n", "object", "ratio");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>8.3}", r.name, r.ratio));
        if r.exceeds_reference {
            out.push_str("  exceeds reference");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ladder() -> (Frame, RoiSpec) {
        let mut f = Frame::filled(100, 20, 200);
        let mut objects = Vec::new();
        for (i, deficit) in [150u8, 100, 50, 30].into_iter().enumerate() {
            let r = PixelRect::new(10 + 20 * i as u32, 5, 8, 8);
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    f.set(x, y, 200 - deficit);
                }
            }
            objects.push(NamedRoi {
                name: format!("syringe{i}"),
                rect: r,
            });
        }
        let spec = RoiSpec {
            reference: objects[1].rect,
            background: PixelRect::new(0, 0, 100, 4),
            objects,
        };
        (f, spec)
    }

    #[test]
    fn ladder_ratios() {
        let (f, spec) = ladder();
        let rows = contrast_report(&f, &spec).unwrap();
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        assert_eq!(ratios, vec![1.5, 1.0, 0.5, 0.3]);
        assert!(rows[0].exceeds_reference);
        assert!(!rows[1].exceeds_reference);
        let table = format_table(&rows);
        assert_eq!(table.matches("exceeds reference").count(), 1);
    }

    #[test]
    fn degenerate_reference_propagates() {
        let (f, mut spec) = ladder();
        spec.reference = spec.background;
        assert!(matches!(
            contrast_report(&f, &spec),
            Err(ContrastError::DegenerateReference { .. })
        ));
    }
}
