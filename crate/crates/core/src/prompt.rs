//! User- and protocol-supplied prompts for one image.

use serde_json::Value;
use spt_tensor::Tensor;

use crate::error::{Result, SptError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Background,
    Foreground,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl Point {
    pub fn foreground(x: f64, y: f64) -> Self {
        Point {
            x,
            y,
            label: PointLabel::Foreground,
        }
    }
}

/// Inclusive pixel box: `(x0, y0)` top-left, `(x1, y1)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<Point>,
    pub boxes: Vec<BoxPrompt>,
    /// Mask probabilities at image resolution, shape `[size, size]`.
    pub mask_prompt: Option<Tensor>,
}

impl PromptSet {
    pub fn from_box(b: BoxPrompt) -> Self {
        PromptSet {
            boxes: vec![b],
            ..Default::default()
        }
    }

    pub fn from_points(points: Vec<Point>) -> Self {
        PromptSet {
            points,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty() && self.mask_prompt.is_none()
    }

    /// Number of sparse tokens this set encodes to.
    pub fn sparse_len(&self) -> usize {
        self.points.len() + 2 * self.boxes.len()
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.is_empty() {
            return Err(SptError::MissingPrompt);
        }
        let size = image_size as f64;
        let inside = |v: f64| v.is_finite() && (0.0..size).contains(&v);
        for (i, p) in self.points.iter().enumerate() {
            if !inside(p.x) || !inside(p.y) {
                return Err(SptError::InvalidPrompt(format!(
                    "points[{i}] = ({}, {}) lies outside [0, {image_size})",
                    p.x, p.y
                )));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if ![b.x0, b.y0, b.x1, b.y1].into_iter().all(inside) {
                return Err(SptError::InvalidPrompt(format!("boxes[{i}] lies outside [0, {image_size})")));
            }
            if b.x0 > b.x1 || b.y0 > b.y1 {
                return Err(SptError::InvalidPrompt(format!("boxes[{i}] has x0 > x1 or y0 > y1")));
            }
        }
        if let Some(m) = &self.mask_prompt {
            if m.shape() != [image_size, image_size] {
                return Err(SptError::InvalidPrompt(format!(
                    "mask_prompt has shape {:?}, expected [{image_size}, {image_size}]",
                    m.shape()
                )));
            }
            if !m.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(SptError::InvalidPrompt("mask_prompt values must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Parses `{"points": [[x, y, label], ...], "boxes": [[x0, y0, x1, y1], ...]}`.
    /// Labels are 1 (foreground) or 0 (background). Both keys are optional;
    /// anything else is rejected. Errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| SptError::Parse(format!("prompt JSON: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| SptError::Parse("prompt JSON must be an object".into()))?;
        let mut set = PromptSet::default();
        for (key, value) in obj {
            let rows = value
                .as_array()
                .ok_or_else(|| SptError::Parse(format!("{key}: expected an array")))?;
            match key.as_str() {
                "points" => {
                    for (i, row) in rows.iter().enumerate() {
                        let v = numbers(row, 3, &format!("points[{i}]"), "[x, y, label]")?;
                        let label = match v[2] {
                            l if l == 1.0 => PointLabel::Foreground,
                            l if l == 0.0 => PointLabel::Background,
                            _ => {
                                return Err(SptError::Parse(format!("points[{i}].label: expected 0 or 1")));
                            }
                        };
                        set.points.push(Point { x: v[0], y: v[1], label });
                    }
                }
                "boxes" => {
                    for (i, row) in rows.iter().enumerate() {
                        let v = numbers(row, 4, &format!("boxes[{i}]"), "[x0, y0, x1, y1]")?;
                        set.boxes.push(BoxPrompt {
                            x0: v[0],
                            y0: v[1],
                            x1: v[2],
                            y1: v[3],
                        });
                    }
                }
                other => return Err(SptError::Parse(format!("{other}: unknown prompt field"))),
            }
        }
        Ok(set)
    }
}

fn numbers(row: &Value, n: usize, field: &str, form: &str) -> Result<Vec<f64>> {
    let bad = || SptError::Parse(format!("{field}: expected {form}"));
    let items = row.as_array().ok_or_else(bad)?;
    if items.len() != n {
        return Err(bad());
    }
    items.iter().map(|v| v.as_f64().ok_or_else(bad)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_points_and_boxes() {
        let p = PromptSet::from_json(r#"{"points": [[3, 4, 1], [5.5, 6, 0]], "boxes": [[0, 0, 63, 63]]}"#).unwrap();
        assert_eq!(p.points.len(), 2);
        assert_eq!(p.points[1].label, PointLabel::Background);
        assert_eq!(p.sparse_len(), 4);
        p.validate(64).unwrap();
    }

    #[test]
    fn parse_errors_name_the_field() {
        let e = PromptSet::from_json(r#"{"points": [[1, 2, 1], [1, 2]]}"#).unwrap_err();
        assert!(e.to_string().contains("points[1]"), "{e}");
        let e = PromptSet::from_json(r#"{"boxes": [[1, 2, "a", 4]]}"#).unwrap_err();
        assert!(e.to_string().contains("boxes[0]"), "{e}");
        let e = PromptSet::from_json(r#"{"points": [[1, 2, 7]]}"#).unwrap_err();
        assert!(e.to_string().contains("points[0].label"), "{e}");
        let e = PromptSet::from_json(r#"{"mask": []}"#).unwrap_err();
        assert!(e.to_string().contains("mask"), "{e}");
    }

    #[test]
    fn empty_set_is_missing_prompt() {
        let p = PromptSet::from_json("{}").unwrap();
        assert!(matches!(p.validate(64), Err(SptError::MissingPrompt)));
    }

    #[test]
    fn bounds_are_checked() {
        let p = PromptSet::from_points(vec![Point::foreground(64.0, 0.0)]);
        assert!(p.validate(64).is_err());
        let b = PromptSet::from_box(BoxPrompt { x0: 5.0, y0: 0.0, x1: 4.0, y1: 3.0 });
        assert!(b.validate(64).is_err());
    }
}
