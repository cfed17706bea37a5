//! Model-agnostic geometric feature of a subject-object pair.

use crate::error::{Error, Result};
use crate::types::BoundingBox;

/// Six-component pair descriptor.
///
/// Components 0..4 are the mean left, top, right and bottom edges of the two
/// (canonicalized) boxes divided by the subject height; components 4 and 5 are
/// the object/subject height and width ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeature {
    pub psi: [f64; 6],
}

impl PairFeature {
    pub fn as_array(&self) -> [f64; 6] {
        self.psi
    }
}

/// Translate both boxes by a common offset so that the upper-left corner of
/// their union sits at the origin. Sizes are untouched.
pub fn canonicalize_pair(subject: &BoundingBox, object: &BoundingBox) -> (BoundingBox, BoundingBox) {
    let min_x = subject.left().min(object.left());
    let min_y = subject.top().min(object.top());
    (subject.translated(-min_x, -min_y), object.translated(-min_x, -min_y))
}

/// Pair feature of `subject` (i) and `object` (j), evaluated on the
/// canonicalized pair:
///
/// ```text
/// [ (2(cx_i+cx_j) - (w_i+w_j)) / 4h_i,  (2(cy_i+cy_j) - (h_i+h_j)) / 4h_i,
///   (2(cx_i+cx_j) + (w_i+w_j)) / 4h_i,  (2(cy_i+cy_j) + (h_i+h_j)) / 4h_i,
///   h_j / h_i,  w_j / w_i ]
/// ```
pub fn pair_feature(subject: &BoundingBox, object: &BoundingBox) -> Result<PairFeature> {
    if !(subject.h > 0.0 && subject.w > 0.0) {
        return Err(Error::DegenerateSubject {
            h: subject.h,
            w: subject.w,
        });
    }
    object.validate()?;
    let (s, o) = canonicalize_pair(subject, object);
    let sum_cx = 2.0 * (s.cx + o.cx);
    let sum_cy = 2.0 * (s.cy + o.cy);
    let sum_w = s.w + o.w;
    let sum_h = s.h + o.h;
    let denom = 4.0 * s.h;
    Ok(PairFeature {
        psi: [
            (sum_cx - sum_w) / denom,
            (sum_cy - sum_h) / denom,
            (sum_cx + sum_w) / denom,
            (sum_cy + sum_h) / denom,
            o.h / s.h,
            o.w / s.w,
        ],
    })
}
