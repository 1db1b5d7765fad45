//! Double-angle label encoding for regression targets.

use crate::error::{Error, Result};
use crate::patch::{wrap_half_turn, AirwayLabel};

pub const ENCODED_LEN: usize = 8;

/// `(R_A, R_B, W_A, W_B, C_x, C_y, cos 2θ, sin 2θ)`.
pub fn encode_label(label: &AirwayLabel) -> [f64; ENCODED_LEN] {
    let (s, c) = (2.0 * label.theta).sin_cos();
    [
        label.r_a, label.r_b, label.w_a, label.w_b, label.c_x, label.c_y, c, s,
    ]
}

/// Decoded label plus whether any radius had to be clamped to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub label: AirwayLabel,
    pub clamped: bool,
}

/// Inverse of [`encode_label`]. The angle pair need not be unit length.
pub fn decode_label(v: &[f64]) -> Result<Decoded> {
    if v.len() != ENCODED_LEN {
        return Err(Error::Shape(format!("expected {ENCODED_LEN} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite regression output".into()));
    }
    let (c, s) = (v[6], v[7]);
    if c == 0.0 && s == 0.0 {
        return Err(Error::Undefined("angle pair (0, 0) has no direction".into()));
    }
    let theta = wrap_half_turn(s.atan2(c) / 2.0);
    let mut clamped = false;
    let mut radius = |x: f64| {
        if x < 0.0 {
            clamped = true;
            0.0
        } else {
            x
        }
    };
    let label = AirwayLabel {
        r_a: radius(v[0]),
        r_b: radius(v[1]),
        w_a: radius(v[2]),
        w_b: radius(v[3]),
        c_x: v[4],
        c_y: v[5],
        theta,
        has_adjacent: false,
    };
    Ok(Decoded { label, clamped })
}
