//! Heatmap artifacts: flat JSON arrays and ASCII PGM (P2) images.

use crate::error::{domain, Result};
use crate::scalar::Scalar;

/// Flat JSON array of relevance scores.
pub fn heatmap_json<T: Scalar>(relevance: &[T]) -> Result<String> {
    Ok(serde_json::to_string(relevance)?)
}

/// Gray levels with a symmetric diverging scale: 128 at zero, 1 and 255 at
/// `∓max|R|`.
pub fn gray_levels<T: Scalar>(relevance: &[T]) -> Vec<u8> {
    let peak = relevance.iter().fold(0.0f64, |m, r| m.max(r.to_f64().unwrap_or(0.0).abs()));
    relevance
        .iter()
        .map(|r| {
            if peak == 0.0 {
                return 128;
            }
            let v = 128.0 + 127.0 * r.to_f64().unwrap_or(0.0) / peak;
            v.round().clamp(1.0, 255.0) as u8
        })
        .collect()
}

/// ASCII PGM of a `width × height` heatmap stored row-major.
pub fn heatmap_pgm<T: Scalar>(relevance: &[T], width: usize, height: usize) -> Result<String> {
    if width * height != relevance.len() || relevance.is_empty() {
        return Err(domain(format!(
            "{} values do not fill a {width}x{height} image",
            relevance.len()
        )));
    }
    let levels = gray_levels(relevance);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in levels.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_scale() {
        assert_eq!(gray_levels(&[0.0, 2.0, -2.0, 1.0]), vec![128, 255, 1, 192]);
        assert_eq!(gray_levels(&[0.0f64, 0.0]), vec![128, 128]);
    }

    #[test]
    fn pgm_layout() {
        let s = heatmap_pgm(&[0.0, 1.0, -1.0, 0.5], 2, 2).unwrap();
        assert_eq!(s, "P2\n2 2\n255\n128 255\n1 192\n");
        assert!(heatmap_pgm(&[1.0], 2, 2).is_err());
    }

    #[test]
    fn json_is_a_flat_array() {
        assert_eq!(heatmap_json(&[0.5, -1.0]).unwrap(), "[0.5,-1.0]");
    }
}
