use grim_core::GrimError;

/// Parses `4x16` (also `4X16` or `4*16`).
pub fn pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X', '*'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad number in `{s}`"));
    let (a, b) = (num(a)?, num(b)?);
    if a == 0 || b == 0 {
        return Err(format!("dimensions must be positive in `{s}`"));
    }
    Ok((a, b))
}

/// Comma-separated list of dimensions, e.g. `1,3,32,32`.
pub fn dims(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad dimension `{t}`")))
        .collect()
}

/// Target zero fraction from `--alpha` or `--rate` (`alpha = 1 - 1/rate`).
pub fn alpha(alpha: Option<f64>, rate: Option<f64>) -> Result<f64, GrimError> {
    match (alpha, rate) {
        (Some(a), None) => {
            if (0.0..1.0).contains(&a) {
                Ok(a)
            } else {
                Err(GrimError::Alpha(a))
            }
        }
        (None, Some(r)) if r >= 1.0 => Ok(1.0 - 1.0 / r),
        (None, Some(r)) => Err(GrimError::Config(format!("pruning rate must be >= 1, got {r}"))),
        (None, None) => Ok(0.75),
        (Some(_), Some(_)) => Err(GrimError::Config("give --alpha or --rate, not both".into())),
    }
}

/// Candidate block sizes used when none are given: powers of two from 1 to
/// 32 in each dimension, ascending by area.
pub fn default_candidates() -> Vec<(usize, usize)> {
    let sides = [1, 2, 4, 8, 16, 32];
    let mut v: Vec<(usize, usize)> = sides.iter().flat_map(|&h| sides.iter().map(move |&w| (h, w))).collect();
    v.sort_by_key(|&(h, w)| (h * w, h));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs() {
        assert_eq!(pair("4x16"), Ok((4, 16)));
        assert_eq!(pair(" 2x16"), Ok((2, 16)));
        assert!(pair("4").is_err());
        assert!(pair("0x4").is_err());
        assert_eq!(dims("1, 3,8"), Ok(vec![1, 3, 8]));
    }

    #[test]
    fn alpha_from_rate() {
        assert_eq!(alpha(None, Some(4.0)).unwrap(), 0.75);
        assert_eq!(alpha(Some(0.0), None).unwrap(), 0.0);
        assert!(alpha(Some(1.0), None).is_err());
        assert!(alpha(Some(0.5), Some(2.0)).is_err());
        assert!(alpha(None, Some(0.5)).is_err());
    }

    #[test]
    fn candidates_ascend_by_area() {
        let c = default_candidates();
        assert_eq!(c.len(), 36);
        assert!(c.windows(2).all(|w| w[0].0 * w[0].1 <= w[1].0 * w[1].1));
    }
}
