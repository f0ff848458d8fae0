use crate::error::{Error, Result};

/// Fixed scalar codebook for pitch values.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f64>,
}

impl Codebook {
    /// Entries must be finite and strictly increasing.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("codebook must have at least one entry".into()));
        }
        if entries.iter().any(|e| !e.is_finite()) || entries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "codebook entries must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { entries })
    }

    /// `size` evenly spaced entries covering `[lo, hi]`.
    pub fn uniform(size: usize, lo: f64, hi: f64) -> Result<Self> {
        match size {
            0 => Err(Error::Config("codebook size must be >= 1".into())),
            1 => Self::new(vec![0.5 * (lo + hi)]),
            _ => {
                let step = (hi - lo) / (size - 1) as f64;
                Self::new((0..size).map(|i| lo + step * i as f64).collect())
            }
        }
    }

    /// Default pitch grid: 64 levels over normalized log-F0 in `[-3, 3]`.
    pub fn pitch_default(size: usize) -> Result<Self> {
        Self::uniform(size, -3.0, 3.0)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, index: usize) -> Option<f64> {
        self.entries.get(index).copied()
    }

    /// Index of the nearest entry; exact ties go to the lower index.
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_dist = (x - self.entries[0]).abs();
        for (i, &e) in self.entries.iter().enumerate().skip(1) {
            let dist = (x - e).abs();
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }
}

/// Nearest-entry assignment of every contour value.
pub fn vq_quantize(pitch: &[f64], codebook: &Codebook) -> (Vec<usize>, Vec<f64>) {
    let indices: Vec<usize> = pitch.iter().map(|&p| codebook.nearest(p)).collect();
    let values = indices.iter().map(|&i| codebook.entries[i]).collect();
    (indices, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn nearest_and_tie_rule() {
        let book = Codebook::new(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(book.nearest(0.4), 1);
        assert_eq!(book.nearest(0.5), 1);
        assert_eq!(book.nearest(-0.5), 0);
        assert_eq!(book.nearest(9.0), 2);
        let (idx, q) = vq_quantize(&[0.4, -0.9], &book);
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(q, vec![0.0, -1.0]);
    }

    #[test]
    fn uniform_grid_error_is_at_most_half_spacing() {
        let book = Codebook::uniform(16, -3.0, 3.0).unwrap();
        let half = 0.5 * 6.0 / 15.0;
        let mut rng = seeded_rng(21);
        let contour: Vec<f64> = (0..2000).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let (_, q) = vq_quantize(&contour, &book);
        for (raw, qv) in contour.iter().zip(&q) {
            assert!((raw - qv).abs() <= half + 1e-12);
        }
    }

    #[test]
    fn invalid_codebooks_are_rejected() {
        assert!(Codebook::new(vec![]).is_err());
        assert!(Codebook::new(vec![1.0, 1.0]).is_err());
        assert!(Codebook::uniform(0, 0.0, 1.0).is_err());
        assert_eq!(Codebook::pitch_default(64).unwrap().len(), 64);
    }

    proptest! {
        #[test]
        fn nearest_entry_is_no_farther_than_any_other(x in -5.0f64..5.0, size in 1usize..40) {
            let book = Codebook::uniform(size, -3.0, 3.0).unwrap();
            let i = book.nearest(x);
            let d = (x - book.entries()[i]).abs();
            for (j, e) in book.entries().iter().enumerate() {
                prop_assert!(d <= (x - e).abs());
                if j < i {
                    prop_assert!(d < (x - e).abs());
                }
            }
        }
    }
}
