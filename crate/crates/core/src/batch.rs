use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Where the rows of a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Noise,
    Data,
    Generated,
}

/// `N x D` block of points, all finite, `N >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: Array2<f64>,
    source: SourceTag,
}

impl SampleBatch {
    pub fn new(data: Array2<f64>, source: SourceTag) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "sample batch must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        ensure_finite(data.view(), "sample batch")?;
        Ok(Self { data, source })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

pub(crate) fn ensure_finite(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if let Some(((r, c), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} has {v} at ({r}, {c})")));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    what: &str,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(SampleBatch::new(Array2::zeros((0, 2)), SourceTag::Data).is_err());
        let bad = array![[1.0, f64::NAN]];
        assert!(matches!(
            SampleBatch::new(bad, SourceTag::Data),
            Err(Error::Numeric(_))
        ));
        let ok = SampleBatch::new(array![[1.0, 2.0]], SourceTag::Noise).unwrap();
        assert_eq!((ok.len(), ok.dim()), (1, 2));
    }
}
