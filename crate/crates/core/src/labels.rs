//! Integer class maps shared by masks, losses and metrics.

use std::fmt;

/// A dense map of small integer class ids with an explicit shape.
///
/// Used for ground-truth masks (`[H, W]` or `[N, H, W]`), predicted masks and
/// gathered point labels (`[N, P]`). Class ids fit in a `u8`; 255 is free for
/// use as an ignore label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

/// Error raised when shape and element count disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelShapeError {
    pub shape: Vec<usize>,
    pub len: usize,
}

impl fmt::Display for LabelShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "label data of length {} does not match shape {:?}",
            self.len, self.shape
        )
    }
}

impl std::error::Error for LabelShapeError {}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, LabelShapeError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LabelShapeError {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: u8) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest class id present, or `None` for an empty map.
    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Value at a 2-d position of a `[H, W]` map.
    pub fn at2(&self, y: usize, x: usize) -> u8 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[y * self.shape[1] + x]
    }

    /// Value at a 3-d position of a `[N, H, W]` map.
    pub fn at3(&self, n: usize, y: usize, x: usize) -> u8 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(n * h + y) * w + x]
    }

    /// Stack `[H, W]` maps into one `[N, H, W]` map.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self, LabelShapeError> {
        assert!(!maps.is_empty());
        let inner = maps[0].shape.clone();
        let mut data = Vec::with_capacity(maps.len() * maps[0].len());
        for m in maps {
            if m.shape != inner {
                return Err(LabelShapeError {
                    shape: m.shape.clone(),
                    len: m.len(),
                });
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![maps.len()];
        shape.extend_from_slice(&inner);
        Self::new(shape, data)
    }
}
