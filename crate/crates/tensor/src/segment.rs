use crate::TensorError;

/// Assignment of flat rows to segments, e.g. candidate rows to the batch
/// instance they belong to. Ids need not be sorted and segments may be empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    ids: Vec<usize>,
    count: usize,
}

impl SegmentIndex {
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self, TensorError> {
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "segment_index",
                msg: "segment count must be positive".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= count) {
            return Err(TensorError::Index {
                op: "segment_index",
                index: bad,
                bound: count,
            });
        }
        Ok(Self { ids, count })
    }

    /// Every row in segment 0.
    pub fn single(len: usize) -> Self {
        Self {
            ids: vec![0; len],
            count: 1,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row indices of each segment in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (row, &id) in self.ids.iter().enumerate() {
            out[id].push(row);
        }
        out
    }
}
