use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered token-map extents `(h_k, w_k)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("scale schedule is empty"));
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::invalid(format!("zero extent in schedule {scales:?}")));
        }
        if scales.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return Err(Error::invalid(format!("schedule {scales:?} shrinks")));
        }
        Ok(ScaleSchedule { scales })
    }

    /// Square maps with the given side lengths.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    /// Number of scales K.
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn last(&self) -> (usize, usize) {
        *self.scales.last().expect("nonempty")
    }

    /// Extent of scale `k` (0-based).
    pub fn extent(&self, k: usize) -> (usize, usize) {
        self.scales[k]
    }

    pub fn tokens(&self, k: usize) -> usize {
        self.scales[k].0 * self.scales[k].1
    }

    pub fn total_tokens(&self) -> usize {
        (0..self.len()).map(|k| self.tokens(k)).sum()
    }

    /// Start offset of every scale plus the total length at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut acc = 0;
        out.push(0);
        for k in 0..self.len() {
            acc += self.tokens(k);
            out.push(acc);
        }
        out
    }

    /// Scale index (0-based) of every sequence position.
    pub fn scale_of_positions(&self) -> Vec<usize> {
        (0..self.len())
            .flat_map(|k| std::iter::repeat_n(k, self.tokens(k)))
            .collect()
    }

    /// Whether the first map is the single start position.
    pub fn starts_at_unit(&self) -> bool {
        self.scales[0] == (1, 1)
    }
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule::square(&[1, 2, 3, 4]).expect("valid")
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        ScaleSchedule::new(v)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(s: ScaleSchedule) -> Self {
        s.scales
    }
}

/// Codebook indices for one scale, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl TokenMap {
    pub fn filled(h: usize, w: usize, index: usize) -> Self {
        TokenMap {
            h,
            w,
            indices: vec![index; h * w],
        }
    }
}

/// Checks that `maps` conform to `schedule` and index a vocabulary of `vocab`.
pub fn check_maps(maps: &[TokenMap], schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
    if maps.len() > schedule.len() {
        return Err(Error::invalid(format!(
            "{} token maps for a {}-scale schedule",
            maps.len(),
            schedule.len()
        )));
    }
    for (k, m) in maps.iter().enumerate() {
        if (m.h, m.w) != schedule.extent(k) || m.indices.len() != m.h * m.w {
            return Err(Error::ShapeMismatch {
                op: "token map",
                lhs: vec![m.h, m.w, m.indices.len()],
                rhs: vec![schedule.extent(k).0, schedule.extent(k).1],
            });
        }
        if let Some(&bad) = m.indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::OutOfRange {
                what: "token",
                index: bad,
                bound: vocab,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_scale_length() {
        let s = ScaleSchedule::square(&[1, 2]).unwrap();
        assert_eq!(s.total_tokens(), 5);
        assert_eq!(s.offsets(), vec![0, 1, 5]);
        assert_eq!(s.scale_of_positions(), vec![0, 1, 1, 1, 1]);
    }

    #[test]
    fn shrinking_rejected() {
        assert!(ScaleSchedule::square(&[1, 3, 2]).is_err());
        assert!(ScaleSchedule::new(vec![(1, 1), (0, 2)]).is_err());
    }

    #[test]
    fn serde_validates() {
        assert!(serde_json::from_str::<ScaleSchedule>("[[2,2],[1,1]]").is_err());
        let s: ScaleSchedule = serde_json::from_str("[[1,1],[2,2]]").unwrap();
        assert_eq!(s.len(), 2);
    }
}
