//! The three pyramid stages shared by every decoder branch.

use std::fmt;

/// Largest stage-1 hypothesis, at 1/16 resolution.
pub const STAGE1_MAX_OFFSET: i32 = 12;

/// Residual search range of stages 2 and 3, at the stage's own scale.
pub const RESIDUAL_RANGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    /// 1-based stage number, also the instrumentation slot.
    pub fn number(self) -> usize {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: usize) -> Option<Stage> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Three),
            _ => None,
        }
    }

    /// Zero-based position, for per-stage arrays.
    pub fn index(self) -> usize {
        self.number() - 1
    }

    /// Input resolution divided by the stage resolution.
    pub fn downsample(self) -> usize {
        match self {
            Stage::One => 16,
            Stage::Two => 8,
            Stage::Three => 4,
        }
    }

    pub fn prev(self) -> Option<Stage> {
        Stage::from_number(self.number() - 1)
    }

    /// Disparity hypotheses searched at this stage, in stage-scale pixels.
    pub fn offsets(self) -> Vec<i32> {
        match self {
            Stage::One => (0..=STAGE1_MAX_OFFSET).collect(),
            _ => (-RESIDUAL_RANGE..=RESIDUAL_RANGE).collect(),
        }
    }

    pub fn is_residual(self) -> bool {
        self != Stage::One
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.number())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_one_covers_192_pixels_at_full_resolution() {
        let offs = Stage::One.offsets();
        assert_eq!(offs.len(), 13);
        assert_eq!(*offs.last().unwrap() as usize * Stage::One.downsample(), 192);
        assert_eq!(Stage::Two.offsets(), vec![-2, -1, 0, 1, 2]);
    }

    #[test]
    fn numbering_round_trips() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_number(s.number()), Some(s));
        }
        assert_eq!(Stage::One.prev(), None);
        assert_eq!(Stage::Three.prev(), Some(Stage::Two));
        assert_eq!(Stage::from_number(4), None);
    }
}
