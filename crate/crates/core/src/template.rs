//! Canonical 68-point face template and its semantic regions.
//!
//! Generated by `scripts/gen_template.py`; unit-square coordinates, face
//! centred on (0.5, 0.5), every point within 0.36 of the centre.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

/// Largest distance of any template point from (0.5, 0.5).
pub const TEMPLATE_RADIUS: f64 = 0.36;

pub const TEMPLATE: [[f64; 2]; 68] = [
    [0.230000, 0.400000], // 0
    [0.235188, 0.470233], // 1
    [0.250553, 0.537766], // 2
    [0.275503, 0.600005], // 3
    [0.309081, 0.654558], // 4
    [0.349996, 0.699329], // 5
    [0.396675, 0.732597], // 6
    [0.447326, 0.753083], // 7
    [0.500000, 0.760000], // 8
    [0.552674, 0.753083], // 9
    [0.603325, 0.732597], // 10
    [0.650004, 0.699329], // 11
    [0.690919, 0.654558], // 12
    [0.724497, 0.600005], // 13
    [0.749447, 0.537766], // 14
    [0.764812, 0.470233], // 15
    [0.770000, 0.400000], // 16
    [0.300000, 0.371264], // 17
    [0.340000, 0.356105], // 18
    [0.380000, 0.350001], // 19
    [0.420000, 0.355875], // 20
    [0.460000, 0.370914], // 21
    [0.540000, 0.370914], // 22
    [0.580000, 0.355875], // 23
    [0.620000, 0.350001], // 24
    [0.660000, 0.356105], // 25
    [0.700000, 0.371264], // 26
    [0.500000, 0.420000], // 27
    [0.500000, 0.465000], // 28
    [0.500000, 0.510000], // 29
    [0.500000, 0.555000], // 30
    [0.430000, 0.570000], // 31
    [0.465000, 0.576000], // 32
    [0.500000, 0.582000], // 33
    [0.535000, 0.576000], // 34
    [0.570000, 0.570000], // 35
    [0.337000, 0.440000], // 36
    [0.361000, 0.424412], // 37
    [0.409000, 0.424412], // 38
    [0.433000, 0.440000], // 39
    [0.409000, 0.455588], // 40
    [0.361000, 0.455588], // 41
    [0.567000, 0.440000], // 42
    [0.591000, 0.424412], // 43
    [0.639000, 0.424412], // 44
    [0.663000, 0.440000], // 45
    [0.639000, 0.455588], // 46
    [0.591000, 0.455588], // 47
    [0.415000, 0.655000], // 48
    [0.426388, 0.641000], // 49
    [0.457500, 0.630751], // 50
    [0.500000, 0.627000], // 51
    [0.542500, 0.630751], // 52
    [0.573612, 0.641000], // 53
    [0.585000, 0.655000], // 54
    [0.573612, 0.673000], // 55
    [0.542500, 0.686177], // 56
    [0.500000, 0.691000], // 57
    [0.457500, 0.686177], // 58
    [0.426388, 0.673000], // 59
    [0.440000, 0.655000], // 60
    [0.457574, 0.647929], // 61
    [0.500000, 0.645000], // 62
    [0.542426, 0.647929], // 63
    [0.560000, 0.655000], // 64
    [0.542426, 0.663485], // 65
    [0.500000, 0.667000], // 66
    [0.457574, 0.663485], // 67
];

/// Named index ranges over the 68 points (zero-indexed, inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Jaw,
    RightBrow,
    LeftBrow,
    Nose,
    RightEye,
    LeftEye,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::Jaw,
        Region::RightBrow,
        Region::LeftBrow,
        Region::Nose,
        Region::RightEye,
        Region::LeftEye,
        Region::Mouth,
    ];

    pub fn indices(self) -> RangeInclusive<usize> {
        match self {
            Region::Jaw => 0..=16,
            Region::RightBrow => 17..=21,
            Region::LeftBrow => 22..=26,
            Region::Nose => 27..=35,
            Region::RightEye => 36..=41,
            Region::LeftEye => 42..=47,
            Region::Mouth => 48..=67,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Jaw => "jaw",
            Region::RightBrow => "right_brow",
            Region::LeftBrow => "left_brow",
            Region::Nose => "nose",
            Region::RightEye => "right_eye",
            Region::LeftEye => "left_eye",
            Region::Mouth => "mouth",
        }
    }

    pub fn of_point(index: usize) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.indices().contains(&index))
    }
}
