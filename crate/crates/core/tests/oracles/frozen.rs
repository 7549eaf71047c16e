//! 50-digit evaluations of the schedule closed forms, produced by
//! `schedule_oracle.py` (mpmath) with the stock constants
//! ε = 0.002, T = 80, ρ = 7, σ_data = 0.5, s0 = 2, s1 = 150, μ0 = 0.9.

/// Middle level of a three-level ladder.
pub const SIGMA_3_MID: f64 = 2.515218976147158578827532;

pub const SIGMAS_18: [f64; 18] = [
    0.002000000000000000000000000,
    0.007528019962784070402404207,
    0.02293451837233336838669235,
    0.05994731123547156654401026,
    0.1395164687310164804939773,
    0.2964422844791572639133428,
    0.5853481231945423030084624,
    1.088170636545279411775087,
    1.923339837040049929388957,
    3.256821519765538321070689,
    5.315194521796378883768455,
    8.400935309099821158001940,
    12.91008238075731564721107,
    19.35245298032522144595300,
    28.37458460415683737829089,
    40.78557379650795824771784,
    57.58598472124815779995970,
    80.00000000000000000000000,
];

/// `(k, N(k), μ(k))` for K = 100,000.
pub const STEP_TABLE_K: u64 = 100_000;

pub const STEP_TABLE: [(u64, u32, f64); 8] = [
    (0, 2, 0.9000000000000000000000000),
    (1, 3, 0.9321697517861576600632987),
    (1000, 16, 0.9869162813660015632515181),
    (25000, 76, 0.9972311950816519011020874),
    (50000, 107, 0.9980325824752018922537438),
    (77777, 134, 0.9984286907912165188172995),
    (99999, 151, 0.9986054697436056284640801),
    (100000, 151, 0.9986054697436056284640801),
];

/// `(t, [c_skip, c_out, c_in])`.
pub const COEFF_TABLE: [(f64, [f64; 3]); 5] = [
    (0.002, [1.0, 0.0, 1.999984000191997440035839]),
    (
        0.01,
        [
            0.9997440655192270778680658,
            0.007998400479840055979847389,
            1.999600119960013994961847,
        ],
    ),
    (
        0.5,
        [
            0.5020039999678717440020562,
            0.3521391770309006671516205,
            1.414213562373095048801689,
        ],
    ),
    (
        2.5,
        [
            0.03852077749104623047998121,
            0.4898981055751837117465578,
            0.3922322702763680638483249,
        ],
    ),
    (
        80.0,
        [
            0.00003906292722635220871081264,
            0.4999777349052264546898904,
            0.01249975586652732455036102,
        ],
    ),
];
