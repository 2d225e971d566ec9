//! Published four-buffer BLTs optimized for production training.

use crate::blt::BltParams;
use crate::participation::ParticipationSchema;

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub rounds: usize,
    pub min_sep: usize,
    pub max_part: usize,
    pub theta: [f64; 4],
    pub omega: [f64; 4],
}

impl Preset {
    pub fn params(&self) -> BltParams {
        BltParams::new(self.theta.to_vec(), self.omega.to_vec())
            .expect("published parameters are valid")
    }

    pub fn schema(&self) -> ParticipationSchema {
        ParticipationSchema::new(self.rounds, self.min_sep, self.max_part)
            .expect("published schema is valid")
    }
}

pub const MIN_SEP_100: Preset = Preset {
    name: "minsep100",
    rounds: 2000,
    min_sep: 100,
    max_part: 10,
    theta: [
        0.989739971007307,
        0.7352001759538236,
        0.16776199983448145,
        0.1677619998016191,
    ],
    omega: [
        0.20502892852480875,
        0.23357939425278557,
        0.03479503245420878,
        0.03479509876050538,
    ],
};

pub const MIN_SEP_400: Preset = Preset {
    name: "minsep400",
    rounds: 4000,
    min_sep: 400,
    max_part: 5,
    theta: [
        0.9999999999921251,
        0.9944453083640997,
        0.8985923474607591,
        0.4912001418098778,
    ],
    omega: [
        0.0070314825502323835,
        0.10613806907600574,
        0.1898159060327625,
        0.1966594748073734,
    ],
};

pub const MIN_SEP_1000: Preset = Preset {
    name: "minsep1000",
    rounds: 4000,
    min_sep: 1000,
    max_part: 2,
    theta: [
        0.9999999999983397,
        0.9973412136664378,
        0.9584629472313878,
        0.6581796870749317,
    ],
    omega: [
        0.008657392263671862,
        0.05890891298180163,
        0.14548176930698697,
        0.2770117005326523,
    ],
};

pub const ALL: [Preset; 3] = [MIN_SEP_100, MIN_SEP_400, MIN_SEP_1000];

pub fn by_name(name: &str) -> Option<Preset> {
    ALL.iter().copied().find(|p| p.name == name)
}
