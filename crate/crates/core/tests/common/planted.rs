//! Regression data whose cosine under a fixed encoder already equals the
//! target at one particular lower bound, so training at that bound is a no-op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sedkit::encoder::{EncoderModel, PoolingSpec};
use sedkit::evalsts::{cosine, ScoredPair, Split, StsTask};

use super::random_sentence;

pub struct Planted {
    pub model: EncoderModel,
    pub train: Vec<ScoredPair>,
    pub dev: StsTask,
}

/// Gold chosen so that `lb + (1 - lb) * gold / 5` equals the pair's cosine.
pub fn planted_gold(cos: f64, lb: f64) -> f64 {
    (5.0 * (cos - lb) / (1.0 - lb)).clamp(0.0, 5.0)
}

pub fn planted(model: EncoderModel, lb: f64, pool: PoolingSpec, train: usize, dev: usize, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    while pairs.len() < train + dev {
        let (a, b) = (random_sentence(&mut rng), random_sentence(&mut rng));
        if a == b || !seen.insert((a.clone(), b.clone())) || seen.contains(&(b.clone(), a.clone())) {
            continue;
        }
        let ea = model.encode(&a, pool).unwrap();
        let eb = model.encode(&b, pool).unwrap();
        let c = cosine(ea.as_slice(), eb.as_slice()).unwrap();
        if c > lb && c < 1.0 {
            pairs.push(ScoredPair::new(a, b, planted_gold(c, lb)).unwrap());
        }
    }
    let dev_pairs = pairs.split_off(train);
    Planted {
        model,
        train: pairs,
        dev: StsTask::new("planted-dev", dev_pairs, Split::Dev).unwrap(),
    }
}
