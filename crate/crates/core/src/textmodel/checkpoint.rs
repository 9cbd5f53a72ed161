use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{param_names, LMConfig, LanguageModel};
use super::tensor::Scalar;
use super::tokenizer::Vocab;
use super::ModelError;
use crate::container::{Container, RawTensor};

pub const LM_KIND: &str = "cuegen.lm";

/// Position of the training sampler's ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    #[serde(with = "u128_str")]
    pub word_pos: u128,
}

mod u128_str {
    use serde::{Deserialize, Deserializer, Serializer};
    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, word_pos: 0 }
    }

    pub fn of(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: LMConfig,
    vocab: Vocab,
    step: u64,
    rng: RngState,
}

/// Model parameters plus everything needed to resume or serve it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: LanguageModel<T>,
    pub vocab: Vocab,
    pub step: u64,
    pub rng: RngState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Container {
        let meta = Meta { config: self.model.config, vocab: self.vocab.clone(), step: self.step, rng: self.rng };
        let mut c = Container::new(LM_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for (name, t) in self.model.names().into_iter().zip(&self.model.params) {
            c.push(RawTensor::from_tensor(name, t));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(LM_KIND)?;
        let meta: Meta =
            serde_json::from_value(c.meta.clone()).map_err(|e| ModelError::Format(format!("meta: {e}")))?;
        if meta.vocab.len() != meta.config.vocab_size {
            return Err(ModelError::Format("vocab size does not match config".into()));
        }
        let params = param_names(&meta.config)
            .iter()
            .map(|n| c.tensor(n).and_then(|t| t.to_tensor::<T>()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Checkpoint {
            model: LanguageModel::from_params(meta.config, params)?,
            vocab: meta.vocab,
            step: meta.step,
            rng: meta.rng,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::train_tokenizer;

    #[test]
    fn byte_identical_round_trip() {
        let vocab = train_tokenizer(["a b c d"], 10).unwrap();
        let config = LMConfig { layers: 1, heads: 2, d_model: 8, context: 8, vocab_size: vocab.len(), d_ff: 16, seed: 1 };
        let ck = Checkpoint {
            model: LanguageModel::<f32>::new(config).unwrap(),
            vocab,
            step: 7,
            rng: RngState { seed: 3, word_pos: 1 << 70 },
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let wide = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(wide.model.params[0].data[0] as f32, ck.model.params[0].data[0]);
    }

    #[test]
    fn rng_state_resumes() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let state = RngState::of(9, &rng);
        let a: u64 = rng.random();
        let b: u64 = state.restore().random();
        assert_eq!(a, b);
    }
}
