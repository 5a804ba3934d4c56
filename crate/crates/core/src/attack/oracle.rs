//! Differential execution oracle.

use rand::Rng;

use crate::error::Result;
use crate::rng;
use crate::toyprog::{CodeImage, ExecConfig, Execution, ToyProgram};

pub const ORACLE_INPUTS: usize = 16;

/// Seeded inputs plus the original program's behaviour on each of them.
#[derive(Clone, Debug)]
pub struct Oracle {
    inputs: Vec<Vec<u8>>,
    expected: Vec<Execution>,
}

impl Oracle {
    /// The first input is empty; the rest are 4-byte words, each all zero or
    /// uniformly random, so input-dependent branches go both ways.
    pub fn new(original: &ToyProgram, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &["oracle"]);
        let mut inputs = vec![Vec::new()];
        while inputs.len() < ORACLE_INPUTS {
            let words = rng.gen_range(1..=16);
            let mut input = Vec::with_capacity(words * 4);
            for _ in 0..words {
                let word: u32 = if rng.gen_bool(0.5) { 0 } else { rng.gen() };
                input.extend_from_slice(&word.to_le_bytes());
            }
            inputs.push(input);
        }
        let image = CodeImage::new(original);
        let expected = inputs
            .iter()
            .map(|i| image.execute(i, ExecConfig::default()))
            .collect::<Result<_>>()?;
        Ok(Oracle { inputs, expected })
    }

    pub fn inputs(&self) -> &[Vec<u8>] {
        &self.inputs
    }

    /// Same status and output as the original on every oracle input.
    pub fn check(&self, candidate: &ToyProgram) -> bool {
        let image = CodeImage::new(candidate);
        self.inputs.iter().zip(&self.expected).all(|(input, want)| {
            image
                .execute(input, ExecConfig::default())
                .map(|got| got.same_behaviour(want))
                .unwrap_or(false)
        })
    }
}
