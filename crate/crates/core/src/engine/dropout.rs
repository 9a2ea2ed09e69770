use super::graph::{Graph, Var};
use super::rng::SeedStream;
use crate::error::Result;

/// Dropout applied at successive sites of one forward pass.
///
/// In training each site draws a fresh seed from the stream, so the masks
/// of a pass are fixed by the stream's root seed. In evaluation every site
/// is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    seeds: Option<SeedStream>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { p: 0.0, seeds: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            seeds: Some(SeedStream::new(seed)),
        }
    }

    pub fn training(&self) -> bool {
        self.seeds.is_some()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Seed for the next site; zero when not training.
    pub fn next_seed(&mut self) -> u64 {
        self.seeds.as_mut().map_or(0, SeedStream::next_seed)
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let seed = self.next_seed();
        g.dropout(x, self.p, self.training(), seed)
    }
}
