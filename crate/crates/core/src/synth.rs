//! Planted-signal datasets: low-rank preferences plus features that mix an
//! informative block with pure noise.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::autodiff::Matrix;
use crate::data::{split_interactions, Dataset, ModalityFeatures, RawInteractions, SplitRatios};
use crate::error::{Error, Result};
use crate::seeds::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    /// Width of the block that linearly encodes the item factors.
    pub relevant_dim: usize,
    /// Width of the independent noise block.
    pub irrelevant_dim: usize,
    /// Standard deviation of the noise block; 0 makes every feature informative.
    pub noise: f64,
    pub interactions_per_user: usize,
    pub modalities: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 500,
            items: 300,
            rank: 8,
            relevant_dim: 16,
            irrelevant_dim: 64,
            noise: 1.0,
            interactions_per_user: 20,
            modalities: 2,
            seed: 1,
        }
    }
}

/// Generated factors alongside the dataset, for oracle checks.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("items", self.items),
            ("rank", self.rank),
            ("relevant_dim", self.relevant_dim),
            ("interactions_per_user", self.interactions_per_user),
            ("modalities", self.modalities),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.interactions_per_user >= self.items {
            return Err(Error::Config(
                "interactions_per_user must be below the item count".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite value >= 0".into()));
        }
        Ok(())
    }

    /// Samples factors, interactions (Gumbel top-k over `<u_a, v_i>`), features and a split.
    pub fn generate(&self) -> Result<SynthOutput> {
        self.validate()?;
        let mut rng = rng_for(self.seed, Stream::Synth);
        let user_factors = gaussian(&mut rng, self.users, self.rank, 1.0);
        let item_factors = gaussian(&mut rng, self.items, self.rank, 1.0);

        let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
        // Register every id up front so dense ids follow generation order,
        // including items nobody picked.
        let mut raw = RawInteractions::default();
        raw.users.extend((0..self.users).map(|a| format!("u{a}")));
        raw.items.extend((0..self.items).map(|i| format!("i{i}")));
        let scores = user_factors.matmul_t(&item_factors);
        let mut perturbed: Vec<(f64, usize)> = Vec::with_capacity(self.items);
        for a in 0..self.users {
            perturbed.clear();
            perturbed.extend(
                scores
                    .row(a)
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (s + gumbel.sample(&mut rng), i)),
            );
            perturbed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let mut chosen: Vec<usize> = perturbed[..self.interactions_per_user]
                .iter()
                .map(|&(_, i)| i)
                .collect();
            chosen.sort_unstable();
            raw.pairs.extend(chosen.into_iter().map(|i| (a, i)));
        }

        let mut modalities = Vec::with_capacity(self.modalities);
        for m in 0..self.modalities {
            let mixing = gaussian(
                &mut rng,
                self.rank,
                self.relevant_dim,
                1.0 / (self.rank as f64).sqrt(),
            );
            let relevant = item_factors.matmul(&mixing);
            let irrelevant = gaussian(&mut rng, self.items, self.irrelevant_dim, self.noise);
            let width = self.relevant_dim + self.irrelevant_dim;
            let mut data = Vec::with_capacity(self.items * width);
            for i in 0..self.items {
                data.extend_from_slice(relevant.row(i));
                data.extend_from_slice(irrelevant.row(i));
            }
            modalities.push((
                format!("modality{m}"),
                Matrix::from_vec(self.items, width, data)?,
            ));
        }
        let set = split_interactions(&raw, SplitRatios::default(), self.seed);
        Ok(SynthOutput {
            dataset: Dataset::new(set, ModalityFeatures::new(modalities)?)?,
            user_factors,
            item_factors,
        })
    }
}
