//! Seeded synthetic fixtures: a Gaussian-mixture embedding testbed standing
//! in for real/synthetic sentence embeddings, and a templated toy
//! instruction corpus for the generator and the end-to-end pipeline.

use crate::corpus::{Corpus, CorpusRole, InstructionRecord};
use crate::embedding::EmbeddingMatrix;
use crate::rng::{derive_seed, CounterRng};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub dim: usize,
    pub components: usize,
    pub real_count: usize,
    pub synthetic_count: usize,
    /// Spread of the component means.
    pub mean_scale: f64,
    /// Within-component standard deviation.
    pub component_sd: f64,
    /// Standard deviation of the shift applied to each synthetic mean.
    pub mean_shift: f64,
    /// Exponent flattening the synthetic mixture weights (1 keeps them).
    pub weight_flattening: f64,
    /// Fraction of synthetic points drawn from spurious components that the
    /// real distribution lacks.
    pub spurious_fraction: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            components: 20,
            real_count: 5_000,
            synthetic_count: 50_000,
            mean_scale: 4.0,
            component_sd: 1.0,
            mean_shift: 0.5,
            weight_flattening: 0.2,
            spurious_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureTestbed {
    pub real: EmbeddingMatrix,
    pub synthetic: EmbeddingMatrix,
    /// Real mixture weights.
    pub weights: Vec<f64>,
    /// Component index of each real point.
    pub real_labels: Vec<usize>,
}

fn draw_points(rng: &mut CounterRng, n: usize, means: &[Vec<f64>], weights: &[f64], sd: f64, labels: &mut Vec<usize>) -> Vec<f32> {
    let dim = means[0].len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.weighted_index(weights);
        labels.push(c);
        data.extend(means[c].iter().map(|m| (m + sd * rng.standard_normal()) as f32));
    }
    data
}

/// Real points from a skewed mixture; synthetic points from the same mixture
/// with shifted means, flattened weights and extra spurious components.
pub fn gaussian_mixture(config: &MixtureConfig, seed: u64) -> MixtureTestbed {
    let mut rng = CounterRng::new(derive_seed(seed, "mixture"));
    let (k, dim) = (config.components, config.dim);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| config.mean_scale * rng.standard_normal()).collect())
        .collect();
    // Skewed weights: geometric-like decay with jitter.
    let raw: Vec<f64> = (0..k).map(|i| (-(i as f64) / 4.0).exp() * (0.5 + rng.uniform())).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let mut syn_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().map(|v| v + config.mean_shift * rng.standard_normal()).collect())
        .collect();
    let mut syn_weights: Vec<f64> = weights.iter().map(|w| w.powf(config.weight_flattening)).collect();
    let base: f64 = syn_weights.iter().sum();
    syn_weights.iter_mut().for_each(|w| *w *= (1.0 - config.spurious_fraction) / base);
    let spurious = k / 4;
    for _ in 0..spurious {
        syn_means.push((0..dim).map(|_| config.mean_scale * rng.standard_normal()).collect());
        syn_weights.push(config.spurious_fraction / spurious as f64);
    }

    let mut real_labels = Vec::with_capacity(config.real_count);
    let real = draw_points(&mut rng, config.real_count, &means, &weights, config.component_sd, &mut real_labels);
    let mut syn_labels = Vec::new();
    let synthetic = draw_points(&mut rng, config.synthetic_count, &syn_means, &syn_weights, config.component_sd, &mut syn_labels);
    MixtureTestbed {
        real: EmbeddingMatrix::unaligned(config.real_count, dim, real).expect("finite draws"),
        synthetic: EmbeddingMatrix::unaligned(config.synthetic_count, dim, synthetic).expect("finite draws"),
        weights,
        real_labels,
    }
}

const TOPICS: &[&str] = &[
    "rivers", "volcanoes", "bread", "chess", "owls", "tides", "jazz", "glaciers", "bees", "maps", "tea", "comets", "bridges",
    "clocks", "ferns", "whales", "deserts", "kites", "honey", "lanterns", "salt", "moss", "violins", "wolves",
];
const ADJECTIVES: &[&str] = &["short", "funny", "clear", "simple", "gentle", "bold", "quiet", "quick", "strange", "calm"];
const NAMES: &[&str] = &["Ana", "Ben", "Chen", "Dara", "Eli", "Femi", "Gus", "Hana", "Ivo", "Jun", "Kai", "Lea"];
const STREETS: &[&str] = &["Oak", "Elm", "Pine", "Maple", "Cedar", "Birch", "Ash", "Willow", "Spruce", "Alder", "Hazel", "Laurel"];
const STREET_KINDS: &[&str] = &["Street", "Avenue", "Road", "Lane"];

fn pick<'a>(rng: &mut CounterRng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

pub fn random_phone(rng: &mut CounterRng) -> String {
    (0..10).map(|_| char::from(b'0' + rng.below(10) as u8)).collect()
}

pub fn random_address(rng: &mut CounterRng) -> String {
    format!("{} {} {}", 10 + rng.below(990), pick(rng, STREETS), pick(rng, STREET_KINDS))
}

/// Street words used by the address grammar.
pub fn street_words() -> &'static [&'static str] {
    STREETS
}

pub fn street_kinds() -> &'static [&'static str] {
    STREET_KINDS
}

/// Short templated instructions; about one in ten carries a random phone
/// number or address.
pub fn toy_instruction_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = CounterRng::new(derive_seed(seed, "toy-corpus"));
    let records = (0..n)
        .map(|i| {
            let topic = pick(&mut rng, TOPICS);
            let text = match rng.below(20) {
                0 => format!("Call {} at {}.", pick(&mut rng, NAMES), random_phone(&mut rng)),
                1 => format!("Send the {topic} to {}.", random_address(&mut rng)),
                2..=5 => format!("Write a {} poem about {topic}.", pick(&mut rng, ADJECTIVES)),
                6..=9 => format!("Explain how {topic} work."),
                10..=12 => format!("List three facts about {topic}."),
                13..=15 => format!("Give a {} summary of {topic}.", pick(&mut rng, ADJECTIVES)),
                16 | 17 => format!("Ask {} about {topic}.", pick(&mut rng, NAMES)),
                _ => format!("Compare {topic} and {}.", pick(&mut rng, TOPICS)),
            };
            InstructionRecord::new(format!("toy-{i:05}"), text)
        })
        .collect();
    Corpus::new(CorpusRole::Real, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_reproducible_and_sized() {
        let config = MixtureConfig {
            real_count: 300,
            synthetic_count: 900,
            ..MixtureConfig::default()
        };
        let a = gaussian_mixture(&config, 3);
        let b = gaussian_mixture(&config, 3);
        assert_eq!(a.real, b.real);
        assert_eq!(a.synthetic, b.synthetic);
        assert_eq!((a.real.count(), a.synthetic.count(), a.real.dim()), (300, 900, 8));
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(gaussian_mixture(&config, 4).real, a.real);
    }

    #[test]
    fn toy_corpus_is_short_and_unique_ids() {
        let c = toy_instruction_corpus(2000, 1);
        c.validate().unwrap();
        assert!(c.texts().all(|t| t.len() <= 64 && t.is_ascii()));
        assert!(c.texts().any(|t| t.starts_with("Call ")));
        assert_eq!(c, toy_instruction_corpus(2000, 1));
    }

    #[test]
    fn secret_formats() {
        let mut rng = CounterRng::new(0);
        let phone = random_phone(&mut rng);
        assert!(phone.len() == 10 && phone.bytes().all(|b| b.is_ascii_digit()));
        let addr = random_address(&mut rng);
        assert_eq!(addr.split(' ').count(), 3);
    }
}
